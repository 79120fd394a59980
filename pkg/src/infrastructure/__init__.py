from .database import ResultsDB
from .log_config import configure_logging
from .repositories import (
    CheckpointRepository,
    JsonlDatasetRepository,
    ResultsRepository,
    read_answers,
    read_results_csv,
    read_table,
    write_csv,
    write_predictions,
    write_results_csv,
)
from .utils import Settings, apply_thread_caps, atomic_open, atomic_write

__all__ = [
    'ResultsDB',
    'ResultsRepository',
    'JsonlDatasetRepository',
    'CheckpointRepository',
    'configure_logging',
    'read_answers',
    'read_results_csv',
    'read_table',
    'write_csv',
    'write_predictions',
    'write_results_csv',
    'Settings',
    'apply_thread_caps',
    'atomic_open',
    'atomic_write',
]
