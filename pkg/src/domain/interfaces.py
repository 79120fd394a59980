from abc import ABC, abstractmethod
from pathlib import Path
from typing import Iterable, Iterator, Optional

from .models import QAExample, ResultRow


class IDatasetRepository(ABC):
    """
    Interface for QA dataset persistence.
    Decouples generation and training from the on-disk format.
    """

    @abstractmethod
    def write(self, examples: Iterable[QAExample], path: Path) -> int:
        """Persists examples in order and returns how many were written."""
        pass

    @abstractmethod
    def read(self, path: Path) -> Iterator[QAExample]:
        """Streams examples back in file order."""
        pass


class IResultsRepository(ABC):
    """
    Interface for the factor-grid results ledger.
    Makes grid runs resumable: a recorded key is never trained again.
    """

    @abstractmethod
    def record(self, row: ResultRow, status: str = "ok") -> None:
        """Stores one measurement (or a failed attempt) keyed by config, suite and replicate."""
        pass

    @abstractmethod
    def has(self, key: tuple[str, str, str]) -> bool:
        """Checks whether a (config label, suite, replicate) triple was already recorded."""
        pass

    @abstractmethod
    def all_rows(self) -> list[ResultRow]:
        """Retrieves every recorded row in canonical order."""
        pass


class ICheckpointRepository(ABC):
    """
    Interface for model checkpoint storage.
    """

    @abstractmethod
    def save(self, path: Path, config: dict, tensors: dict) -> None:
        """Writes the config and named float32 tensors."""
        pass

    @abstractmethod
    def load(self, path: Path) -> tuple[dict, dict]:
        """Reads back (config, tensors); raises on an unknown format."""
        pass

    @abstractmethod
    def exists(self, path: Path) -> bool:
        """Checks whether a checkpoint is present at the path."""
        pass

    def save_metrics(self, path: Path, trace: Iterable[dict]) -> None:
        """Stores the metric trace next to the checkpoint; a no-op unless overridden."""
        pass

    def metrics(self, path: Path) -> Optional[list[dict]]:
        """Metric trace stored next to the checkpoint, when any."""
        return None
