import logging

import pytest

from src.domain.models import QAExample, Table


@pytest.fixture
def tiny_table() -> Table:
    return Table.from_lists(["c1"], [["5"]])


@pytest.fixture
def small_table() -> Table:
    """c1 = [5, 7, 5], c2 = [1, 2, 3], c3 = [9, 9, 8]."""
    return Table.from_lists(["c1", "c2", "c3"], [["5", "1", "9"], ["7", "2", "9"], ["5", "3", "8"]])


@pytest.fixture
def example(small_table) -> QAExample:
    return QAExample(small_table, "select c2 where c1 = 5", ("1", "3"))


@pytest.fixture(autouse=True)
def _quiet_root_logger():
    # CLI tests install handlers on the root logger; drop them after each test.
    root = logging.getLogger()
    before = list(root.handlers)
    yield
    for handler in list(root.handlers):
        if handler not in before:
            root.removeHandler(handler)
