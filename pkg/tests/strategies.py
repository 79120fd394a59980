"""Hypothesis strategies shared by the property tests."""
from hypothesis import strategies as st

from src.domain.models import Table

cell_values = st.integers(min_value=0, max_value=999).map(str)


@st.composite
def tables(draw, max_rows: int = 5, max_cols: int = 4, values=cell_values) -> Table:
    n_rows = draw(st.integers(1, max_rows))
    n_cols = draw(st.integers(1, max_cols))
    rows = [[draw(values) for _ in range(n_cols)] for _ in range(n_rows)]
    return Table.from_lists([f"c{c}" for c in range(1, n_cols + 1)], rows)


questions = st.lists(
    st.sampled_from(["select", "where", "c1", "c2", "=", "!=", "7", "42", "and", "limit"]),
    min_size=0, max_size=6,
).map(" ".join)
