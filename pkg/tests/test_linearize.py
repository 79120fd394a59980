import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.domain.encoding import TokenRole
from src.domain.models import PositionScheme, SequenceTooLongError, Table, TableShapeError, TokenScheme
from src.use_cases.linearize import encode, linearize, table_dims, to_tsv
from src.use_cases.vocabulary import UNK, VOCAB

from strategies import questions, tables

Q, B, C = TokenRole.QUESTION, TokenRole.BOUNDARY, TokenRole.CELL_CONTENT


class TestLayouts:
    def test_t0(self, tiny_table):
        enc = linearize("select c1", tiny_table, TokenScheme.T0)
        assert enc.symbols == ("select", "c1", "SEP", "c1", "SEP", "5")

    def test_t1(self, tiny_table):
        enc = linearize("select c1", tiny_table, TokenScheme.T1)
        assert enc.symbols == ("select", "c1", "SEP", "c1", "[ROW 1]", "[CELL]", "5")
        assert list(enc.roles) == [Q, Q, B, C, TokenRole.ROW_TOK, TokenRole.CELL_TOK, C]

    def test_t2(self, tiny_table):
        enc = linearize("select c1", tiny_table, TokenScheme.T2)
        assert enc.symbols == ("select", "c1", "SEP", "[TAB]", "[COL]", "c1", "[ROW]", "[CELL]", "5")
        assert list(enc.row_idx) == [0, 0, 0, 0, 0, 0, 1, 1, 1]
        assert list(enc.col_idx) == [0, 0, 0, 0, 1, 1, 0, 1, 1]

    def test_t1_row_limit(self):
        table = Table.from_lists(["c1"], [[str(i)] for i in range(65)])
        with pytest.raises(TableShapeError):
            linearize("", table, TokenScheme.T1, max_length=4096)


class TestPositions:
    def test_tpe_enumerates(self, tiny_table):
        enc = encode("select c1", tiny_table, TokenScheme.T1, PositionScheme.TPE)
        assert list(enc.pos_idx) == list(range(7))

    def test_cpe_restarts(self, tiny_table):
        enc = encode("select c1", tiny_table, TokenScheme.T1, PositionScheme.CPE)
        assert list(enc.pos_idx) == [0, 1, 0, 0, 0, 0, 0]

    def test_cpe_counts_within_cell(self):
        table = Table.from_lists(["c1"], [["123"]])
        enc = encode("", table, TokenScheme.T0, PositionScheme.CPE)
        content = [int(p) for p, r, row in zip(enc.pos_idx, enc.roles, enc.row_idx) if r == C and row == 1]
        assert content == [0, 1, 2]


def test_too_long_is_an_error(small_table):
    with pytest.raises(SequenceTooLongError) as info:
        linearize("select c1", small_table, TokenScheme.T2, max_length=10)
    assert info.value.limit == 10
    assert info.value.required_length > 10


def test_unknown_symbols_logged(caplog):
    table = Table.from_lists(["name"], [["bob"]])
    with caplog.at_level(logging.WARNING):
        enc = linearize("who", table, TokenScheme.T0)
    assert enc.unk_count == 3
    assert enc.symbols.count(UNK) == 3
    assert any(getattr(r, "unk_count", None) == 3 for r in caplog.records)


def test_tsv_header_and_rows(tiny_table):
    lines = to_tsv(encode("select c1", tiny_table, TokenScheme.T2, PositionScheme.CPE)).splitlines()
    assert lines[0].split("\t") == ["index", "symbol", "role", "row", "col", "cell_ord", "segment", "pos"]
    assert len(lines) == 10
    assert lines[4].split("\t")[:3] == ["3", "[TAB]", "TABLE_TOK"]


@settings(max_examples=60, deadline=None)
@given(table=tables(), question=questions, scheme=st.sampled_from(list(TokenScheme)))
def test_dims_recoverable(table, question, scheme):
    enc = linearize(question, table, scheme, max_length=4096)
    assert table_dims(enc) == (table.n_rows, table.n_cols)


@settings(max_examples=60, deadline=None)
@given(table=tables(), question=questions, scheme=st.sampled_from(list(TokenScheme)))
def test_ids_match_symbols(table, question, scheme):
    enc = linearize(question, table, scheme, max_length=4096)
    assert [VOCAB.symbol(int(i)) for i in enc.token_ids] == list(enc.symbols)
    content = enc.roles == C
    assert (enc.segment[content] == 1).all()
    assert (enc.segment[enc.roles == Q] == 0).all()


@settings(max_examples=40, deadline=None)
@given(table=tables(), scheme=st.sampled_from(list(TokenScheme)))
def test_row_major_order(table, scheme):
    enc = linearize("", table, scheme, max_length=4096)
    cells = [(int(r), int(c)) for r, c, role in zip(enc.row_idx, enc.col_idx, enc.roles) if role == C]
    assert cells == sorted(cells)
