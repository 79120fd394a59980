import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.domain.encoding import AttentionMask, BiasClass, Block, TokenRole
from src.domain.models import FactorConfigError, MaskScheme, PositionScheme, Seed, Table, TokenScheme
from src.use_cases.bench import bench_table
from src.use_cases.linearize import encode
from src.use_cases.masks import (
    blocks_to_dense,
    build_bias_map,
    build_mask,
    build_mask_bruteforce,
    export_blocks,
    format_blocks,
    sparsity,
    tile_dense,
)

from strategies import questions, tables


def _enc(table, tokens=TokenScheme.T2, question="select c1"):
    return encode(question, table, tokens, PositionScheme.TPE, max_length=8192)


def _index(enc, row, col, role=TokenRole.CELL_CONTENT):
    hits = np.flatnonzero((enc.row_idx == row) & (enc.col_idx == col) & (enc.roles == role))
    return int(hits[0])


def test_m0_allows_everything(small_table):
    mask = build_mask(_enc(small_table), MaskScheme.M0)
    assert mask.dense.all()
    assert sparsity(mask) == 0.0
    assert mask.blocks == (Block(0, mask.length, 0, mask.length),)


def test_m1_same_row_and_column_only():
    table = Table.from_lists(["c1", "c2"], [["1", "2"], ["3", "4"]])
    enc = _enc(table, TokenScheme.T0)
    mask = build_mask(enc, MaskScheme.M1)
    a = _index(enc, 1, 1)
    assert mask.dense[a, _index(enc, 1, 2)]
    assert mask.dense[a, _index(enc, 2, 1)]
    assert not mask.dense[a, _index(enc, 2, 2)]


def test_structural_masks_need_t2(small_table):
    with pytest.raises(FactorConfigError):
        build_mask(_enc(small_table, TokenScheme.T1), MaskScheme.M4)


def test_m6_is_very_sparse():
    table = Table.from_lists([f"c{c}" for c in range(1, 9)], [[str(10 + r * 8 + c) for c in range(8)] for r in range(8)])
    mask = build_mask(_enc(table), MaskScheme.M6)
    assert sparsity(mask) >= 0.95


def test_diagonal_only_mask():
    dense = np.eye(6, dtype=bool)
    mask = AttentionMask(6, dense, tile_dense(dense))
    assert sparsity(mask) == pytest.approx(1 - 1 / 6)
    assert mask.blocks == tuple(Block(i, i + 1, i, i + 1) for i in range(6))


def test_m3_blocks_stay_within_one_row():
    table = Table.from_lists(["c1", "c2", "c3"], [["1", "2", "3"], ["4", "5", "6"], ["7", "8", "9"]])
    enc = _enc(table, TokenScheme.T0)
    mask = build_mask(enc, MaskScheme.M3)
    question, content = enc.question_like, enc.content
    for b in mask.blocks:
        if question[b.q0:b.q1].any() or question[b.k0:b.k1].any():
            continue
        rows = set(enc.row_idx[b.q0:b.q1][content[b.q0:b.q1]].tolist())
        rows |= set(enc.row_idx[b.k0:b.k1][content[b.k0:b.k1]].tolist())
        assert len(rows) <= 1
    assert sum(b.area for b in mask.blocks) == mask.allowed_count


def test_m2_m3_transpose_symmetry():
    table = Table.from_lists(["c1", "c2", "c3"], [["1", "2", "3"], ["4", "5", "6"]])
    enc = _enc(table, TokenScheme.T0)
    assert sparsity(build_mask(enc, MaskScheme.M2)) == pytest.approx(sparsity(build_mask(enc, MaskScheme.M3)))


@pytest.mark.parametrize("scheme", [m for m in MaskScheme if m is not MaskScheme.M0])
def test_question_sees_whole_table_side(scheme):
    table = Table.from_lists(["c1", "c2", "c3"], [["1", "2", "3"], ["4", "5", "6"], ["7", "8", "9"]])
    enc = _enc(table, TokenScheme.T2, "select c1 where c2 = 5")
    mask = build_mask(enc, scheme)
    question, table_side = enc.question_like, enc.table_side
    assert mask.dense[np.ix_(question, table_side)].all()
    assert mask.dense[np.ix_(table_side, question)].all()
    band = [b for b in mask.blocks if question[b.q0:b.q1].any() or question[b.k0:b.k1].any()]
    assert len(band) <= 3


def test_question_content_only_hides_structure(tiny_table):
    enc = _enc(tiny_table)
    q = int(np.flatnonzero(enc.roles == TokenRole.QUESTION)[0])
    tab = int(np.flatnonzero(enc.roles == TokenRole.TABLE_TOK)[0])
    cell = _index(enc, 1, 1)
    assert build_mask(enc, MaskScheme.M6).dense[q, tab]
    narrow = build_mask(enc, MaskScheme.M6, question_content_only=True)
    assert not narrow.dense[q, tab]
    assert narrow.dense[q, cell]


@pytest.mark.parametrize("scheme", [MaskScheme.M1, MaskScheme.M4])
def test_structural_tokens_get_question_band_and_self(scheme):
    table = Table.from_lists(["c1", "c2"], [["1", "2"], ["3", "4"]])
    enc = _enc(table)
    mask = build_mask(enc, scheme)
    row_tok = int(np.flatnonzero(enc.roles == TokenRole.ROW_TOK)[0])
    allowed = set(np.flatnonzero(mask.dense[row_tok]).tolist())
    expected = set(np.flatnonzero(enc.question_like).tolist()) | {row_tok}
    if scheme is MaskScheme.M4:
        expected |= set(np.flatnonzero(enc.content & (enc.row_idx == enc.row_idx[row_tok])).tolist())
    assert allowed == expected


def test_m3_area_well_below_square():
    table = bench_table(4096, TokenScheme.T0, Seed(0))
    enc = encode("select c1 where c2 = 5", table, TokenScheme.T0, PositionScheme.TPE, max_length=8192)
    mask = build_mask(enc, MaskScheme.M3)
    assert sum(b.area for b in export_blocks(mask)) < 0.10 * len(enc) ** 2


def test_block_file_format(tiny_table):
    mask = build_mask(_enc(tiny_table), MaskScheme.M3)
    lines = format_blocks(mask).splitlines()
    assert lines[0].startswith(f"L={mask.length} scheme=M3 sparsity=")
    assert len(lines) == len(mask.blocks) + 1
    assert all(len(line.split()) == 4 for line in lines[1:])


class TestBiasMap:
    def test_self_on_diagonal(self, small_table):
        rel = build_bias_map(_enc(small_table)).rel
        assert (np.diag(rel) == BiasClass.SELF).all()

    def test_header_and_cell_by_direction(self, small_table):
        enc = _enc(small_table, TokenScheme.T0)
        rel = build_bias_map(enc).rel
        header, cell = _index(enc, 0, 2), _index(enc, 1, 2)
        assert rel[header, cell] == BiasClass.HEADER_TO_CELL
        assert rel[cell, header] == BiasClass.CELL_TO_HEADER

    def test_same_cell_wins_over_same_row(self):
        table = Table.from_lists(["c1", "c2"], [["123", "4"]])
        enc = _enc(table, TokenScheme.T0)
        rel = build_bias_map(enc).rel
        digits = np.flatnonzero((enc.row_idx == 1) & (enc.col_idx == 1))
        assert rel[digits[0], digits[2]] == BiasClass.SAME_CELL
        assert rel[digits[0], _index(enc, 1, 2)] == BiasClass.SAME_ROW

    def test_question_pairs(self, small_table):
        enc = _enc(small_table, TokenScheme.T0)
        rel = build_bias_map(enc).rel
        q = int(np.flatnonzero(enc.roles == TokenRole.QUESTION)[0])
        assert rel[q, _index(enc, 2, 1)] == BiasClass.QUESTION_CELL
        assert rel[_index(enc, 0, 1), q] == BiasClass.HEADER_QUESTION


@settings(max_examples=100, deadline=None)
@given(table=tables(), question=questions, scheme=st.sampled_from(list(MaskScheme)),
       tokens=st.sampled_from(list(TokenScheme)), content_only=st.booleans())
def test_matches_bruteforce_and_tiles_exactly(table, question, scheme, tokens, content_only):
    enc = _enc(table, tokens, question)
    if scheme in (MaskScheme.M4, MaskScheme.M5, MaskScheme.M6) and tokens is not TokenScheme.T2:
        with pytest.raises(FactorConfigError):
            build_mask(enc, scheme)
        return
    mask = build_mask(enc, scheme, content_only)
    oracle = build_mask_bruteforce(enc, scheme, content_only)
    assert np.array_equal(mask.dense, oracle.dense)
    assert np.diag(mask.dense).all()
    assert np.array_equal(mask.dense, mask.dense.T)
    cover = blocks_to_dense(mask.blocks, mask.length)
    assert cover.max() == 1
    assert np.array_equal(cover.astype(bool), mask.dense)


@settings(max_examples=40, deadline=None)
@given(table=tables(), tokens=st.sampled_from(list(TokenScheme)))
def test_m1_least_sparse_content_mask(table, tokens):
    enc = _enc(table, tokens)
    m1 = sparsity(build_mask(enc, MaskScheme.M1))
    assert m1 <= sparsity(build_mask(enc, MaskScheme.M2)) + 1e-12
    assert m1 <= sparsity(build_mask(enc, MaskScheme.M3)) + 1e-12
