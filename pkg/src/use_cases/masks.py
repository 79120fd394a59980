"""Structural attention masks M0-M6, the bias relation map, and block export.

Allowed pairs per scheme (every rule is symmetric):

    rule                    M1 M2 M3 M4 M5 M6
    question <-> table side  x  x  x  x  x  x
    question <-> question    x  x  x  x  x  x
    same column              x  x     x
    same row                 x     x     x
    [ROW] <-> its row                 x  x  x
    [COL] <-> its column              x  x  x
    [CELL] <-> its cell               x  x  x
    [TAB] <-> every cell              x  x  x

The table side includes structural and boundary tokens; ``question_content_only``
narrows the question band to cell content. Self-attention is always allowed.
M0 allows everything.
"""
from dataclasses import dataclass

import numpy as np

from src.domain.encoding import (
    HEADER_ROW,
    AttentionMask,
    BiasClass,
    BiasRelationMap,
    Block,
    EncodedInput,
    TokenRole,
)
from src.domain.models import STRUCTURAL_MASKS, FactorConfigError, MaskScheme, TokenScheme


@dataclass(frozen=True)
class MaskRules:
    same_column: bool
    same_row: bool
    structural: bool


RULES = {
    MaskScheme.M1: MaskRules(same_column=True, same_row=True, structural=False),
    MaskScheme.M2: MaskRules(same_column=True, same_row=False, structural=False),
    MaskScheme.M3: MaskRules(same_column=False, same_row=True, structural=False),
    MaskScheme.M4: MaskRules(same_column=True, same_row=False, structural=True),
    MaskScheme.M5: MaskRules(same_column=False, same_row=True, structural=True),
    MaskScheme.M6: MaskRules(same_column=False, same_row=False, structural=True),
}


def _check_scheme(enc: EncodedInput, scheme: MaskScheme) -> None:
    if scheme in STRUCTURAL_MASKS and enc.tokens is not TokenScheme.T2:
        raise FactorConfigError(enc.tokens, scheme)


def _question_targets(enc: EncodedInput, question_content_only: bool) -> np.ndarray:
    if question_content_only:
        return enc.content
    return enc.table_side


def _groups(keys: np.ndarray, members: np.ndarray) -> list[tuple[int, np.ndarray]]:
    """Indices of ``members`` grouped by key value."""
    idx = np.flatnonzero(members)
    if idx.size == 0:
        return []
    order = np.argsort(keys[idx], kind="stable")
    idx = idx[order]
    values, starts = np.unique(keys[idx], return_index=True)
    return list(zip(values.tolist(), np.split(idx, starts[1:])))


def build_mask(enc: EncodedInput, scheme: MaskScheme, question_content_only: bool = False) -> AttentionMask:
    """Assemble the allowed set group by group (question band, rows, columns, structural relays)."""
    _check_scheme(enc, scheme)
    length = len(enc)
    if scheme is MaskScheme.M0:
        dense = np.ones((length, length), dtype=bool)
        return _finish(dense, scheme)

    dense = np.zeros((length, length), dtype=bool)
    np.fill_diagonal(dense, True)

    question = np.flatnonzero(enc.question_like)
    targets = np.flatnonzero(_question_targets(enc, question_content_only))
    dense[np.ix_(question, question)] = True
    dense[np.ix_(question, targets)] = True
    dense[np.ix_(targets, question)] = True

    rules = RULES[scheme]
    content = enc.content
    rows = _groups(enc.row_idx, content)
    cols = _groups(enc.col_idx, content)
    if rules.same_column:
        for _, members in cols:
            dense[np.ix_(members, members)] = True
    if rules.same_row:
        for _, members in rows:
            dense[np.ix_(members, members)] = True
    if rules.structural:
        by_row = dict(rows)
        by_col = dict(cols)
        cell_key = enc.row_idx.astype(np.int64) * 4096 + enc.col_idx
        by_cell = dict(_groups(cell_key, content))
        empty = np.empty(0, dtype=np.int64)
        relays = (
            (TokenRole.ROW_TOK, lambda t: by_row.get(int(enc.row_idx[t]), empty)),
            (TokenRole.COL_TOK, lambda t: by_col.get(int(enc.col_idx[t]), empty)),
            (TokenRole.CELL_TOK, lambda t: by_cell.get(int(cell_key[t]), empty)),
            (TokenRole.TABLE_TOK, lambda t: np.flatnonzero(content)),
        )
        for role, cells_of in relays:
            for t in np.flatnonzero(enc.roles == role):
                cells = cells_of(t)
                dense[t, cells] = True
                dense[cells, t] = True
    return _finish(dense, scheme)


def pair_allowed(enc: EncodedInput, scheme: MaskScheme, i: int, j: int,
                 question_content_only: bool = False) -> bool:
    """Whether token i may attend token j, read off the rule table one pair at a time."""
    if i == j or scheme is MaskScheme.M0:
        return True
    question = enc.question_like
    if question[i] and question[j]:
        return True
    targets = _question_targets(enc, question_content_only)
    if (question[i] and targets[j]) or (targets[i] and question[j]):
        return True

    rules = RULES[scheme]
    role_i, role_j = TokenRole(int(enc.roles[i])), TokenRole(int(enc.roles[j]))
    same_row = enc.row_idx[i] == enc.row_idx[j]
    same_col = enc.col_idx[i] == enc.col_idx[j]
    if role_i is TokenRole.CELL_CONTENT and role_j is TokenRole.CELL_CONTENT:
        return bool((rules.same_column and same_col) or (rules.same_row and same_row))
    if not rules.structural:
        return False
    if role_i is TokenRole.CELL_CONTENT:
        role_i, role_j = role_j, role_i
    elif role_j is not TokenRole.CELL_CONTENT:
        return False
    match role_i:
        case TokenRole.ROW_TOK:
            return bool(same_row)
        case TokenRole.COL_TOK:
            return bool(same_col)
        case TokenRole.CELL_TOK:
            return bool(same_row and same_col)
        case TokenRole.TABLE_TOK:
            return True
    return False


def build_mask_bruteforce(enc: EncodedInput, scheme: MaskScheme,
                          question_content_only: bool = False) -> AttentionMask:
    """Evaluate pair_allowed on every one of the L x L pairs; the oracle for build_mask."""
    _check_scheme(enc, scheme)
    length = len(enc)
    dense = np.array([[pair_allowed(enc, scheme, i, j, question_content_only) for j in range(length)]
                      for i in range(length)], dtype=bool).reshape(length, length)
    return _finish(dense, scheme)


def _finish(dense: np.ndarray, scheme: MaskScheme | None) -> AttentionMask:
    dense.setflags(write=False)
    return AttentionMask(length=dense.shape[0], dense=dense, blocks=tile_dense(dense), scheme=scheme)


def sparsity(mask: AttentionMask) -> float:
    """Fraction of the L x L pairs that are masked."""
    total = mask.length * mask.length
    return (total - mask.allowed_count) / total


def tile_dense(dense: np.ndarray) -> tuple[Block, ...]:
    """Exact rectangle tiling of a boolean allow matrix, sorted by (q0, k0).

    A fully allowed prefix (the question band when it sees the whole sequence) becomes
    two rectangles; remaining rows are grouped into runs of identical rows and each
    run emits one rectangle per contiguous key interval.
    """
    length = dense.shape[0]
    if length == 0:
        return ()
    if dense.all():
        return (Block(0, length, 0, length),)

    full = dense.all(axis=1) & dense.all(axis=0)
    band = int(np.argmin(full)) if not full.all() else length
    blocks: list[Block] = []
    if band:
        blocks.append(Block(0, band, 0, length))
        blocks.append(Block(band, length, 0, band))

    sub = dense[band:, band:]
    n = length - band
    changes = np.flatnonzero(np.any(sub[1:] != sub[:-1], axis=1)) + 1
    starts = np.concatenate(([0], changes))
    ends = np.concatenate((changes, [n]))
    for s, e in zip(starts.tolist(), ends.tolist()):
        edges = np.diff(np.concatenate(([0], sub[s].view(np.int8), [0])))
        for k0, k1 in zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()):
            blocks.append(Block(s + band, e + band, k0 + band, k1 + band))
    blocks.sort(key=lambda b: (b.q0, b.k0))
    return tuple(blocks)


def export_blocks(mask: AttentionMask) -> list[Block]:
    return list(mask.blocks)


def blocks_to_dense(blocks, length: int) -> np.ndarray:
    """Coverage count of a block list; an exact tiling yields only 0/1 entries."""
    cover = np.zeros((length, length), dtype=np.int32)
    for b in blocks:
        cover[b.q0:b.q1, b.k0:b.k1] += 1
    return cover


def format_blocks(mask: AttentionMask) -> str:
    """Text block file: header line then one ``q0 q1 k0 k1`` line per rectangle."""
    scheme = mask.scheme.value if mask.scheme else "-"
    lines = [f"L={mask.length} scheme={scheme} sparsity={sparsity(mask):.6f}"]
    lines += [f"{b.q0} {b.q1} {b.k0} {b.k1}" for b in mask.blocks]
    return "\n".join(lines) + "\n"


def build_bias_map(enc: EncodedInput) -> BiasRelationMap:
    """Classify every ordered pair (i attends j) into one of 13 relation classes.

    Conditions are tried in priority order and the first match wins.
    """
    length = len(enc)
    role, row, col = enc.roles, enc.row_idx, enc.col_idx
    table = enc.table_side
    q = enc.question_like
    header = enc.header
    data = table & ~header
    cellish = (role == TokenRole.CELL_CONTENT) | (role == TokenRole.CELL_TOK)
    in_row = table & ((row != HEADER_ROW) | (col > 0))

    same_row = row[:, None] == row[None, :]
    same_col = (col[:, None] == col[None, :]) & (col[:, None] > 0)

    def pair(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a[:, None] & b[None, :]

    conditions = [
        (np.eye(length, dtype=bool), BiasClass.SELF),
        (pair(q, q), BiasClass.QUESTION_QUESTION),
        (pair(q, data), BiasClass.QUESTION_CELL),
        (pair(data, q), BiasClass.CELL_QUESTION),
        (pair(q, header), BiasClass.QUESTION_HEADER),
        (pair(header, q), BiasClass.HEADER_QUESTION),
        (pair(cellish & (row > 0), cellish) & same_row & same_col, BiasClass.SAME_CELL),
        (pair(header, header) & same_col, BiasClass.HEADER_SAME_COLUMN),
        (pair(data, header) & same_col, BiasClass.CELL_TO_HEADER),
        (pair(header, data) & same_col, BiasClass.HEADER_TO_CELL),
        (pair(in_row, in_row) & same_row, BiasClass.SAME_ROW),
        (pair(table, table) & same_col, BiasClass.SAME_COLUMN),
    ]
    rel = np.select([c for c, _ in conditions], [int(k) for _, k in conditions], default=int(BiasClass.OTHER))
    rel = rel.astype(np.int8)
    rel.setflags(write=False)
    return BiasRelationMap(length=length, rel=rel)
