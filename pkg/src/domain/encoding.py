from dataclasses import dataclass, replace
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from .models import MaskScheme, PositionScheme, TokenScheme

# Row index carried by header tokens and [COL] tokens; data rows are 1..R.
HEADER_ROW = 0


class TokenRole(IntEnum):
    QUESTION = 0
    TABLE_TOK = 1
    ROW_TOK = 2
    COL_TOK = 3
    CELL_TOK = 4
    CELL_CONTENT = 5
    BOUNDARY = 6


STRUCTURAL_ROLES = (TokenRole.TABLE_TOK, TokenRole.ROW_TOK, TokenRole.COL_TOK, TokenRole.CELL_TOK)


def _frozen(values, dtype=np.int32) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EncodedInput:
    """Token ids of a linearized (question, table) pair plus every per-token index channel.

    ``pos_idx`` stays ``None`` until ``assign_positions`` has run.
    """
    token_ids: np.ndarray
    symbols: tuple[str, ...]
    roles: np.ndarray
    row_idx: np.ndarray
    col_idx: np.ndarray
    cell_ord: np.ndarray
    segment: np.ndarray
    tokens: TokenScheme
    n_rows: int
    n_cols: int
    pos_idx: np.ndarray | None = None
    pe: PositionScheme | None = None
    unk_count: int = 0

    def __post_init__(self):
        for name in ("token_ids", "roles", "row_idx", "col_idx", "cell_ord", "segment", "pos_idx"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, np.ndarray):
                object.__setattr__(self, name, _frozen(value))
        lengths = {len(self.token_ids), len(self.symbols), len(self.roles), len(self.row_idx),
                   len(self.col_idx), len(self.cell_ord), len(self.segment)}
        if self.pos_idx is not None:
            lengths.add(len(self.pos_idx))
        if len(lengths) != 1:
            raise ValueError(f"index channels disagree on length: {sorted(lengths)}")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def question_like(self) -> np.ndarray:
        """Question tokens plus the boundary that closes the question."""
        roles = self.roles
        return (roles == TokenRole.QUESTION) | ((roles == TokenRole.BOUNDARY) & (self.segment == 0))

    @property
    def table_side(self) -> np.ndarray:
        return self.segment == 1

    @property
    def content(self) -> np.ndarray:
        return self.roles == TokenRole.CELL_CONTENT

    @property
    def header(self) -> np.ndarray:
        """Header content and [COL] tokens: header-row index with a real column."""
        return self.table_side & (self.row_idx == HEADER_ROW) & (self.col_idx > 0)

    @property
    def question_length(self) -> int:
        return int(np.count_nonzero(self.question_like))

    def with_positions(self, pos_idx, pe: PositionScheme) -> "EncodedInput":
        return replace(self, pos_idx=_frozen(pos_idx), pe=pe)


class Block(NamedTuple):
    """Half-open rectangle of allowed (query, key) pairs."""
    q0: int
    q1: int
    k0: int
    k1: int

    @property
    def area(self) -> int:
        return (self.q1 - self.q0) * (self.k1 - self.k0)


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Allow/deny relation over token pairs; ``dense[i, j]`` is True when i may attend j."""
    length: int
    dense: np.ndarray
    blocks: tuple[Block, ...]
    scheme: MaskScheme | None = None

    @property
    def allowed_count(self) -> int:
        return int(np.count_nonzero(self.dense))


class BiasClass(IntEnum):
    SELF = 0
    QUESTION_QUESTION = 1
    QUESTION_CELL = 2
    CELL_QUESTION = 3
    QUESTION_HEADER = 4
    HEADER_QUESTION = 5
    SAME_ROW = 6
    SAME_COLUMN = 7
    CELL_TO_HEADER = 8
    HEADER_TO_CELL = 9
    HEADER_SAME_COLUMN = 10
    SAME_CELL = 11
    OTHER = 12


N_BIAS_CLASSES = len(BiasClass)


@dataclass(frozen=True, eq=False)
class BiasRelationMap:
    """Relation class of every ordered token pair, one learnable scalar per class."""
    length: int
    rel: np.ndarray
