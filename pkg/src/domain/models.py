from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Sequence


class TokenScheme(Enum):
    """Special-token layouts for the table side of the sequence."""
    T0 = "T0"
    T1 = "T1"
    T2 = "T2"


class MaskScheme(Enum):
    """Structural sparse attention masks, from none (M0) to the sparsest (M6)."""
    M0 = "M0"
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"
    M4 = "M4"
    M5 = "M5"
    M6 = "M6"


class PositionScheme(Enum):
    TPE = "TPE"
    CPE = "CPE"


class BiasScheme(Enum):
    B0 = "B0"
    B1 = "B1"


class EmbeddingScheme(Enum):
    E0 = "E0"
    E1 = "E1"


# Masks that relay attention through [TAB]/[COL]/[ROW]/[CELL] tokens.
STRUCTURAL_MASKS = frozenset({MaskScheme.M4, MaskScheme.M5, MaskScheme.M6})


@dataclass(frozen=True)
class Table:
    """Rectangular grid of non-empty string cells under a header row."""
    headers: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if len(self.headers) < 1:
            raise TableShapeError("a table needs at least one column")
        if len(self.rows) < 1:
            raise TableShapeError("a table needs at least one data row")
        width = len(self.headers)
        for r, row in enumerate(self.rows):
            if len(row) != width:
                raise TableShapeError(f"row {r + 1} has {len(row)} cells, expected {width}")
        for cell in (*self.headers, *(c for row in self.rows for c in row)):
            if not isinstance(cell, str) or cell == "":
                raise TableShapeError(f"cells must be non-empty strings, got {cell!r}")

    @classmethod
    def from_lists(cls, headers: Sequence[str], rows: Iterable[Sequence[str]]) -> "Table":
        return cls(tuple(headers), tuple(tuple(row) for row in rows))

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_cols(self) -> int:
        return len(self.headers)

    def column_index(self, name: str) -> int:
        """0-based position of a header; raises KeyError when absent."""
        try:
            return self.headers.index(name)
        except ValueError:
            raise KeyError(name) from None

    def column_values(self, col: int) -> tuple[str, ...]:
        return tuple(row[col] for row in self.rows)

    def to_dict(self) -> dict[str, Any]:
        return {"header": list(self.headers), "rows": [list(row) for row in self.rows]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Table":
        return cls.from_lists(data["header"], data["rows"])


@dataclass(frozen=True)
class QAExample:
    """One (table, SQL query, gold answer) triplet, i.e. one JSONL line."""
    table: Table
    query: str
    answer: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        # Key order is part of the file format.
        return {"table": self.table.to_dict(), "query": self.query, "answer": list(self.answer)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "QAExample":
        return cls(Table.from_dict(data["table"]), data["query"], tuple(data.get("answer", ())))


@dataclass(frozen=True)
class FactorConfig:
    """One point of the T x M x PE x B x E grid."""
    tokens: TokenScheme = TokenScheme.T0
    mask: MaskScheme = MaskScheme.M0
    pe: PositionScheme = PositionScheme.TPE
    bias: BiasScheme = BiasScheme.B0
    emb: EmbeddingScheme = EmbeddingScheme.E0

    def __post_init__(self):
        if not self.is_legal(self.tokens, self.mask):
            raise FactorConfigError(self.tokens, self.mask)

    @staticmethod
    def is_legal(tokens: TokenScheme, mask: MaskScheme) -> bool:
        return mask not in STRUCTURAL_MASKS or tokens is TokenScheme.T2

    @property
    def label(self) -> str:
        return "-".join(v.value for v in (self.tokens, self.mask, self.pe, self.bias, self.emb))

    def to_dict(self) -> dict[str, str]:
        return {
            "tokens": self.tokens.value,
            "mask": self.mask.value,
            "pe": self.pe.value,
            "bias": self.bias.value,
            "emb": self.emb.value,
        }

    @classmethod
    def from_dict(cls, data: dict[str, str]) -> "FactorConfig":
        try:
            return cls(
                tokens=TokenScheme(data.get("tokens", "T0")),
                mask=MaskScheme(data.get("mask", "M0")),
                pe=PositionScheme(data.get("pe", "TPE")),
                bias=BiasScheme(data.get("bias", "B0")),
                emb=EmbeddingScheme(data.get("emb", "E0")),
            )
        except ValueError as exc:
            raise FactorConfigError(message=str(exc)) from None

    @classmethod
    def from_label(cls, label: str) -> "FactorConfig":
        parts = label.split("-")
        if len(parts) != 5:
            raise FactorConfigError(message=f"malformed factor label {label!r}")
        return cls.from_dict(dict(zip(("tokens", "mask", "pe", "bias", "emb"), parts)))


@dataclass(frozen=True)
class Seed:
    """Master seed of every derived random stream."""
    master: int

    def __post_init__(self):
        if not 0 <= self.master < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.master}")


@dataclass(frozen=True)
class Denotation:
    """Values a query returns, in table row order; compared as a multiset."""
    values: tuple[str, ...] = ()

    def matches(self, other: "Denotation", set_semantics: bool = False) -> bool:
        if set_semantics:
            return set(self.values) == set(other.values)
        return Counter(self.values) == Counter(other.values)


@dataclass(frozen=True)
class ResultRow:
    """One measurement of the factor grid: a config evaluated on a suite for a replicate."""
    factor: FactorConfig
    suite: str
    replicate: str
    da: float

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.factor.label, self.suite, self.replicate)

    def level(self, name: str) -> str:
        """Level of a factor column (T, M, PE, B, E) or of the suite/replicate columns."""
        columns = {
            "T": self.factor.tokens.value,
            "M": self.factor.mask.value,
            "PE": self.factor.pe.value,
            "B": self.factor.bias.value,
            "E": self.factor.emb.value,
            "suite": self.suite,
            "replicate": self.replicate,
        }
        if name not in columns:
            raise KeyError(name)
        return columns[name]


FACTOR_COLUMNS = ("T", "M", "PE", "B", "E")


#  Domain Exceptions

class DomainError(Exception):
    """Base class for every error raised by the tabenc domain."""
    pass


class TableShapeError(DomainError):
    """Raised when a table is ragged, empty, or has empty cells."""
    pass


class FactorConfigError(DomainError):
    """Raised for an illegal (T, M) pair or an unknown factor level."""
    def __init__(self, tokens: TokenScheme | None = None, mask: MaskScheme | None = None,
                 message: str | None = None):
        self.tokens = tokens
        self.mask = mask
        if message is None:
            message = (f"illegal factor pair ({tokens.value}, {mask.value}): "
                       f"{mask.value} requires T2 structural tokens")
        super().__init__(message)


class PositionRangeError(FactorConfigError):
    """Raised when an index channel exceeds the embedding tables of a model."""
    def __init__(self, message: str):
        super().__init__(message=message)


class SequenceTooLongError(DomainError):
    """Raised instead of silently cropping an encoded input."""
    def __init__(self, required_length: int, limit: int):
        self.required_length = required_length
        self.limit = limit
        super().__init__(f"encoded input needs {required_length} tokens, context limit is {limit}")


class InputError(DomainError):
    """Raised for malformed numeric inputs (NaN, shape mismatch, length mismatch)."""
    pass


class ContractViolation(DomainError):
    """Raised when an internal invariant (block tiling, non-empty softmax rows) breaks."""
    pass


class SqlSyntaxError(DomainError):
    """Raised when a query falls outside the template grammar."""
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at offset {offset}")


class SqlExecutionError(DomainError):
    """Raised when a query references a column the table does not have."""
    pass


class GenerationError(DomainError):
    """Raised when a dataset specification cannot be satisfied."""
    pass


class DegenerateDataError(DomainError):
    """Raised when an ANOVA response has zero total variance."""
    pass


class UnbalancedDesignError(DomainError):
    """Raised when a factor grid is unbalanced and the caller did not allow it."""
    pass


class TrainingDivergedError(DomainError):
    """Raised when the training loss stops being finite."""
    def __init__(self, step: int, last_finite_loss: float | None):
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(f"loss became NaN/Inf at step {step} (last finite loss: {last_finite_loss})")


class CheckpointFormatError(DomainError):
    """Raised when a checkpoint file has the wrong magic or version."""
    pass


class ResultsStoreError(DomainError):
    """Raised when the results ledger rejects a write."""
    pass
