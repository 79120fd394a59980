import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from src.domain.models import DomainError, GenerationError, QAExample, Seed, Table

from .rng import derive_rng
from .sqlexec import run_query
from .templates import COMPOSITIONAL_TEMPLATES, TEMPLATES, TRAINING_TEMPLATES, draw_query
from .vocabulary import MAX_COLUMNS

logger = logging.getLogger(__name__)

TRAIN_DIMS = (6, 7, 8)
STRUCTURE_DIMS = (4, 5, 9, 10, 11, 12)
CONSISTENCY_RATES = (0.2, 0.4)
UNIVERSE_SIZE = 1000
MIXABILITY_ALPHABET = 20
MIXED = "mixed"


class Disturbance(Enum):
    NONE = "none"
    STRUCTURE = "structure"
    CONSISTENCY = "consistency"
    COMPOSITIONAL = "compositional"
    MIXABILITY = "mixability"


SUITES = {
    "train": Disturbance.NONE,
    "structure": Disturbance.STRUCTURE,
    "consistency": Disturbance.CONSISTENCY,
    "compositional": Disturbance.COMPOSITIONAL,
    "mixability": Disturbance.MIXABILITY,
}


@dataclass(frozen=True)
class GenSpec:
    """Everything that determines a generated dataset.

    A ``consistency_rate`` of ``"mixed"`` draws R per table from {0.2, 0.4}.
    """
    rows: tuple[int, ...] = TRAIN_DIMS
    cols: tuple[int, ...] = TRAIN_DIMS
    n_examples: int = 1000
    templates: tuple[str, ...] = TRAINING_TEMPLATES
    disturbance: Disturbance = Disturbance.NONE
    consistency_rate: float | str = 0.2
    mixability: float = 1.0
    seed: Seed = field(default_factory=lambda: Seed(0))
    adversarial: bool = False
    drop_empty: bool = False
    value_range: tuple[int, int] = (0, UNIVERSE_SIZE - 1)
    alphabet_size: int = MIXABILITY_ALPHABET

    def __post_init__(self):
        if not self.rows or not self.cols or min(self.rows + self.cols) < 1:
            raise GenerationError("row and column ranges must be non-empty and positive")
        if max(self.cols) > MAX_COLUMNS:
            raise GenerationError(f"at most {MAX_COLUMNS} columns have vocabulary names")
        unknown = [t for t in self.templates if t not in TEMPLATES]
        if unknown or not self.templates:
            raise GenerationError(f"unknown or empty template selection: {unknown}")
        if self.disturbance is Disturbance.CONSISTENCY and self.consistency_rate not in (*CONSISTENCY_RATES, MIXED):
            raise GenerationError(f"consistency rate must be one of {CONSISTENCY_RATES} or mixed")
        if not 0.0 <= self.mixability <= 1.0:
            raise GenerationError("mixability S must lie in [0, 1]")
        if self.n_examples < 0:
            raise GenerationError("n_examples must be non-negative")
        low, high = self.value_range
        if not 0 <= low <= high:
            raise GenerationError("invalid value range")
        if self.alphabet_size < 1 or self.alphabet_size > high - low + 1:
            raise GenerationError("mixability alphabet must fit in the value range")

    @classmethod
    def for_suite(cls, suite: str, n_examples: int, seed: Seed, **overrides) -> "GenSpec":
        if suite not in SUITES:
            raise GenerationError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
        disturbance = SUITES[suite]
        base: dict = {"n_examples": n_examples, "seed": seed, "disturbance": disturbance}
        if disturbance is Disturbance.STRUCTURE:
            base.update(rows=STRUCTURE_DIMS, cols=STRUCTURE_DIMS)
        if disturbance is Disturbance.COMPOSITIONAL:
            base.update(templates=COMPOSITIONAL_TEMPLATES)
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Row-stochastic matrix over the reduced mixability alphabet."""
    matrix: np.ndarray

    def __post_init__(self):
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise GenerationError("transition matrix must be square")
        if np.any(m < 0) or not np.allclose(m.sum(axis=1), 1.0, atol=1e-9):
            raise GenerationError("transition matrix rows must be probability vectors")

    @classmethod
    def deterministic(cls, seed: Seed, size: int) -> "TransitionMatrix":
        successor = derive_rng(seed, "mixability-deterministic", 0).permutation(size)
        m = np.zeros((size, size))
        m[np.arange(size), successor] = 1.0
        return cls(m)

    @classmethod
    def uniform(cls, size: int) -> "TransitionMatrix":
        return cls(np.full((size, size), 1.0 / size))

    @classmethod
    def mixed(cls, seed: Seed, size: int, s: float) -> "TransitionMatrix":
        """S * deterministic + (1 - S) * uniform."""
        return cls(s * cls.deterministic(seed, size).matrix + (1.0 - s) * cls.uniform(size).matrix)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def successor(self, state: int) -> int:
        """Most likely next state (the deterministic successor when S > 0)."""
        return int(np.argmax(self.matrix[state]))


def mixability_alphabet(spec: GenSpec) -> tuple[str, ...]:
    low, high = spec.value_range
    picks = derive_rng(spec.seed, "mixability-alphabet", 0).choice(high - low + 1, spec.alphabet_size, replace=False)
    return tuple(str(low + int(v)) for v in sorted(picks))


def _dims(spec: GenSpec, rng: np.random.Generator) -> tuple[int, int]:
    n_rows = spec.rows[int(rng.integers(len(spec.rows)))]
    n_cols = spec.cols[int(rng.integers(len(spec.cols)))]
    return n_rows, n_cols


def _headers(n_cols: int) -> list[str]:
    return [f"c{c}" for c in range(1, n_cols + 1)]


def gen_table(spec: GenSpec, rng: np.random.Generator) -> Table:
    """R and C uniform over the GenSpec ranges, every cell an independent uniform integer."""
    n_rows, n_cols = _dims(spec, rng)
    low, high = spec.value_range
    values = rng.integers(low, high + 1, size=(n_rows, n_cols))
    return Table.from_lists(_headers(n_cols), [[str(int(v)) for v in row] for row in values])


def gen_mixable_table(spec: GenSpec, s: float, rng: np.random.Generator,
                      first_column: list[int] | None = None,
                      transitions: TransitionMatrix | None = None) -> Table:
    """Rows as Markov chains over the reduced alphabet: first cell uniform, then M^transi steps.

    ``first_column`` pins the starting states (alphabet indices), one per row.
    """
    if not 0.0 <= s <= 1.0:
        raise GenerationError("mixability S must lie in [0, 1]")
    alphabet = mixability_alphabet(spec)
    transitions = transitions or TransitionMatrix.mixed(spec.seed, spec.alphabet_size, s)
    n_rows, n_cols = _dims(spec, rng)
    if first_column is None:
        first_column = [int(v) for v in rng.integers(len(alphabet), size=n_rows)]
    n_rows = len(first_column)
    cumulative = np.cumsum(transitions.matrix, axis=1)
    rows = []
    for start in first_column:
        states = [start]
        for _ in range(n_cols - 1):
            draw = rng.random()
            nxt = int(np.searchsorted(cumulative[states[-1]], draw, side="right"))
            states.append(min(nxt, len(alphabet) - 1))
        rows.append([alphabet[i] for i in states])
    return Table.from_lists(_headers(n_cols), rows)


def perturb_consistency(table: Table, rate: float, rng: np.random.Generator, v0: str | None = None) -> Table:
    """Replace each data cell by v0 with probability ``rate``; headers stay untouched."""
    if not 0.0 <= rate <= 1.0:
        raise GenerationError("replacement probability must lie in [0, 1]")
    if v0 is None:
        v0 = str(int(rng.integers(UNIVERSE_SIZE)))
    hits = rng.random((table.n_rows, table.n_cols)) < rate
    rows = [[v0 if hits[r, c] else cell for c, cell in enumerate(row)] for r, row in enumerate(table.rows)]
    return Table.from_lists(table.headers, rows)


def dataset_v0(spec: GenSpec) -> str:
    """The single replacement value of a consistency dataset."""
    low, high = spec.value_range
    return str(int(derive_rng(spec.seed, "consistency-v0", 0).integers(low, high + 1)))


@dataclass
class GenStats:
    emitted: int = 0
    skipped: int = 0
    empty: int = 0
    templates: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class _Draw:
    example: QAExample | None
    template_id: str | None
    error: str | None = None


def _table_for(spec: GenSpec, index: int, rng: np.random.Generator) -> Table:
    if spec.disturbance is Disturbance.MIXABILITY:
        return gen_mixable_table(spec, spec.mixability, rng)
    table = gen_table(spec, rng)
    if spec.disturbance is Disturbance.CONSISTENCY:
        perturb_rng = derive_rng(spec.seed, "consistency", index)
        rate = spec.consistency_rate
        if rate == MIXED:
            rate = CONSISTENCY_RATES[int(perturb_rng.integers(len(CONSISTENCY_RATES)))]
        table = perturb_consistency(table, rate, perturb_rng, dataset_v0(spec))
    return table


def gen_example(spec: GenSpec, index: int) -> _Draw:
    """Example ``index`` of the dataset: table, query, and the oracle's answer."""
    table = _table_for(spec, index, derive_rng(spec.seed, "table", index))
    query_rng = derive_rng(spec.seed, "query", index)
    template_id = spec.templates[int(query_rng.integers(len(spec.templates)))]
    try:
        instance = draw_query(template_id, table, query_rng, spec.templates, spec.adversarial)
        answer = run_query(instance.query, table)
    except DomainError as exc:
        return _Draw(None, None, f"{type(exc).__name__}: {exc}")
    return _Draw(QAExample(table, instance.query, answer.values), instance.template_id)


def _gen_chunk(args: tuple[GenSpec, int, int]) -> list[_Draw]:
    spec, start, stop = args
    return [gen_example(spec, i) for i in range(start, stop)]


def _draws(spec: GenSpec, workers: int, chunk: int = 256) -> Iterator[_Draw]:
    """Example draws in index order, generated in parallel chunks when workers > 1."""
    start = 0
    if workers <= 1:
        while True:
            yield gen_example(spec, start)
            start += 1
    with ProcessPoolExecutor(max_workers=workers) as pool:
        while True:
            jobs = [(spec, s, s + chunk) for s in range(start, start + workers * chunk, chunk)]
            for draws in pool.map(_gen_chunk, jobs):
                yield from draws
            start += workers * chunk


def gen_dataset(spec: GenSpec, stats: GenStats | None = None, workers: int = 1) -> Iterator[QAExample]:
    """Stream ``spec.n_examples`` examples, deterministic for a fixed seed regardless of workers."""
    stats = stats if stats is not None else GenStats()
    if spec.n_examples == 0:
        return
    budget = 20 * spec.n_examples + 100
    for index, draw in enumerate(_draws(spec, workers)):
        if index >= budget:
            raise GenerationError(f"only {stats.emitted} of {spec.n_examples} examples after {budget} draws")
        if draw.example is None:
            stats.skipped += 1
            logger.error("oracle failed, example skipped", extra={"index": index, "reason": draw.error})
            continue
        if not draw.example.answer:
            stats.empty += 1
            if spec.drop_empty:
                continue
        stats.emitted += 1
        stats.templates[draw.template_id] = stats.templates.get(draw.template_id, 0) + 1
        yield draw.example
        if stats.emitted >= spec.n_examples:
            return
