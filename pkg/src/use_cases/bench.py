import logging
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from src.domain.models import STRUCTURAL_MASKS, MaskScheme, PositionScheme, Seed, Table, TokenScheme

from .attention import (
    AttentionInput,
    attn_backward_block_sparse,
    attn_backward_dense,
    attn_block_sparse,
    attn_dense,
    plan_tiles,
)
from .linearize import encode
from .masks import build_mask
from .rng import derive_rng
from .vocabulary import MAX_COLUMNS

logger = logging.getLogger(__name__)

BENCH_QUESTION = "select c1 where c2 = 5"
DEFAULT_LENGTHS = (1024, 2048, 4096, 8192, 16384)
# A sample shorter than this many timer ticks times more calls, up to MAX_REPEAT.
MIN_TICKS = 100
MAX_REPEAT = 1024


@dataclass(frozen=True)
class BenchRow:
    length: int
    scheme: str
    direction: str
    dense_ms: float
    sparse_ms: float

    @property
    def speedup(self) -> float:
        return self.dense_ms / self.sparse_ms if self.sparse_ms > 0 else float("inf")

    def as_csv_row(self) -> list:
        return [self.length, self.scheme, self.direction, f"{self.dense_ms:.3f}", f"{self.sparse_ms:.3f}",
                f"{self.speedup:.3f}"]


CSV_HEADER = ["length", "scheme", "dir", "dense_ms", "sparse_ms", "speedup"]


def bench_table(target_length: int, tokens: TokenScheme, seed: Seed) -> Table:
    """Widest table (16 columns of 3-digit values) whose encoding lands near target_length."""
    rng = derive_rng(seed, "bench-table", target_length)
    per_cell = 3 + 1
    per_row = MAX_COLUMNS * per_cell + (1 if tokens is not TokenScheme.T0 else 0)
    overhead = 16 + 2 * MAX_COLUMNS
    n_rows = max(1, round((target_length - overhead) / per_row))
    headers = [f"c{c}" for c in range(1, MAX_COLUMNS + 1)]
    values = rng.integers(100, 1000, size=(n_rows, MAX_COLUMNS))
    return Table.from_lists(headers, [[str(v) for v in row] for row in values])


def _median_ms(fn: Callable[[], object], trials: int) -> float:
    """Median per-call time; each sample times a batch of calls long enough for the clock."""
    resolution = time.get_clock_info("perf_counter").resolution
    repeat = 1
    while True:
        samples = []
        for _ in range(trials):
            start = time.perf_counter()
            for _ in range(repeat):
                fn()
            samples.append(time.perf_counter() - start)
        median = statistics.median(samples)
        if median >= MIN_TICKS * resolution or repeat >= MAX_REPEAT:
            return median / repeat * 1000.0
        repeat *= 2
        logger.info("timer resolution too coarse, doubling calls per sample", extra={"repeat": repeat})


def bench_attention(lengths: Iterable[int], scheme: MaskScheme, trials: int = 5, dim: int = 16,
                    seed: Seed = Seed(0), backward: bool = True) -> list[BenchRow]:
    """Median wall time of dense vs block-sparse attention per sequence length."""
    tokens = TokenScheme.T2 if scheme in STRUCTURAL_MASKS else TokenScheme.T0
    rows: list[BenchRow] = []
    for target in lengths:
        table = bench_table(target, tokens, seed)
        enc = encode(BENCH_QUESTION, table, tokens, PositionScheme.TPE, max_length=max(2 * target, 1024))
        mask = build_mask(enc, scheme)
        length = len(enc)
        rng = derive_rng(seed, "bench-qkv", target)
        q, k, v, d_out = (rng.standard_normal((length, dim)) for _ in range(4))
        inp = AttentionInput.build(q, k, v, mask)
        d_out = d_out.astype(np.float32)
        plan = plan_tiles(mask.blocks)
        logger.info("benchmarking attention", extra={"length": length, "scheme": scheme.value,
                                                      "block_area": plan.area})
        rows.append(BenchRow(length, scheme.value, "fwd",
                             _median_ms(lambda: attn_dense(inp), trials),
                             _median_ms(lambda: attn_block_sparse(inp, plan=plan), trials)))
        if backward:
            rows.append(BenchRow(length, scheme.value, "bwd",
                                 _median_ms(lambda: attn_backward_dense(inp, d_out), trials),
                                 _median_ms(lambda: attn_backward_block_sparse(inp, d_out, plan=plan), trials)))
    return rows
