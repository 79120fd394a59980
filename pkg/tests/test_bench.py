from types import SimpleNamespace

import pytest

from src.domain.models import MaskScheme, PositionScheme, Seed, TokenScheme
from src.use_cases import bench
from src.use_cases.bench import BENCH_QUESTION, CSV_HEADER, bench_attention, bench_table
from src.use_cases.linearize import encode


@pytest.mark.parametrize("target", [512, 2048])
def test_bench_table_hits_target_length(target):
    table = bench_table(target, TokenScheme.T0, Seed(0))
    length = len(encode(BENCH_QUESTION, table, TokenScheme.T0, PositionScheme.TPE, max_length=4 * target))
    assert abs(length - target) < 0.1 * target


def test_rows_per_length():
    rows = bench_attention([256], MaskScheme.M3, trials=1)
    assert [r.direction for r in rows] == ["fwd", "bwd"]
    assert all(r.dense_ms > 0 and r.sparse_ms > 0 for r in rows)
    assert len(rows[0].as_csv_row()) == len(CSV_HEADER)
    assert [r.direction for r in bench_attention([256], MaskScheme.M3, trials=1, backward=False)] == ["fwd"]


def test_coarse_clock_stops_at_repeat_cap(monkeypatch):
    monkeypatch.setattr(bench.time, "get_clock_info", lambda name: SimpleNamespace(resolution=10.0))
    monkeypatch.setattr(bench, "MAX_REPEAT", 8)
    calls = []
    ms = bench._median_ms(lambda: calls.append(1), trials=3)
    assert len(calls) == 3 * (1 + 2 + 4 + 8)
    assert ms >= 0


@pytest.mark.slow
def test_block_sparse_speedup_grows_with_length():
    rows = bench_attention([1024, 4096, 8192], MaskScheme.M3, trials=3, backward=False)
    speedups = [r.speedup for r in rows]
    assert speedups == sorted(speedups)
    assert speedups[-1] > 3.0
