"""Fixed-effects ANOVA over factor-grid results.

Sums of squares come from cell means (balanced design):

    SS_A     = sum over levels a of n_a (mean_a - grand)^2
    SS_AxB   = sum over cells ab of n_ab (mean_ab - mean_a - mean_b + grand)^2
    SS_resid = SS_total - sum of requested terms

so factors or interactions left out of the term list fall into the residual.
Effect sizes are plain eta squared (SS_term / SS_total), not partial eta squared.
"""
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from src.domain.models import (
    FACTOR_COLUMNS,
    DegenerateDataError,
    InputError,
    ResultRow,
    UnbalancedDesignError,
)

logger = logging.getLogger(__name__)

DEFAULT_TERMS = ("T", "M", "PE", "B", "E")
_CF_MAX_ITER = 10_000
_CF_EPS = 1e-15
_CF_TINY = 1e-300


class ResultsTable:
    """Rows of (factor config, suite, replicate, DA) with per-column level access."""

    def __init__(self, rows: Iterable[ResultRow]):
        self.rows: list[ResultRow] = list(rows)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def suites(self) -> list[str]:
        return sorted({r.suite for r in self.rows})

    def for_suite(self, suite: str) -> "ResultsTable":
        return ResultsTable(r for r in self.rows if r.suite == suite)

    def levels(self, column: str) -> list[str]:
        return sorted({r.level(column) for r in self.rows})

    def response(self) -> np.ndarray:
        return np.array([r.da for r in self.rows], dtype=np.float64)


@dataclass(frozen=True)
class TermRow:
    term: str
    ss: float
    df: int
    f: float
    p: float
    eta2: float

    @property
    def significant(self) -> bool:
        return self.p <= 0.05


@dataclass(frozen=True)
class AnovaReport:
    terms: tuple[TermRow, ...]
    residual_ss: float
    residual_df: int
    total_ss: float
    n: int
    balanced: bool

    def term(self, name: str) -> TermRow:
        for row in self.terms:
            if row.term == name:
                return row
        raise KeyError(name)

    def as_csv_rows(self) -> list[list[str]]:
        return [[t.term, f"{t.eta2:.6f}", f"{t.p:.6g}"] for t in self.terms]


CSV_HEADER = ["term", "eta2", "p"]


def parse_terms(text: str) -> tuple[str, ...]:
    """"T,M,M*PE" -> ("T", "M", "M*PE"), with each factor checked against the grid columns."""
    terms = tuple(t.strip() for t in text.split(",") if t.strip())
    if not terms:
        raise InputError("no ANOVA terms given")
    for term in terms:
        factors = term.split("*")
        if len(factors) > 2 or len(set(factors)) != len(factors):
            raise InputError(f"term {term!r}: only main effects and two-way interactions are supported")
        for f in factors:
            if f not in FACTOR_COLUMNS:
                raise InputError(f"term {term!r}: unknown factor {f!r}; choose from {', '.join(FACTOR_COLUMNS)}")
    return terms


def _regularized_beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction of I_x(a, b) by the modified Lentz method."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        for aa in (m * (b - m) * x / ((qam + m2) * (a + m2)),
                   -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))):
            d = 1.0 + aa * d
            d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
            c = 1.0 + aa / c
            c = c if abs(c) > _CF_TINY else _CF_TINY
            delta = d * c
            h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    logger.warning("incomplete beta continued fraction did not converge", extra={"a": a, "b": b, "x": x})
    return h


def regularized_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise InputError(f"incomplete beta argument {x} outside [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _regularized_beta_cf(a, b, x) / a
    return 1.0 - front * _regularized_beta_cf(b, a, 1.0 - x) / b


def f_upper_tail(f: float, df1: float, df2: float) -> float:
    """P(F(df1, df2) > f)."""
    if df1 < 1 or df2 < 1:
        raise InputError(f"F distribution needs df >= 1, got ({df1}, {df2})")
    if math.isnan(f) or f < 0:
        raise InputError(f"F statistic must be non-negative, got {f}")
    if f == 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    p = regularized_beta(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))
    return min(1.0, max(0.0, p))


def _factors_of(terms: Sequence[str]) -> list[str]:
    seen: list[str] = []
    for term in terms:
        for f in term.split("*"):
            if f not in seen:
                seen.append(f)
    return seen


def check_balance(results: ResultsTable, factors: Sequence[str]) -> bool:
    """Every combination of observed levels present, each with the same replicate count."""
    counts = Counter(tuple(r.level(f) for f in factors) for r in results)
    levels = [results.levels(f) for f in factors]
    expected = math.prod(len(lv) for lv in levels)
    return len(counts) == expected and len(set(counts.values())) == 1


def _group_means(keys: list[tuple], y: np.ndarray) -> tuple[dict, dict]:
    sums: dict = defaultdict(float)
    counts: dict = defaultdict(int)
    for key, value in zip(keys, y):
        sums[key] += value
        counts[key] += 1
    return {k: sums[k] / counts[k] for k in sums}, counts


def anova(results: ResultsTable, terms: Sequence[str] = DEFAULT_TERMS, allow_unbalanced: bool = False) -> AnovaReport:
    """Decompose the DA variance into the requested main effects and two-way interactions."""
    terms = tuple(terms)
    factors = _factors_of(terms)
    # Canonical order keeps float sums independent of input row order.
    results = ResultsTable(sorted(results, key=lambda r: (r.key, r.da)))
    for f in factors:
        if f not in FACTOR_COLUMNS:
            raise InputError(f"unknown factor {f!r}")
        if len(results.levels(f)) < 2:
            raise InputError(f"factor {f} needs at least 2 levels, found {results.levels(f)}")
    y = results.response()
    if not np.all(np.isfinite(y)):
        raise InputError("responses must be finite")

    grand = float(y.mean())
    total_ss = float(((y - grand) ** 2).sum())
    if total_ss <= 1e-12 * max(1.0, float((y ** 2).sum())):
        raise DegenerateDataError("response has zero total variance")

    balanced = check_balance(results, factors)
    if not balanced:
        if not allow_unbalanced:
            raise UnbalancedDesignError(f"grid over {', '.join(factors)} is unbalanced; "
                                        "pass allow_unbalanced to proceed")
        logger.warning("ANOVA on an unbalanced grid; sums of squares are sequential approximations",
                       extra={"factors": factors, "n": len(y)})

    level_keys = {f: [(r.level(f),) for r in results] for f in factors}
    main_means = {f: _group_means(level_keys[f], y)[0] for f in factors}

    computed: list[tuple[str, float, int]] = []
    for term in terms:
        parts = term.split("*")
        if len(parts) == 1:
            f = parts[0]
            means, counts = _group_means(level_keys[f], y)
            ss = sum(counts[k] * (means[k] - grand) ** 2 for k in means)
            df = len(means) - 1
        else:
            a, b = parts
            keys = [(r.level(a), r.level(b)) for r in results]
            means, counts = _group_means(keys, y)
            ss = sum(counts[k] * (means[k] - main_means[a][(k[0],)] - main_means[b][(k[1],)] + grand) ** 2
                     for k in means)
            df = (len(main_means[a]) - 1) * (len(main_means[b]) - 1)
        computed.append((term, float(ss), df))

    residual_ss = max(0.0, total_ss - sum(ss for _, ss, _ in computed))
    residual_df = len(y) - 1 - sum(df for _, _, df in computed)
    rows = []
    for term, ss, df in computed:
        if residual_df > 0 and residual_ss > 0:
            f_stat = (ss / df) / (residual_ss / residual_df)
            p = f_upper_tail(f_stat, df, residual_df)
        elif residual_df > 0:
            f_stat, p = (math.inf, 0.0) if ss > 0 else (0.0, 1.0)
        else:
            f_stat, p = math.nan, math.nan
        rows.append(TermRow(term, ss, df, f_stat, p, min(1.0, ss / total_ss)))
    return AnovaReport(tuple(rows), residual_ss, residual_df, total_ss, len(y), balanced)


def planted_share(coefficient: float, noise_sd: float, p_level: float = 0.5) -> float:
    """Analytic eta squared of y = c * I(level) + N(0, sd^2) when the level indicator has probability p."""
    between = coefficient ** 2 * p_level * (1.0 - p_level)
    return between / (between + noise_sd ** 2)

