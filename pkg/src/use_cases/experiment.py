"""Factor-grid experiments: plan, resumable run, and the paired-difference/ANOVA report."""
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations, product
from pathlib import Path
from typing import Callable, Sequence

from src.domain.interfaces import ICheckpointRepository, IDatasetRepository, IResultsRepository
from src.domain.models import (
    FACTOR_COLUMNS,
    BiasScheme,
    DomainError,
    EmbeddingScheme,
    FactorConfig,
    InputError,
    MaskScheme,
    PositionScheme,
    QAExample,
    ResultRow,
    Seed,
    TokenScheme,
    TrainingDivergedError,
)

from .datagen import MIXED, GenSpec, gen_dataset
from .model import ModelConfig
from .stats import AnovaReport, ResultsTable, anova, check_balance
from .training import evaluate, train

logger = logging.getLogger(__name__)

FACTOR_ENUMS = {
    "T": TokenScheme,
    "M": MaskScheme,
    "PE": PositionScheme,
    "B": BiasScheme,
    "E": EmbeddingScheme,
}
PRESETS = ("smoke", "full")


def full_grid() -> tuple[tuple[FactorConfig, ...], int]:
    """Every legal T x M x PE x B x E point, plus the number of illegal points dropped."""
    kept, dropped = [], 0
    for t, m, pe, b, e in product(TokenScheme, MaskScheme, PositionScheme, BiasScheme, EmbeddingScheme):
        if FactorConfig.is_legal(t, m):
            kept.append(FactorConfig(t, m, pe, b, e))
        else:
            dropped += 1
    return tuple(kept), dropped


@dataclass(frozen=True)
class ExperimentPlan:
    configs: tuple[FactorConfig, ...]
    train_spec: GenSpec
    suites: dict[str, GenSpec]
    replicates: tuple[int, ...]
    model: ModelConfig
    out_dir: Path
    dropped: int = 0

    def __post_init__(self):
        if not self.configs:
            raise InputError("an experiment plan needs at least one configuration")
        if not self.suites or not self.replicates:
            raise InputError("an experiment plan needs at least one suite and one replicate")
        labels = [c.label for c in self.configs]
        if len(set(labels)) != len(labels):
            raise InputError("duplicate configurations in plan")

    @property
    def data_dir(self) -> Path:
        return self.out_dir / "data"

    def dataset_path(self, name: str) -> Path:
        return self.data_dir / f"{name}.jsonl"

    def checkpoint_dir(self, config: FactorConfig, replicate: int) -> Path:
        return self.out_dir / "checkpoints" / f"{config.label}-r{replicate}"

    @property
    def n_jobs(self) -> int:
        return len(self.configs) * len(self.replicates)


def _suite_specs(n_train: int, n_eval: int, seed: int, **dims) -> tuple[GenSpec, dict[str, GenSpec]]:
    train_spec = GenSpec.for_suite("train", n_train, Seed(seed), **dims)
    suites = {
        "test": GenSpec.for_suite("train", n_eval, Seed(seed + 1), **dims),
        "structure": GenSpec.for_suite("structure", n_eval, Seed(seed + 2)),
        "consistency": GenSpec.for_suite("consistency", n_eval, Seed(seed + 3), consistency_rate=MIXED, **dims),
        "compositional": GenSpec.for_suite("compositional", n_eval, Seed(seed + 4), **dims),
        "mixability": GenSpec.for_suite("mixability", n_eval, Seed(seed + 5), mixability=0.5, **dims),
    }
    return train_spec, suites


def preset_plan(name: str, out_dir: Path, seed: int = 0, n_train: int | None = None,
                n_eval: int | None = None, replicates: int | None = None) -> ExperimentPlan:
    """``smoke``: two configurations differing only in M on tiny data; ``full``: the whole legal grid."""
    if name == "smoke":
        configs = (FactorConfig(), FactorConfig(mask=MaskScheme.M1))
        dropped = 0
        train_spec, suites = _suite_specs(n_train or 64, n_eval or 16, seed, rows=(3,), cols=(3,))
        suites = {k: suites[k] for k in ("test", "compositional")}
        model = ModelConfig(d_model=32, n_heads=2, n_enc_layers=1, n_dec_layers=1, ffn_dim=64,
                            steps=40, eval_every=20, patience=2)
        reps = replicates or 2
    elif name == "full":
        configs, dropped = full_grid()
        train_spec, suites = _suite_specs(n_train or 5000, n_eval or 500, seed)
        model = ModelConfig(context_length=1024, max_positions=1024)
        reps = replicates or 2
    else:
        raise InputError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if dropped:
        logger.info("illegal grid points dropped", extra={"kept": len(configs), "dropped": dropped})
    return ExperimentPlan(configs, train_spec, suites, tuple(range(reps)), model, Path(out_dir), dropped)


@dataclass
class GridSummary:
    completed: int = 0
    skipped: int = 0
    failed: int = 0


def ensure_datasets(plan: ExperimentPlan, datasets: IDatasetRepository) -> None:
    """Generate any dataset of the plan that is not on disk yet."""
    for name, spec in [("train", plan.train_spec), *plan.suites.items()]:
        path = plan.dataset_path(name)
        if path.exists():
            continue
        count = datasets.write(gen_dataset(spec), path)
        logger.info("dataset generated", extra={"dataset": name, "examples": count, "path": str(path)})


@dataclass(frozen=True)
class _Job:
    plan: ExperimentPlan
    config: FactorConfig
    replicate: int
    datasets: IDatasetRepository
    checkpoints: ICheckpointRepository | None


def _run_job(job: _Job) -> list[tuple[ResultRow, str]]:
    plan, config = job.plan, job.config
    cfg = plan.model.with_factor(config)
    train_examples: list[QAExample] = list(job.datasets.read(plan.dataset_path("train")))
    rep = str(job.replicate)
    try:
        result = train(train_examples, cfg, Seed(job.replicate))
    except TrainingDivergedError as exc:
        logger.error("configuration diverged", extra={"config": config.label, "replicate": rep,
                                                      "step": exc.step})
        return [(ResultRow(config, suite, rep, float("nan")), "failed") for suite in plan.suites]
    if job.checkpoints is not None:
        target = plan.checkpoint_dir(config, job.replicate)
        job.checkpoints.save(target, cfg.to_dict(), result.model.state_arrays())
        job.checkpoints.save_metrics(target, [p.to_dict() for p in result.trace])
    rows = []
    for suite in plan.suites:
        examples = list(job.datasets.read(plan.dataset_path(suite)))
        da = evaluate(result.model, examples)
        rows.append((ResultRow(config, suite, rep, da), "ok"))
    return rows


def run_grid(plan: ExperimentPlan, results: IResultsRepository, datasets: IDatasetRepository,
             checkpoints: ICheckpointRepository | None = None, workers: int = 1,
             on_config_done: Callable[[FactorConfig], None] | None = None) -> GridSummary:
    """Train and evaluate every (config, replicate) whose rows are not recorded yet.

    A diverged run is recorded as failed rows instead of stopping the grid.
    """
    ensure_datasets(plan, datasets)
    summary = GridSummary()
    jobs = []
    for config in plan.configs:
        for replicate in plan.replicates:
            keys = [(config.label, suite, str(replicate)) for suite in plan.suites]
            if all(results.has(k) for k in keys):
                summary.skipped += 1
                continue
            jobs.append(_Job(plan, config, replicate, datasets, checkpoints))
    logger.info("grid started", extra={"jobs": len(jobs), "skipped": summary.skipped,
                                       "configs": len(plan.configs), "dropped": plan.dropped})

    def collect(job: _Job, rows: list[tuple[ResultRow, str]]) -> None:
        for row, status in rows:
            results.record(row, status)
        if any(status == "failed" for _, status in rows):
            summary.failed += 1
        else:
            summary.completed += 1
        logger.info("grid job finished", extra={"config": job.config.label, "replicate": job.replicate,
                                                 "completed": summary.completed, "failed": summary.failed})
        if on_config_done is not None:
            on_config_done(job.config)

    if workers <= 1:
        for job in jobs:
            collect(job, _run_job(job))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for job, rows in zip(jobs, pool.map(_run_job, jobs)):
                collect(job, rows)
    return summary


#  Report

@dataclass(frozen=True)
class Difference:
    factor: str
    left: str
    right: str
    suite: str
    context: str
    diff: float

    def as_csv_row(self) -> list:
        return [self.factor, self.left, self.right, self.suite, self.context, f"{self.diff:.6f}"]


@dataclass(frozen=True)
class DifferenceSummary:
    factor: str
    left: str
    right: str
    suite: str
    mean_diff: float
    n: int

    def as_csv_row(self) -> list:
        return [self.factor, self.left, self.right, self.suite, f"{self.mean_diff:.6f}", self.n]


DIFFERENCES_HEADER = ["factor", "left", "right", "suite", "context", "diff"]
SUMMARY_HEADER = ["factor", "left", "right", "suite", "mean_diff", "n"]


@dataclass
class Report:
    differences: list[Difference] = field(default_factory=list)
    summary: list[DifferenceSummary] = field(default_factory=list)
    anova: dict[str, AnovaReport] = field(default_factory=dict)
    errors: dict[str, DomainError] = field(default_factory=dict)


def _context(row: ResultRow, factor: str) -> str:
    levels = ["*" if c == factor else row.level(c) for c in FACTOR_COLUMNS]
    return "-".join(levels) + f"/{row.replicate}"


def paired_differences(rows: Sequence[ResultRow]) -> list[Difference]:
    """left - right for rows that agree on every other factor, suite and replicate.

    Within each factor, ``left`` is the level that comes later in the factor's declared order.
    """
    out: list[Difference] = []
    for factor in FACTOR_COLUMNS:
        order = [m.value for m in FACTOR_ENUMS[factor]]
        cells: dict[tuple[str, str], dict[str, float]] = defaultdict(dict)
        for row in rows:
            cells[(row.suite, _context(row, factor))][row.level(factor)] = row.da
        for (suite, context), by_level in sorted(cells.items()):
            present = sorted(by_level, key=order.index)
            for right, left in combinations(present, 2):
                out.append(Difference(factor, left, right, suite, context, by_level[left] - by_level[right]))
    return out


def summarize(differences: Sequence[Difference]) -> list[DifferenceSummary]:
    groups: dict[tuple, list[float]] = defaultdict(list)
    for d in differences:
        groups[(d.factor, d.left, d.right, d.suite)].append(d.diff)
    return [DifferenceSummary(*key, sum(v) / len(v), len(v)) for key, v in sorted(groups.items())]


def default_terms(table: ResultsTable) -> tuple[str, ...]:
    """Main effects of every factor that varies, plus their pairwise interactions."""
    mains = [f for f in FACTOR_COLUMNS if len(table.levels(f)) >= 2]
    return tuple(mains) + tuple(f"{a}*{b}" for a, b in combinations(mains, 2))


def report(rows: Sequence[ResultRow], terms: Sequence[str] | None = None) -> Report:
    """Paired differences for every factor and one ANOVA per suite; ANOVA failures land in ``errors``."""
    out = Report()
    out.differences = paired_differences(rows)
    out.summary = summarize(out.differences)
    table = ResultsTable(rows)
    for suite in table.suites():
        sub = table.for_suite(suite)
        suite_terms = tuple(terms) if terms else default_terms(sub)
        if not suite_terms:
            out.errors[suite] = InputError(f"suite {suite}: no factor has two levels")
            continue
        factors = sorted({f for t in suite_terms for f in t.split("*")})
        balanced = check_balance(sub, factors)
        if not balanced:
            logger.warning("unbalanced results, ANOVA run with allow_unbalanced",
                           extra={"suite": suite, "rows": len(sub)})
        try:
            out.anova[suite] = anova(sub, suite_terms, allow_unbalanced=not balanced)
        except DomainError as exc:
            logger.error("ANOVA failed", extra={"suite": suite, "reason": str(exc)})
            out.errors[suite] = exc
    return out


def scaled_plan(plan: ExperimentPlan, **model_overrides) -> ExperimentPlan:
    return replace(plan, model=replace(plan.model, **model_overrides))
