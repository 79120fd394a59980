"""The ``tabenc`` command line: one subcommand per pipeline step."""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from src.domain.models import (
    CheckpointFormatError,
    Denotation,
    DomainError,
    FactorConfigError,
    GenerationError,
    InputError,
    MaskScheme,
    PositionScheme,
    QAExample,
    Seed,
    SqlSyntaxError,
    Table,
    TableShapeError,
    TokenScheme,
    UnbalancedDesignError,
)
from src.infrastructure import (
    CheckpointRepository,
    JsonlDatasetRepository,
    ResultsDB,
    ResultsRepository,
    Settings,
    apply_thread_caps,
    atomic_write,
    configure_logging,
    read_answers,
    read_results_csv,
    read_table,
    write_csv,
    write_predictions,
)
from src.use_cases import bench, stats
from src.use_cases.datagen import CONSISTENCY_RATES, MIXED, SUITES, GenSpec, GenStats, gen_dataset
from src.use_cases.experiment import (
    DIFFERENCES_HEADER,
    PRESETS,
    SUMMARY_HEADER,
    default_terms,
    preset_plan,
    report,
    run_grid,
    scaled_plan,
)
from src.use_cases.linearize import DEFAULT_CONTEXT, encode, to_tsv
from src.use_cases.masks import build_mask, format_blocks
from src.use_cases.model import KERNELS, ModelConfig, TableQAModel
from src.use_cases.sqlexec import denotation_accuracy, run_query
from src.use_cases.training import predict, train

from .interface import (
    console,
    print_error,
    render_anova,
    render_bench,
    render_gen_stats,
    render_grid_summary,
    render_summary,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

VALIDATION_ERRORS = (
    TableShapeError,
    FactorConfigError,
    SqlSyntaxError,
    InputError,
    GenerationError,
    UnbalancedDesignError,
    CheckpointFormatError,
)


class UsageError(Exception):
    """Bad command line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


#  Argument helpers

def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("expected at least one positive integer")
    return values


def _name_list(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _rate(text: str) -> float | str:
    if text == MIXED:
        return MIXED
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"R must be one of {CONSISTENCY_RATES} or {MIXED}") from None


def _read_json(path: Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise InputError(f"{path}: expected a JSON object")
    return data


def _load_question_and_table(path: Path, question: str | None) -> tuple[str, Table]:
    """An example object (table + query) or a bare table plus ``--question``."""
    data = _read_json(path)
    try:
        if "table" in data:
            example = QAExample.from_dict(data)
            return (question if question is not None else example.query), example.table
        return question or "", Table.from_dict(data)
    except (KeyError, TypeError) as exc:
        raise InputError(f"{path}: not an example or table file ({exc})") from None


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        atomic_write(out, text)


def _model_config(path: Path | None, settings: Settings, **overrides) -> ModelConfig:
    cfg = ModelConfig.from_dict(_read_json(path)) if path else ModelConfig()
    changes = {k: v for k, v in overrides.items() if v is not None}
    if settings.debug:
        changes["check_tiling"] = True
    return replace(cfg, **changes) if changes else cfg


#  Subcommands

def cmd_gen(args, settings: Settings) -> int:
    overrides = {
        "templates": args.templates,
        "consistency_rate": args.R,
        "mixability": args.S,
        "rows": args.rows,
        "cols": args.cols,
        "adversarial": args.adversarial or None,
        "drop_empty": args.drop_empty or None,
    }
    spec = GenSpec.for_suite(args.suite, args.n, Seed(args.seed), **overrides)
    gen_stats = GenStats()
    JsonlDatasetRepository().write(gen_dataset(spec, gen_stats, workers=args.workers or 1), args.out)
    logger.info("dataset written", extra={"path": str(args.out), "emitted": gen_stats.emitted,
                                          "skipped": gen_stats.skipped, "empty": gen_stats.empty})
    render_gen_stats(gen_stats, str(args.out))
    return EXIT_OK


def cmd_exec(args, settings: Settings) -> int:
    answer = run_query(args.query, read_table(args.table))
    sys.stdout.write(json.dumps(list(answer.values), ensure_ascii=False) + "\n")
    return EXIT_OK


def cmd_score(args, settings: Settings) -> int:
    da = denotation_accuracy(read_answers(args.pred), read_answers(args.gold), args.set_semantics)
    sys.stdout.write(f"{da:.4f}\n")
    return EXIT_OK


def cmd_dump_encoding(args, settings: Settings) -> int:
    question, table = _load_question_and_table(args.input, args.question)
    enc = encode(question, table, TokenScheme(args.scheme), PositionScheme(args.pe), max_length=args.max_length)
    _emit(to_tsv(enc), args.out)
    return EXIT_OK


def cmd_mask(args, settings: Settings) -> int:
    question, table = _load_question_and_table(args.input, args.question)
    enc = encode(question, table, TokenScheme(args.tokens), PositionScheme.TPE, max_length=args.max_length)
    mask = build_mask(enc, MaskScheme(args.scheme), question_content_only=args.question_content_only)
    _emit(format_blocks(mask), args.out)
    return EXIT_OK


def cmd_bench(args, settings: Settings) -> int:
    rows = bench.bench_attention(args.lengths, MaskScheme(args.scheme), trials=args.trials, dim=args.dim,
                                 seed=Seed(args.seed), backward=not args.forward_only)
    if args.out:
        write_csv(args.out, bench.CSV_HEADER, (r.as_csv_row() for r in rows))
    render_bench(rows)
    return EXIT_OK


def cmd_train(args, settings: Settings) -> int:
    cfg = _model_config(args.config, settings, steps=args.steps, kernel=args.kernel)
    examples = list(JsonlDatasetRepository().read(args.data))
    eval_examples = list(JsonlDatasetRepository().read(args.eval_data)) if args.eval_data else None
    result = train(examples, cfg, Seed(args.seed), eval_examples=eval_examples)
    checkpoints = CheckpointRepository()
    checkpoints.save(args.out, cfg.to_dict(), result.model.state_arrays())
    checkpoints.save_metrics(args.out, [p.to_dict() for p in result.trace])
    console.print(f"[+] Checkpoint written to {args.out}: best held-out DA {result.best_da:.4f} "
                  f"at step {result.best_step} ({result.steps_run} steps"
                  f"{', stopped early' if result.stopped_early else ''})")
    return EXIT_OK


def cmd_eval(args, settings: Settings) -> int:
    config, tensors = CheckpointRepository().load(args.ckpt)
    try:
        cfg = ModelConfig.from_dict(config)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{args.ckpt}: unusable model config ({exc})") from None
    if settings.debug:
        cfg = replace(cfg, check_tiling=True)
    model = TableQAModel(cfg)
    model.load_arrays(tensors)
    examples = list(JsonlDatasetRepository().read(args.data))
    preds = predict(model, examples)
    write_predictions(args.out, [ex.query for ex in examples], preds)
    da = denotation_accuracy(preds, [Denotation(ex.answer) for ex in examples], args.set_semantics)
    logger.info("evaluation finished", extra={"examples": len(examples), "da": da, "out": str(args.out)})
    console.print(f"[+] {len(preds)} predictions written to {args.out} (DA against gold {da:.4f})")
    return EXIT_OK


def cmd_anova(args, settings: Settings) -> int:
    table = stats.ResultsTable(read_results_csv(args.input))
    if args.suite:
        table = table.for_suite(args.suite)
        if not len(table):
            raise InputError(f"no rows for suite {args.suite!r}")
    elif len(table.suites()) > 1:
        raise InputError(f"results hold suites {', '.join(table.suites())}; pick one with --suite")
    terms = stats.parse_terms(args.terms) if args.terms else default_terms(table)
    if not terms:
        raise InputError("no factor has two levels in these results")
    result = stats.anova(table, terms, allow_unbalanced=args.allow_unbalanced)
    if args.out:
        write_csv(args.out, stats.CSV_HEADER, result.as_csv_rows())
        render_anova(result)
    else:
        sys.stdout.write(",".join(stats.CSV_HEADER) + "\n")
        sys.stdout.writelines(",".join(r) + "\n" for r in result.as_csv_rows())
    return EXIT_OK


def cmd_grid(args, settings: Settings) -> int:
    plan = preset_plan(args.preset, args.out, seed=args.seed, n_train=args.n_train, n_eval=args.n_eval,
                       replicates=args.replicates)
    if settings.debug:
        plan = scaled_plan(plan, check_tiling=True)
    if args.steps:
        plan = scaled_plan(plan, steps=args.steps)
    workers = min(args.workers, settings.threads) if args.workers else settings.threads
    results_path = plan.out_dir / "results.csv"
    plan.out_dir.mkdir(parents=True, exist_ok=True)

    with ResultsDB(str(plan.out_dir / "grid.db")) as db:
        results = ResultsRepository(db)
        summary = run_grid(plan, results, JsonlDatasetRepository(),
                           checkpoints=CheckpointRepository() if args.save_checkpoints else None,
                           workers=workers,
                           on_config_done=lambda _config: results.export_csv(results_path))
        results.export_csv(results_path)
    render_grid_summary(summary, plan.dropped, str(results_path))
    return EXIT_OK


def cmd_report(args, settings: Settings) -> int:
    terms = stats.parse_terms(args.terms) if args.terms else None
    rep = report(read_results_csv(args.input), terms)
    out_dir = Path(args.out_dir)
    write_csv(out_dir / "differences.csv", DIFFERENCES_HEADER, (d.as_csv_row() for d in rep.differences))
    write_csv(out_dir / "summary.csv", SUMMARY_HEADER, (s.as_csv_row() for s in rep.summary))
    for suite, result in sorted(rep.anova.items()):
        write_csv(out_dir / f"anova_{suite}.csv", stats.CSV_HEADER, result.as_csv_rows())
        render_anova(result, title=f"ANOVA ({suite})")
    render_summary(rep.summary)
    if rep.errors:
        raise rep.errors[min(rep.errors)]
    return EXIT_OK


def cmd_view(args, settings: Settings) -> int:
    from .app import run_browser

    read_results_csv(args.results)
    run_browser(args.results)
    return EXIT_OK


#  Parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tabenc", description="Table encoding factor study: data, masks, attention, models, ANOVA.")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"], default=None)
    parser.add_argument("--json-logs", action="store_true", help="log JSON lines to stderr")
    parser.add_argument("--json-errors", action="store_true", help="report failures as one JSON object on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic table-QA dataset")
    p.add_argument("--suite", choices=list(SUITES), default="train")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--S", type=float, default=None, help="mixability in [0, 1]")
    p.add_argument("--R", type=_rate, default=None, help=f"consistency rate {CONSISTENCY_RATES} or {MIXED}")
    p.add_argument("--rows", type=_int_list, default=None, help="allowed row counts, e.g. 6,7,8")
    p.add_argument("--cols", type=_int_list, default=None, help="allowed column counts")
    p.add_argument("--templates", type=_name_list, default=None, help="comma-separated template ids")
    p.add_argument("--drop-empty", action="store_true")
    p.add_argument("--adversarial", action="store_true", help="draw condition values from the whole universe")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("exec", help="run one query against a table file")
    p.add_argument("--query", required=True)
    p.add_argument("--table", type=Path, required=True)
    p.set_defaults(handler=cmd_exec)

    p = sub.add_parser("score", help="denotation accuracy of predictions against gold answers")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gold", type=Path, required=True)
    p.add_argument("--set-semantics", action="store_true")
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("dump-encoding", help="per-token TSV of a linearized example")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--question", default=None)
    p.add_argument("--scheme", choices=[t.value for t in TokenScheme], default="T0")
    p.add_argument("--pe", choices=[s.value for s in PositionScheme], default="TPE")
    p.add_argument("--max-length", type=int, default=DEFAULT_CONTEXT)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=cmd_dump_encoding)

    p = sub.add_parser("mask", help="export the block tiling of a structural mask")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--question", default=None)
    p.add_argument("--scheme", choices=[m.value for m in MaskScheme], default="M0")
    p.add_argument("--tokens", choices=[t.value for t in TokenScheme], default="T2")
    p.add_argument("--question-content-only", action="store_true")
    p.add_argument("--max-length", type=int, default=DEFAULT_CONTEXT)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=cmd_mask)

    p = sub.add_parser("bench", help="dense vs block-sparse attention timings")
    p.add_argument("--lengths", type=_int_list, default=bench.DEFAULT_LENGTHS)
    p.add_argument("--scheme", choices=[m.value for m in MaskScheme], default="M3")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--forward-only", action="store_true")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", type=Path, default=None, help="JSON object with ModelConfig fields")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--eval-data", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--kernel", choices=list(KERNELS), default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="predict answers with a checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--set-semantics", action="store_true")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("anova", help="factorial ANOVA over a results CSV")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--terms", default=None, help="e.g. T,M,PE,B,E,M*PE")
    p.add_argument("--suite", default=None)
    p.add_argument("--allow-unbalanced", action="store_true")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=cmd_anova)

    p = sub.add_parser("grid", help="run a resumable factor-grid study")
    p.add_argument("--preset", choices=list(PRESETS), default="smoke")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-eval", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--save-checkpoints", action="store_true")
    p.set_defaults(handler=cmd_grid)

    p = sub.add_parser("report", help="paired differences and per-suite ANOVA")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--terms", default=None)
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("view", help="browse a results CSV in the terminal")
    p.add_argument("--results", type=Path, required=True)
    p.set_defaults(handler=cmd_view)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, ValueError, *VALIDATION_ERRORS)):
        return EXIT_VALIDATION
    return EXIT_RUNTIME


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    json_errors = "--json-errors" in argv
    try:
        args = build_parser().parse_args(argv)
        settings = Settings.from_env()
    except (UsageError, ValueError) as exc:
        print_error(exc, EXIT_VALIDATION, json_errors)
        return EXIT_VALIDATION

    configure_logging(args.log_level or settings.log_level, json_logs=args.json_logs or args.json_errors)
    apply_thread_caps(settings.threads)
    try:
        return args.handler(args, settings)
    except KeyboardInterrupt:
        print_error(RuntimeError("interrupted"), EXIT_RUNTIME, json_errors)
        return EXIT_RUNTIME
    except (DomainError, ValueError, OSError, RuntimeError, MemoryError) as exc:
        code = exit_code_for(exc)
        logger.debug("command failed", exc_info=exc)
        print_error(exc, code, json_errors)
        return code


if __name__ == "__main__":
    sys.exit(main())
