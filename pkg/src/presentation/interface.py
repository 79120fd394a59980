import json
import sys
from typing import Sequence

from rich.console import Console
from rich.table import Table as RichTable

from ..use_cases.bench import BenchRow
from ..use_cases.datagen import GenStats
from ..use_cases.experiment import DifferenceSummary, GridSummary
from ..use_cases.stats import AnovaReport

console = Console()
err_console = Console(stderr=True)


def print_error(exc: BaseException, exit_code: int, as_json: bool) -> None:
    """One diagnostic on stderr, either a rich line or a JSON object."""
    if as_json:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "exit_code": exit_code}) + "\n")
    else:
        err_console.print(f"[bold red][!] {type(exc).__name__}:[/] {exc}", highlight=False)


def render_bench(rows: Sequence[BenchRow]) -> None:
    table = RichTable(title="Dense vs block-sparse attention")
    for name in ("L", "mask", "dir", "dense ms", "sparse ms", "speedup"):
        table.add_column(name, justify="right")
    for r in rows:
        style = "green" if r.speedup >= 1.0 else "red"
        table.add_row(str(r.length), r.scheme, r.direction, f"{r.dense_ms:.2f}", f"{r.sparse_ms:.2f}",
                      f"[{style}]{r.speedup:.2f}x[/]")
    console.print(table)


def render_gen_stats(stats: GenStats, path: str) -> None:
    console.print(f"[+] Wrote {stats.emitted} examples to {path} "
                  f"(skipped {stats.skipped}, empty answers {stats.empty})")
    if stats.templates:
        table = RichTable(title="Template usage")
        table.add_column("template")
        table.add_column("count", justify="right")
        for name, count in sorted(stats.templates.items()):
            table.add_row(name, str(count))
        console.print(table)


def render_anova(report: AnovaReport, title: str = "ANOVA") -> None:
    table = RichTable(title=title)
    for name in ("term", "SS", "df", "F", "p", "eta2"):
        table.add_column(name, justify="right")
    for t in report.terms:
        marker = "*" if t.significant else ""
        table.add_row(t.term, f"{t.ss:.4g}", str(t.df), f"{t.f:.3f}", f"{t.p:.3g}{marker}", f"{t.eta2:.3f}")
    table.add_row("residual", f"{report.residual_ss:.4g}", str(report.residual_df), "", "", "")
    console.print(table)
    if not report.balanced:
        console.print("[yellow]unbalanced grid: sums of squares are approximate[/]")


def render_summary(summary: Sequence[DifferenceSummary]) -> None:
    table = RichTable(title="Paired DA differences (left - right)")
    for name in ("factor", "left", "right", "suite", "mean", "n"):
        table.add_column(name)
    for s in summary:
        colour = "green" if s.mean_diff > 0 else "red" if s.mean_diff < 0 else "white"
        table.add_row(s.factor, s.left, s.right, s.suite, f"[{colour}]{s.mean_diff:+.4f}[/]", str(s.n))
    console.print(table)


def render_grid_summary(summary: GridSummary, dropped: int, results_path: str) -> None:
    console.print(f"[+] Grid finished: {summary.completed} completed, {summary.skipped} skipped, "
                  f"{summary.failed} failed ({dropped} illegal grid points dropped)")
    console.print(f"[+] Results: {results_path}")
