from pathlib import Path

from textual.app import App, ComposeResult
from textual.containers import Horizontal, Vertical
from textual.screen import Screen
from textual.widgets import Button, DataTable, Label

from src.domain.models import FACTOR_COLUMNS
from src.infrastructure.repositories import read_results_csv
from src.use_cases.experiment import report


class BaseScreen(Screen):
    # Header with navigation shared by every screen.

    def compose(self) -> ComposeResult:
        with Horizontal(id="app-header"):
            yield Label("tabenc results", id="app-title")
            yield Button("Results", id="nav-results")
            yield Button("ANOVA", id="nav-anova")
            yield Button("Differences", id="nav-diffs")
            yield Button("Exit", id="exit-btn", variant="error")

        with Vertical(id="content-area"):
            yield from self.compose_content()

    def compose_content(self) -> ComposeResult:
        yield Label("Default Content")

    def on_button_pressed(self, event: Button.Pressed) -> None:
        targets = {"nav-results": "results", "nav-anova": "anova", "nav-diffs": "diffs"}
        if event.button.id == "exit-btn":
            self.app.exit()
        elif event.button.id in targets:
            self.app.switch_screen(targets[event.button.id])


class ResultsScreen(BaseScreen):
    def compose_content(self) -> ComposeResult:
        yield Label(f"{len(self.app.rows)} measurements from {self.app.results_path}", id="screen-title")
        yield DataTable(id="results-table")

    def on_mount(self) -> None:
        table = self.query_one(DataTable)
        table.cursor_type = "row"
        table.add_columns(*FACTOR_COLUMNS, "suite", "replicate", "DA")
        for r in self.app.rows:
            table.add_row(*(r.level(c) for c in FACTOR_COLUMNS), r.suite, r.replicate, f"{r.da:.4f}")


class AnovaScreen(BaseScreen):
    def compose_content(self) -> ComposeResult:
        yield Label("ANOVA per suite (* p <= 0.05)", id="screen-title")
        yield DataTable(id="anova-table")
        for suite, exc in sorted(self.app.report.errors.items()):
            yield Label(f"{suite}: {exc}", classes="error")

    def on_mount(self) -> None:
        table = self.query_one(DataTable)
        table.cursor_type = "row"
        table.add_columns("suite", "term", "eta2", "p", "df")
        for suite, rep in sorted(self.app.report.anova.items()):
            for t in rep.terms:
                table.add_row(suite, t.term, f"{t.eta2:.3f}", f"{t.p:.3g}{'*' if t.significant else ''}", str(t.df))


class DifferencesScreen(BaseScreen):
    def compose_content(self) -> ComposeResult:
        yield Label("Mean paired DA differences (left - right)", id="screen-title")
        yield DataTable(id="diff-table")

    def on_mount(self) -> None:
        table = self.query_one(DataTable)
        table.cursor_type = "row"
        table.add_columns("factor", "left", "right", "suite", "mean diff", "n")
        for s in self.app.report.summary:
            table.add_row(s.factor, s.left, s.right, s.suite, f"{s.mean_diff:+.4f}", str(s.n))


class ResultsBrowserApp(App):
    """Read-only browser over a results CSV."""

    TITLE = "tabenc results browser"
    SCREENS = {"results": ResultsScreen, "anova": AnovaScreen, "diffs": DifferencesScreen}

    def __init__(self, results_path: Path):
        super().__init__()
        self.results_path = Path(results_path)
        self.rows = read_results_csv(self.results_path)
        self.report = report(self.rows)

    def on_mount(self) -> None:
        self.push_screen("results")

    CSS = """
    #app-header {
        dock: top;
        height: 4;
        background: $surface;
        border-bottom: solid $primary;
        padding: 0 2;
        align: left middle;
        layout: horizontal;
    }

    #app-title {
        width: 1fr;
        height: 3;
        content-align: left middle;
        text-style: bold;
        color: $primary;
    }

    #app-header Button {
        width: 16;
        height: 3;
        margin: 0 1;
    }

    #content-area {
        height: 1fr;
        padding: 1 2;
    }

    #screen-title {
        text-style: bold;
        width: 100%;
        margin-bottom: 1;
        color: $accent;
    }

    .error {
        color: $error;
    }

    DataTable {
        height: 1fr;
        border: tall $primary;
    }
    """


def run_browser(results_path: Path) -> None:
    ResultsBrowserApp(results_path).run()
