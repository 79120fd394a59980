"""Parser and evaluator for the SQL template subset; the denotation oracle.

Grammar (keywords are case-insensitive):

    query    := SELECT col [FROM TABLE] [WHERE cond] [LIMIT int]
    cond     := atom ((AND | OR) atom)*          -- at most 4 atoms, left-associative
    atom     := col (= | !=) value
              | col IN ( value (, value)* )
              | col = ( SELECT col [FROM TABLE] WHERE col = value )

AND and OR bind equally and associate to the left in textual order.
"""
import re
from dataclasses import dataclass
from typing import Sequence, Union

from src.domain.models import Denotation, InputError, SqlExecutionError, SqlSyntaxError, Table

KEYWORDS = frozenset({"select", "where", "from", "table", "and", "or", "in", "limit"})
MAX_ATOMS = 4

_TOKEN = re.compile(r"\s*(!=|=|\(|\)|,|[^\s(),=!]+)")


@dataclass(frozen=True)
class Compare:
    column: str
    op: str
    value: str

    def to_sql(self) -> str:
        return f"{self.column} {self.op} {self.value}"


@dataclass(frozen=True)
class InList:
    column: str
    values: tuple[str, ...]

    def to_sql(self) -> str:
        return f"{self.column} in ({', '.join(self.values)})"


@dataclass(frozen=True)
class SubqueryEq:
    column: str
    inner: "Query"

    def to_sql(self) -> str:
        return f"{self.column} = ({self.inner.to_sql()})"


@dataclass(frozen=True)
class BoolOp:
    op: str
    left: "Expr"
    right: "Expr"

    def to_sql(self) -> str:
        return f"{self.left.to_sql()} {self.op} {self.right.to_sql()}"


Expr = Union[Compare, InList, SubqueryEq, BoolOp]


@dataclass(frozen=True)
class Query:
    select: str
    where: Expr | None = None
    limit: int | None = None
    from_table: bool = False

    def to_sql(self) -> str:
        parts = [f"select {self.select}"]
        if self.from_table:
            parts.append("from table")
        if self.where is not None:
            parts.append(f"where {self.where.to_sql()}")
        if self.limit is not None:
            parts.append(f"limit {self.limit}")
        return " ".join(parts)

    def atoms(self) -> list[Expr]:
        out: list[Expr] = []

        def walk(node):
            if isinstance(node, BoolOp):
                walk(node.left)
                walk(node.right)
            elif node is not None:
                out.append(node)

        walk(self.where)
        return out


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens: list[tuple[str, int]] = []
        pos = 0
        raw = text.encode("utf-8")
        while pos < len(text):
            match = _TOKEN.match(text, pos)
            if match is None:
                if text[pos:].strip() == "":
                    break
                raise SqlSyntaxError(f"unexpected character {text[pos]!r}", len(text[:pos].encode("utf-8")))
            start = match.start(1)
            self.tokens.append((match.group(1), len(text[:start].encode("utf-8"))))
            pos = match.end()
        self.end_offset = len(raw)
        self.i = 0

    def peek(self) -> str | None:
        return self.tokens[self.i][0].lower() if self.i < len(self.tokens) else None

    def offset(self) -> int:
        return self.tokens[self.i][1] if self.i < len(self.tokens) else self.end_offset

    def fail(self, message: str):
        raise SqlSyntaxError(message, self.offset())

    def expect(self, word: str) -> None:
        if self.peek() != word:
            self.fail(f"expected {word!r}, found {self.peek()!r}")
        self.i += 1

    def accept(self, word: str) -> bool:
        if self.peek() == word:
            self.i += 1
            return True
        return False

    def word(self, what: str) -> str:
        token = self.peek()
        if token is None or token in KEYWORDS or token in {"=", "!=", "(", ")", ","}:
            self.fail(f"expected {what}, found {token!r}")
        value = self.tokens[self.i][0]
        self.i += 1
        return value

    def query(self, nested: bool = False) -> Query:
        self.expect("select")
        column = self.word("column name")
        from_table = False
        if self.accept("from"):
            self.expect("table")
            from_table = True
        where = None
        if nested:
            self.expect("where")
            inner_col = self.word("column name")
            self.expect("=")
            where = Compare(inner_col, "=", self.word("value"))
            return Query(column, where, None, from_table)
        if self.accept("where"):
            where = self.condition()
        limit = None
        if self.accept("limit"):
            text = self.word("limit count")
            if not text.isdigit():
                self.i -= 1
                self.fail(f"limit needs a non-negative integer, found {text!r}")
            limit = int(text)
        return Query(column, where, limit, from_table)

    def condition(self) -> Expr:
        node = self.atom()
        atoms = 1
        while self.peek() in ("and", "or"):
            op = self.peek()
            self.i += 1
            atoms += 1
            if atoms > MAX_ATOMS:
                self.fail(f"conditions are limited to {MAX_ATOMS} atoms")
            node = BoolOp(op, node, self.atom())
        return node

    def atom(self) -> Expr:
        column = self.word("column name")
        if self.accept("in"):
            self.expect("(")
            values = [self.word("value")]
            while self.accept(","):
                values.append(self.word("value"))
            self.expect(")")
            return InList(column, tuple(values))
        if self.accept("!="):
            return Compare(column, "!=", self.word("value"))
        self.expect("=")
        if self.accept("("):
            inner = self.query(nested=True)
            self.expect(")")
            return SubqueryEq(column, inner)
        return Compare(column, "=", self.word("value"))


def parse_sql(text: str) -> Query:
    parser = _Parser(text)
    query = parser.query()
    if parser.peek() is not None:
        parser.fail(f"unexpected trailing token {parser.peek()!r}")
    return query


def _column(table: Table, name: str) -> int:
    try:
        return table.column_index(name)
    except KeyError:
        raise SqlExecutionError(f"unknown column {name!r}; table has {', '.join(table.headers)}") from None


class _Evaluator:
    def __init__(self, table: Table):
        self.table = table
        self.subqueries: dict[int, frozenset[str]] = {}

    def holds(self, node: Expr, row: Sequence[str]) -> bool:
        if isinstance(node, BoolOp):
            left = self.holds(node.left, row)
            right = self.holds(node.right, row)
            return (left and right) if node.op == "and" else (left or right)
        if isinstance(node, Compare):
            cell = row[_column(self.table, node.column)]
            return (cell == node.value) if node.op == "=" else (cell != node.value)
        if isinstance(node, InList):
            return row[_column(self.table, node.column)] in node.values
        inner = self.subqueries.get(id(node))
        if inner is None:
            inner = frozenset(execute(node.inner, self.table).values)
            self.subqueries[id(node)] = inner
        return row[_column(self.table, node.column)] in inner


def execute(query: Query, table: Table) -> Denotation:
    """Filter rows, keep table order, apply LIMIT, project the selected column."""
    col = _column(table, query.select)
    evaluator = _Evaluator(table)
    for atom in query.atoms():
        _column(table, atom.column)
    rows = [row for row in table.rows if query.where is None or evaluator.holds(query.where, row)]
    if query.limit is not None:
        rows = rows[:query.limit]
    return Denotation(tuple(row[col] for row in rows))


def run_query(text: str, table: Table) -> Denotation:
    return execute(parse_sql(text), table)


def denotation_accuracy(preds: Sequence[Denotation], golds: Sequence[Denotation],
                        set_semantics: bool = False) -> float:
    """Fraction of predictions whose values match the gold values irrespective of order."""
    if len(preds) != len(golds):
        raise InputError(f"{len(preds)} predictions for {len(golds)} gold answers")
    if not golds:
        return 0.0
    correct = sum(p.matches(g, set_semantics) for p, g in zip(preds, golds))
    return correct / len(golds)
