import sqlite3

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.domain.models import Denotation, InputError, SqlExecutionError, SqlSyntaxError, Table
from src.use_cases.sqlexec import (
    BoolOp,
    Compare,
    InList,
    Query,
    SubqueryEq,
    denotation_accuracy,
    execute,
    parse_sql,
    run_query,
)
from src.use_cases.templates import TEMPLATES, draw_query

from strategies import tables


class TestParse:
    def test_two_conditions(self):
        query = parse_sql("select c2 where c1 != 42 and c3 = 7")
        assert query == Query("c2", BoolOp("and", Compare("c1", "!=", "42"), Compare("c3", "=", "7")))

    def test_limit(self):
        assert parse_sql("select c1 limit 2") == Query("c1", limit=2)

    def test_from_takes_only_table(self):
        with pytest.raises(SqlSyntaxError):
            parse_sql("select c1 from c2")

    def test_left_associative(self):
        query = parse_sql("select c1 where c1 = 1 or c2 = 2 and c3 = 3")
        assert query.where.op == "and"
        assert query.where.left.op == "or"

    def test_keywords_case_insensitive(self):
        assert parse_sql("SELECT c1 WHERE c2 IN (1, 2)").where == InList("c2", ("1", "2"))

    def test_subquery(self):
        query = parse_sql("select c1 where c2 = (select c2 where c2 = 5)")
        assert isinstance(query.where, SubqueryEq)
        assert query.where.inner == Query("c2", Compare("c2", "=", "5"))

    def test_too_many_atoms(self):
        with pytest.raises(SqlSyntaxError):
            parse_sql("select c1 where c1 = 1 and c1 = 2 and c1 = 3 and c1 = 4 and c1 = 5")

    def test_error_offset_is_a_byte_offset(self):
        with pytest.raises(SqlSyntaxError) as info:
            parse_sql("select c1 wher c2 = 1")
        assert info.value.offset == len("select c1 ")

    def test_canonical_render(self):
        text = "select c1 from table where c2 in (1, 2) limit 3"
        assert parse_sql(text).to_sql() == text


class TestExecute:
    def test_limit_is_a_prefix(self):
        table = Table.from_lists(["c1"], [["1"], ["2"], ["3"]])
        assert run_query("select c1 limit 2", table).values == ("1", "2")

    def test_filter_keeps_table_order(self):
        table = Table.from_lists(["c1", "c2"], [["5", "a"], ["7", "b"], ["5", "c"]])
        assert run_query("select c2 where c1 = 5", table).values == ("a", "c")

    def test_membership(self):
        table = Table.from_lists(["c1", "c2"], [["1", "x"], ["2", "z"], ["3", "y"]])
        assert run_query("select c1 where c2 in (x, y)", table).values == ("1", "3")

    def test_unknown_column(self, small_table):
        with pytest.raises(SqlExecutionError):
            run_query("select c9", small_table)

    def test_empty_answer(self, small_table):
        assert run_query("select c1 where c2 = 999", small_table).values == ()


class TestScore:
    def test_order_ignored(self):
        assert denotation_accuracy([Denotation(("2", "1"))], [Denotation(("1", "2"))]) == 1.0

    def test_multiplicity(self):
        assert denotation_accuracy([Denotation(("1", "1"))], [Denotation(("1",))]) == 0.0
        assert denotation_accuracy([Denotation(("1", "1"))], [Denotation(("1",))], set_semantics=True) == 1.0

    def test_empty_answers_score(self):
        assert denotation_accuracy([Denotation(()), Denotation(("1",))], [Denotation(()), Denotation(("2",))]) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            denotation_accuracy([Denotation(())], [])


def _sqlite_condition(node) -> str:
    # Parenthesize every operator so SQLite sees our left-to-right grouping.
    if isinstance(node, BoolOp):
        return f"({_sqlite_condition(node.left)} {node.op} {_sqlite_condition(node.right)})"
    if isinstance(node, Compare):
        return f"{node.column} {node.op} '{node.value}'"
    if isinstance(node, InList):
        return f"{node.column} in ({', '.join(repr(v) for v in node.values)})"
    inner = node.inner
    return f"{node.column} in (select {inner.select} from t where {_sqlite_condition(inner.where)})"


def _sqlite_answer(query: Query, table: Table) -> tuple[str, ...]:
    conn = sqlite3.connect(":memory:")
    columns = ", ".join(f"{h} TEXT" for h in table.headers)
    conn.execute(f"CREATE TABLE t (pos INTEGER PRIMARY KEY, {columns})")
    marks = ", ".join("?" for _ in range(table.n_cols + 1))
    conn.executemany(f"INSERT INTO t VALUES ({marks})", [(i, *row) for i, row in enumerate(table.rows)])
    sql = f"select {query.select} from t"
    if query.where is not None:
        sql += f" where {_sqlite_condition(query.where)}"
    sql += " order by pos"
    if query.limit is not None:
        sql += f" limit {query.limit}"
    values = tuple(row[0] for row in conn.execute(sql))
    conn.close()
    return values


@settings(max_examples=150, deadline=None)
@given(table=tables(max_rows=6, max_cols=5, values=st.integers(0, 4).map(str)),
       template=st.sampled_from(sorted(TEMPLATES)), seed=st.integers(0, 2**32 - 1))
def test_agrees_with_sqlite(table, template, seed):
    rng = np.random.default_rng(seed)
    instance = draw_query(template, table, rng, pool=tuple(sorted(TEMPLATES)))
    query = parse_sql(instance.query)
    assert execute(query, table).values == _sqlite_answer(query, table)
