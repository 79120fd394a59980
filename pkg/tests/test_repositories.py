import sqlite3

import numpy as np
import pytest

from src.domain.models import (
    CheckpointFormatError,
    FactorConfig,
    InputError,
    MaskScheme,
    ResultRow,
    ResultsStoreError,
    Table,
    TokenScheme,
)
from src.infrastructure import (
    CheckpointRepository,
    JsonlDatasetRepository,
    ResultsDB,
    ResultsRepository,
    read_answers,
    read_results_csv,
    read_table,
    write_results_csv,
)
from src.infrastructure.repositories import MODEL_FILE


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        repo = CheckpointRepository()
        tensors = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.array([1.5], dtype=np.float32)}
        repo.save(tmp_path / "ck", {"d_model": 16}, tensors)
        config, loaded = repo.load(tmp_path / "ck")
        assert config == {"d_model": 16}
        assert set(loaded) == {"a", "b"}
        assert np.array_equal(loaded["b"], tensors["b"])

    def test_bad_magic(self, tmp_path):
        (tmp_path / MODEL_FILE).write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(CheckpointFormatError):
            CheckpointRepository().load(tmp_path)

    def test_truncated(self, tmp_path):
        repo = CheckpointRepository()
        repo.save(tmp_path, {}, {"w": np.ones((4, 4), dtype=np.float32)})
        blob = (tmp_path / MODEL_FILE).read_bytes()
        (tmp_path / MODEL_FILE).write_bytes(blob[:-4])
        with pytest.raises(CheckpointFormatError):
            repo.load(tmp_path)

    def test_missing(self, tmp_path):
        repo = CheckpointRepository()
        assert not repo.exists(tmp_path)
        assert repo.metrics(tmp_path) is None
        with pytest.raises(CheckpointFormatError):
            repo.load(tmp_path)


def _row(mask, suite, rep, da, tokens=TokenScheme.T0):
    return ResultRow(FactorConfig(tokens=tokens, mask=mask), suite, rep, da)


class TestResultsCsv:
    def test_sorted_and_read_back(self, tmp_path):
        rows = [_row(MaskScheme.M1, "test", "0", 0.25), _row(MaskScheme.M0, "test", "1", 0.5),
                _row(MaskScheme.M0, "test", "0", 1 / 3)]
        write_results_csv(tmp_path / "r.csv", rows)
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "T,M,PE,B,E,suite,replicate,da"
        assert lines[1].startswith("T0,M0,TPE,B0,E0,test,0,")
        back = read_results_csv(tmp_path / "r.csv")
        assert sorted(back, key=lambda r: r.key) == sorted(rows, key=lambda r: r.key)

    def test_da_out_of_range(self, tmp_path):
        (tmp_path / "r.csv").write_text("T,M,PE,B,E,suite,replicate,da\nT0,M0,TPE,B0,E0,test,0,1.5\n")
        with pytest.raises(InputError):
            read_results_csv(tmp_path / "r.csv")

    def test_missing_column(self, tmp_path):
        (tmp_path / "r.csv").write_text("T,M,suite,da\n")
        with pytest.raises(InputError):
            read_results_csv(tmp_path / "r.csv")


class TestResultsRepository:
    def test_record_and_query(self, tmp_path):
        with ResultsDB(tmp_path / "grid.db") as db:
            repo = ResultsRepository(db)
            ok = _row(MaskScheme.M1, "test", "0", 0.75)
            bad = _row(MaskScheme.M6, "test", "0", float("nan"), tokens=TokenScheme.T2)
            repo.record(ok)
            repo.record(bad, "failed")
            assert repo.has(ok.key) and repo.has(bad.key)
            assert not repo.has(("T0-M2-TPE-B0-E0", "test", "0"))
            assert repo.all_rows() == [ok]
            assert [r.key for r in repo.failed_rows()] == [bad.key]
            assert repo.status_counts() == {"ok": 1, "failed": 1}

    def test_record_replaces(self, tmp_path):
        with ResultsDB(tmp_path / "grid.db") as db:
            repo = ResultsRepository(db)
            repo.record(_row(MaskScheme.M0, "test", "0", 0.1))
            repo.record(_row(MaskScheme.M0, "test", "0", 0.9))
            assert [r.da for r in repo.all_rows()] == [0.9]

    def test_export(self, tmp_path):
        with ResultsDB(tmp_path / "grid.db") as db:
            repo = ResultsRepository(db)
            repo.record(_row(MaskScheme.M0, "test", "0", 0.5))
            assert repo.export_csv(tmp_path / "results.csv") == 1
        assert len(read_results_csv(tmp_path / "results.csv")) == 1

    def test_rejected_write_keeps_the_cause(self, tmp_path):
        with ResultsDB(tmp_path / "grid.db") as db:
            repo = ResultsRepository(db)
            db.conn.execute("CREATE TRIGGER reject BEFORE INSERT ON results BEGIN SELECT RAISE(ABORT, 'locked'); END")
            row = _row(MaskScheme.M0, "test", "0", 0.5)
            with pytest.raises(ResultsStoreError) as info:
                repo.record(row)
            assert isinstance(info.value.__cause__, sqlite3.Error)
            assert not repo.has(row.key)
            db.conn.execute("DROP TRIGGER reject")
            repo.record(row)
            assert repo.has(row.key)


class TestJsonl:
    def test_round_trip(self, tmp_path, example):
        repo = JsonlDatasetRepository()
        assert repo.write([example, example], tmp_path / "d.jsonl") == 2
        assert list(repo.read(tmp_path / "d.jsonl")) == [example, example]
        assert [d.values for d in read_answers(tmp_path / "d.jsonl")] == [("1", "3"), ("1", "3")]

    def test_invalid_line_reports_number(self, tmp_path, example):
        path = tmp_path / "d.jsonl"
        JsonlDatasetRepository().write([example], path)
        with path.open("a") as fh:
            fh.write("{not json}\n")
        with pytest.raises(InputError, match=":2:"):
            list(JsonlDatasetRepository().read(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            list(JsonlDatasetRepository().read(tmp_path / "absent.jsonl"))

    def test_table_file(self, tmp_path, small_table):
        (tmp_path / "t.json").write_text('{"header": ["c1"], "rows": [["4"]]}')
        assert read_table(tmp_path / "t.json") == Table.from_lists(["c1"], [["4"]])
        (tmp_path / "bad.json").write_text('{"rows": []}')
        with pytest.raises(InputError):
            read_table(tmp_path / "bad.json")
