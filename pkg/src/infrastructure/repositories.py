import csv
import json
import logging
import math
import sqlite3
import struct
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from src.domain.interfaces import ICheckpointRepository, IDatasetRepository, IResultsRepository
from src.domain.models import (
    FACTOR_COLUMNS,
    CheckpointFormatError,
    Denotation,
    FactorConfig,
    InputError,
    QAExample,
    ResultRow,
    ResultsStoreError,
    Table,
)

from .database import ResultsDB
from .utils import atomic_open, atomic_write

logger = logging.getLogger(__name__)

RESULTS_HEADER = [*FACTOR_COLUMNS, "suite", "replicate", "da"]


def _json_line(data: dict) -> str:
    return json.dumps(data, separators=(",", ":"), ensure_ascii=False) + "\n"


def _jsonl_records(path: Path) -> Iterator[tuple[int, dict]]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        for number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{number}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise InputError(f"{path}:{number}: expected a JSON object")
            yield number, record


class JsonlDatasetRepository(IDatasetRepository):
    """One QAExample per line: {"table": {"header", "rows"}, "query", "answer"}."""

    def write(self, examples: Iterable[QAExample], path: Path) -> int:
        count = 0
        with atomic_open(path) as fh:
            for example in examples:
                fh.write(_json_line(example.to_dict()))
                count += 1
        return count

    def read(self, path: Path) -> Iterator[QAExample]:
        for number, record in _jsonl_records(Path(path)):
            try:
                yield QAExample.from_dict(record)
            except (KeyError, TypeError) as exc:
                raise InputError(f"{path}:{number}: malformed example ({exc})") from None


def read_table(path: Path) -> Table:
    """A standalone table file: {"header": [...], "rows": [[...], ...]}."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return Table.from_dict(data)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: not a table file ({exc})") from None


def write_predictions(path: Path, queries: Sequence[str], preds: Sequence[Denotation]) -> None:
    with atomic_open(path) as fh:
        for query, pred in zip(queries, preds):
            fh.write(_json_line({"query": query, "answer": list(pred.values)}))


def read_answers(path: Path) -> list[Denotation]:
    """The ``answer`` list of every line; works for datasets and prediction files alike."""
    out = []
    for number, record in _jsonl_records(Path(path)):
        answer = record.get("answer")
        if not isinstance(answer, list):
            raise InputError(f"{path}:{number}: missing 'answer' list")
        out.append(Denotation(tuple(str(v) for v in answer)))
    return out


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with atomic_open(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _sort_key(row: ResultRow) -> tuple:
    return (*(row.level(c) for c in FACTOR_COLUMNS), row.suite, row.replicate)


def write_results_csv(path: Path, rows: Iterable[ResultRow]) -> int:
    ordered = sorted(rows, key=_sort_key)
    write_csv(path, RESULTS_HEADER,
              ([*(r.level(c) for c in FACTOR_COLUMNS), r.suite, r.replicate, repr(float(r.da))] for r in ordered))
    return len(ordered)


def read_results_csv(path: Path) -> list[ResultRow]:
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    rows = []
    with fh:
        reader = csv.DictReader(fh)
        missing = [c for c in RESULTS_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise InputError(f"{path}: missing columns {', '.join(missing)}")
        for number, record in enumerate(reader, start=2):
            try:
                factor = FactorConfig.from_dict({"tokens": record["T"], "mask": record["M"], "pe": record["PE"],
                                                 "bias": record["B"], "emb": record["E"]})
                da = float(record["da"])
            except ValueError as exc:
                raise InputError(f"{path}:{number}: {exc}") from None
            if not math.isfinite(da) or not 0.0 <= da <= 1.0:
                raise InputError(f"{path}:{number}: da must lie in [0, 1], got {record['da']!r}")
            rows.append(ResultRow(factor, record["suite"], record["replicate"], da))
    return rows


class ResultsRepository(IResultsRepository):
    def __init__(self, db: ResultsDB):
        self.db = db

    def record(self, row: ResultRow, status: str = "ok") -> None:
        f = row.factor
        da = None if status != "ok" else float(row.da)
        try:
            self.db.execute_update(
                "INSERT OR REPLACE INTO results (label, suite, replicate, t, m, pe, b, e, da, status) "
                "VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                (f.label, row.suite, row.replicate, f.tokens.value, f.mask.value, f.pe.value, f.bias.value,
                 f.emb.value, da, status),
            )
        except sqlite3.Error as exc:
            raise ResultsStoreError(f"could not record result {row.key} in {self.db.db_path}: {exc}") from exc

    def has(self, key: tuple[str, str, str]) -> bool:
        return self.db.execute_single(
            "SELECT 1 FROM results WHERE label = ? AND suite = ? AND replicate = ?", key
        ) is not None

    def _rows(self, status: str) -> list[ResultRow]:
        records = self.db.execute_query(
            "SELECT label, suite, replicate, da FROM results WHERE status = ?", (status,)
        )
        rows = [ResultRow(FactorConfig.from_label(label), suite, replicate, math.nan if da is None else da)
                for label, suite, replicate, da in records]
        return sorted(rows, key=_sort_key)

    def all_rows(self) -> list[ResultRow]:
        return self._rows("ok")

    def failed_rows(self) -> list[ResultRow]:
        return self._rows("failed")

    def status_counts(self) -> dict[str, int]:
        return dict(self.db.execute_query("SELECT status, COUNT(*) FROM results GROUP BY status"))

    def export_csv(self, path: Path) -> int:
        return write_results_csv(path, self.all_rows())


#  Checkpoint format
#
#  magic  b"TBENCKPT"             8 bytes
#  version                         uint32 LE
#  header length                   uint32 LE
#  header                          UTF-8 JSON {"config": {...}, "tensors": [{"name", "shape"}, ...]}
#  tensor data                     float32 LE, C order, in header order

CHECKPOINT_MAGIC = b"TBENCKPT"
CHECKPOINT_VERSION = 1
MODEL_FILE = "model.bin"
METRICS_FILE = "metrics.jsonl"


class CheckpointRepository(ICheckpointRepository):
    """Checkpoint directories holding ``model.bin`` and the metric trace."""

    def save(self, path: Path, config: dict, tensors: dict) -> None:
        names = sorted(tensors)
        arrays = [np.ascontiguousarray(tensors[n], dtype="<f4") for n in names]
        header = json.dumps({"config": config,
                             "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)]},
                            sort_keys=True).encode("utf-8")
        blob = b"".join([CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header,
                         *(a.tobytes() for a in arrays)])
        atomic_write(Path(path) / MODEL_FILE, blob)

    def load(self, path: Path) -> tuple[dict, dict]:
        target = Path(path) / MODEL_FILE
        try:
            blob = target.read_bytes()
        except OSError as exc:
            raise CheckpointFormatError(f"cannot read checkpoint {target}: {exc.strerror}") from None
        if blob[:8] != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"{target} is not a tabenc checkpoint")
        version, header_len = struct.unpack("<II", blob[8:16])
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"{target}: unsupported checkpoint version {version}")
        try:
            header = json.loads(blob[16:16 + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise CheckpointFormatError(f"{target}: corrupt header") from None
        offset = 16 + header_len
        tensors = {}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            end = offset + 4 * count
            if end > len(blob):
                raise CheckpointFormatError(f"{target}: truncated tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
            offset = end
        if offset != len(blob):
            raise CheckpointFormatError(f"{target}: {len(blob) - offset} trailing bytes")
        return header["config"], tensors

    def exists(self, path: Path) -> bool:
        return (Path(path) / MODEL_FILE).is_file()

    def save_metrics(self, path: Path, trace: Iterable[dict]) -> None:
        with atomic_open(Path(path) / METRICS_FILE) as fh:
            for point in trace:
                fh.write(_json_line(point))

    def metrics(self, path: Path) -> Optional[list[dict]]:
        target = Path(path) / METRICS_FILE
        if not target.is_file():
            return None
        return [record for _, record in _jsonl_records(target)]
