from __future__ import annotations

import threading
from pathlib import Path
from typing import Dict, Iterable, List

import pandas as pd

from cli.utils import compact_json
from m2at.schemas.config import PIXEL_SCALE
from m2at.schemas.records import CurvePoint, EvalReport, MetricsRecord, SweepPoint, TransferReport

SWEEP_COLUMNS = ["series", "epsilon", "alpha", "attack", "accuracy"]
TRANSFER_COLUMNS = ["defender", "attacker", "attack", "correct", "total", "accuracy", "white_box"]
CURVE_COLUMNS = ["series", "epoch", "attack", "accuracy"]


class MetricsLog:
    """Append-only JSONL log; one MetricsRecord per line, flushed per write."""

    def __init__(self, path: Path, fresh: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._handle = open(self.path, "w" if fresh else "a", encoding="utf-8")
        self.count = 0

    def write(self, record: MetricsRecord) -> None:
        line = compact_json(record.model_dump(mode="json"))
        with self._lock:
            self._handle.write(line + "\n")
            self._handle.flush()
            self.count += 1

    __call__ = write

    def close(self) -> None:
        with self._lock:
            if not self._handle.closed:
                self._handle.flush()
                self._handle.close()

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: Path) -> List[MetricsRecord]:
    with open(path, "r", encoding="utf-8") as handle:
        return [MetricsRecord.model_validate_json(line) for line in handle if line.strip()]


def _write_rows(rows: List[Dict], columns: List[str], out_dir: Path, name: str, parquet: bool) -> List[Path]:
    """Write ``rows`` as <name>.jsonl and <name>.csv (plus parquet when asked)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl_path = out_dir / f"{name}.jsonl"
    with open(jsonl_path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(compact_json(row) + "\n")
    df = pd.DataFrame(rows, columns=columns)
    csv_path = out_dir / f"{name}.csv"
    df.to_csv(csv_path, index=False)
    paths = [jsonl_path, csv_path]
    if parquet:
        parquet_path = out_dir / f"{name}.parquet"
        df.to_parquet(parquet_path, index=False)
        paths.append(parquet_path)
    return paths


def eval_rows(report: EvalReport) -> List[Dict]:
    rows = []
    for entry in report.entries:
        row = entry.model_dump(mode="json")
        row.update(
            series=report.model_id,
            epsilon=round(entry.epsilon * PIXEL_SCALE, 6),
            alpha=round(entry.step_size * PIXEL_SCALE, 6),
            seed=report.seed,
        )
        row.pop("step_size", None)
        rows.append(row)
    return rows


def write_eval_report(report: EvalReport, out_dir: Path, name: str = "eval", parquet: bool = False) -> List[Path]:
    """JSONL keeps exact counts; the CSV shares the sweep columns."""
    return _write_rows(eval_rows(report), SWEEP_COLUMNS, out_dir, name, parquet)


def write_sweep_report(points: List[SweepPoint], out_dir: Path, name: str = "sweep", parquet: bool = False) -> List[Path]:
    return _write_rows([p.model_dump(mode="json") for p in points], SWEEP_COLUMNS, out_dir, name, parquet)


def transfer_rows(report: TransferReport) -> List[Dict]:
    rows = []
    for defender in report.models:
        for attacker in report.models:
            rows.append(
                {
                    "defender": defender,
                    "attacker": attacker,
                    "attack": report.attack,
                    "correct": report.correct[defender][attacker],
                    "total": report.n_samples,
                    "accuracy": report.accuracy[defender][attacker],
                    "white_box": defender == attacker,
                }
            )
    return rows


def write_transfer_report(report: TransferReport, out_dir: Path, name: str = "transfer", parquet: bool = False) -> List[Path]:
    return _write_rows(transfer_rows(report), TRANSFER_COLUMNS, out_dir, name, parquet)



def curve_points(records: Iterable[MetricsRecord], series: str) -> List[CurvePoint]:
    """Per-epoch eval accuracies of one run, ordered by epoch then first appearance of the attack."""
    points = [
        CurvePoint(series=series, epoch=r.epoch, attack=r.attack, accuracy=r.value)
        for r in records
        if r.phase == "eval" and r.metric == "accuracy" and r.attack is not None and r.epoch is not None
    ]
    return sorted(points, key=lambda p: p.epoch)


def write_curve_report(points: List[CurvePoint], out_dir: Path, name: str = "curves", parquet: bool = False) -> List[Path]:
    return _write_rows([p.model_dump(mode="json") for p in points], CURVE_COLUMNS, out_dir, name, parquet)
