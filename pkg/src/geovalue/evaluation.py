"""Regression metrics, result tables, and the F vs F+I improvement ranking."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SPLIT_LABELS = {"train": "Train", "val": "Dev", "test": "Test"}

UNDERESTIMATION = "corrected_underestimation"
OVERESTIMATION = "corrected_overestimation"
REGRESSED = "regressed"


def _pair(y_hat, y):
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if y_hat.shape != y.shape:
        raise ValueError(f"length mismatch: {y_hat.shape[0]} predictions, {y.shape[0]} labels")
    if y.size == 0:
        raise ValueError("empty input")
    return y_hat, y


def mse(y_hat, y) -> float:
    y_hat, y = _pair(y_hat, y)
    return float(np.mean((y_hat - y) ** 2))


def label_variance(y) -> float:
    """Population variance of the labels (the ``S`` in ``R² = 1 - MSE/S``)."""
    y = np.asarray(y, dtype=np.float64).ravel()
    return float(np.mean((y - y.mean()) ** 2))


def r_squared(y_hat, y) -> float:
    """``1 - MSE / Var(y)``; NaN when the labels are constant (R² undefined)."""
    y_hat, y = _pair(y_hat, y)
    s = label_variance(y)
    if s == 0.0:
        return math.nan
    return 1.0 - mse(y_hat, y) / s


@dataclass(frozen=True)
class SplitMetrics:
    mse: float
    r2: float
    s: float
    n: int


def split_metrics(y_hat, y) -> SplitMetrics:
    y_hat, y = _pair(y_hat, y)
    err = mse(y_hat, y)
    s = label_variance(y)
    return SplitMetrics(err, math.nan if s == 0.0 else 1.0 - err / s, s, int(y.size))


@dataclass
class EvalReport:
    model: str
    splits: dict[str, SplitMetrics] = field(default_factory=dict)


def evaluate(model: str, predictions: Mapping[str, np.ndarray],
             labels: Mapping[str, np.ndarray]) -> EvalReport:
    return EvalReport(model, {k: split_metrics(predictions[k], labels[k])
                              for k in SPLITS if k in predictions})


@dataclass(frozen=True)
class ImprovementRecord:
    id: str
    y: float
    pred_f: float
    pred_fi: float
    delta: float
    direction: str


def improvement_records(ids: Sequence[str], preds_f, preds_fi, labels) -> list[ImprovementRecord]:
    """All records sorted by absolute-error reduction (descending), ties by id."""
    preds_f = np.asarray(preds_f, dtype=np.float64)
    preds_fi = np.asarray(preds_fi, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if not (len(ids) == preds_f.size == preds_fi.size == labels.size):
        raise ValueError("ids, predictions and labels are not aligned")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids")
    records = []
    for rid, yf, yfi, y in zip(ids, preds_f, preds_fi, labels):
        delta = abs(yf - y) - abs(yfi - y)
        if delta <= 0:
            direction = REGRESSED
        elif yf < y:
            direction = UNDERESTIMATION
        else:
            direction = OVERESTIMATION
        records.append(ImprovementRecord(str(rid), float(y), float(yf), float(yfi),
                                         float(delta), direction))
    records.sort(key=lambda r: (-r.delta, r.id))
    return records


def rank_improvements(ids, preds_f, preds_fi, labels, k: int = 5):
    """Top-``k`` records where F+I fixed an underestimate, and top-``k`` where it
    fixed an overestimate. Fewer are returned when fewer exist."""
    records = improvement_records(ids, preds_f, preds_fi, labels)
    under = [r for r in records if r.direction == UNDERESTIMATION][:k]
    over = [r for r in records if r.direction == OVERESTIMATION][:k]
    return under, over


REPORT_COLUMNS = ("model", "train_r2", "dev_r2", "test_r2", "train_mse", "dev_mse", "test_mse")
IMPROVEMENT_COLUMNS = ("group", "rank", "id", "y", "pred_f", "pred_fi", "delta", "direction")


def _row(report: EvalReport) -> list:
    row = [report.model]
    for attr in ("r2", "mse"):
        for split in SPLITS:
            m = report.splits.get(split)
            row.append(getattr(m, attr) if m else math.nan)
    return row


def format_table(reports: Sequence[EvalReport]) -> str:
    header = ["Model"] + [f"{SPLIT_LABELS[s]} R2" for s in SPLITS] + \
             [f"{SPLIT_LABELS[s]} MSE" for s in SPLITS]
    body = [[r[0]] + [f"{v:.4f}" for v in r[1:]] for r in map(_row, reports)]
    widths = [max(len(str(c)) for c in col) for col in zip(header, *body)]
    lines = ["  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                       for i, (c, w) in enumerate(zip(line, widths)))
             for line in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_results_table(reports: Sequence[EvalReport], out_dir) -> list[Path]:
    """``report.csv`` plus an aligned ``report.txt`` with one row per model."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        for report in reports:
            w.writerow([v if isinstance(v, str) else repr(v) for v in _row(report)])
    (out / "report.txt").write_text(format_table(reports))
    return [out / "report.csv", out / "report.txt"]


def write_improvements(improvements, out_dir,
                       tiles: Mapping[str, Path] | None = None) -> list[Path]:
    """``improvements.csv`` for an ``(under, over)`` pair; montages when ``tiles``
    maps ids to cached images (nothing is fetched here)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    under, over = improvements
    with open(out / "improvements.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(IMPROVEMENT_COLUMNS)
        for group, recs in (("top", under), ("bottom", over)):
            for rank, r in enumerate(recs, 1):
                w.writerow([group, rank, r.id, repr(r.y), repr(r.pred_f), repr(r.pred_fi),
                            repr(r.delta), r.direction])
    written = [out / "improvements.csv"]
    if tiles:
        for name, recs in (("montage_top.png", under), ("montage_bottom.png", over)):
            paths = [Path(tiles[r.id]) for r in recs if r.id in tiles and Path(tiles[r.id]).exists()]
            if paths:
                montage(paths, out / name)
                written.append(out / name)
    return written


def emit_report(reports: Sequence[EvalReport], improvements=None, out_dir=".",
                tiles: Mapping[str, Path] | None = None) -> list[Path]:
    written = write_results_table(reports, out_dir)
    if improvements is not None:
        written += write_improvements(improvements, out_dir, tiles)
    return written


def montage(paths: Sequence[Path], dest, thumb: int = 200) -> None:
    """Lay cached tiles side by side in one row."""
    from PIL import Image

    canvas = Image.new("RGB", (thumb * len(paths), thumb), "white")
    for i, p in enumerate(paths):
        with Image.open(p) as im:
            canvas.paste(im.convert("RGB").resize((thumb, thumb), Image.BILINEAR), (i * thumb, 0))
    canvas.save(dest, format="PNG")
