"""Classification and reconstruction scoring, plus the FL-vs-centralized report.

Zero-denominator conventions are explicit: precision and recall are 0 when
their denominators are 0, and F1 is 0 whenever precision + recall is 0, so
F1 == 0 exactly when there are no true positives.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabelSet


@dataclass(frozen=True)
class ClassificationScores:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "ClassificationScores":
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = (2.0 * precision * recall / (precision + recall)
              if precision + recall > 0 else 0.0)
        return cls(tp=tp, fp=fp, fn=fn, precision=precision, recall=recall, f1=f1)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": self.precision, "recall": self.recall, "f1": self.f1}


def prf1(pred: LabelSet, truth: LabelSet,
         mask: np.ndarray | None = None) -> ClassificationScores:
    """Counts over all (cell, signal, t) triples, optionally region-masked."""
    if pred.flags.shape != truth.flags.shape:
        raise ValueError("label shapes differ")
    p = pred.flags
    t = truth.flags
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != p.shape:
            raise ValueError("mask shape differs from labels")
        p = p & mask
        t = t & mask
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    return ClassificationScores.from_counts(tp, fp, fn)


def mse_metric(pred: np.ndarray, target: np.ndarray,
               mask: np.ndarray | None = None) -> float:
    """Mean squared error over (optionally masked) points."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("shapes differ")
    diff = pred - target
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != diff.shape:
            raise ValueError("mask shape differs")
        diff = diff[mask]
        if diff.size == 0:
            raise ValueError("mask selects no points")
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# FL vs centralized comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlRunSummary:
    """What one FL strategy run contributes to the comparison table."""

    strategy: str
    final_mse: float
    detections: LabelSet
    footprint: float
    panel_hash: str
    dataset_id: int = 0


def fl_vs_cl_report(fl_runs: list[FlRunSummary], cl_reference: LabelSet,
                    cl_mse: float, cl_panel_hash: str,
                    mask: np.ndarray | None = None) -> list[dict]:
    """Score FL detections against the centralized run's detections.

    The centralized labels act as the reference (not ground truth), so the
    table reads as "how closely does FL match the centralized pipeline",
    alongside loss ratios and the communication footprint.
    """
    rows = []
    for run in fl_runs:
        if run.panel_hash != cl_panel_hash:
            raise ValueError(f"run {run.strategy!r} was produced on a different panel "
                             "than the centralized reference")
        scores = prf1(run.detections, cl_reference, mask=mask)
        rows.append({
            "strategy": run.strategy,
            "dataset": run.dataset_id,
            "loss": run.final_mse,
            "loss_ratio_vs_cl": run.final_mse / cl_mse if cl_mse > 0 else float("inf"),
            "precision": scores.precision,
            "recall": scores.recall,
            "f1": scores.f1,
            "footprint": run.footprint,
        })
    return rows


REPORT_COLUMNS = ["strategy", "dataset", "loss", "loss_ratio_vs_cl",
                  "precision", "recall", "f1", "footprint"]


def write_report_csv(rows: list[dict], path: str | Path,
                     columns: list[str] | None = None) -> None:
    columns = columns or REPORT_COLUMNS
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(col)) for col in columns])


def write_report_json(rows: list[dict], path: str | Path) -> None:
    Path(path).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)
