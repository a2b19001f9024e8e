"""Residual-based anomaly decision: z-score and generalized ESD tests.

Detection operates on |prediction - observation| residual series, one series
per (cell, signal).  Points never covered by a forecast window (the first
``history`` steps) are not evaluable and are never flagged.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import betaincinv

from .data import LabelSet, TimeSeriesPanel, WindowBatch
from .model import GConvLSTMForecaster

MAD_TO_STD = 1.4826  # 1 / Phi^-1(0.75): MAD of a normal law times this is sigma

METHODS = ("zscore", "esd")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DetectorConfig:
    z_threshold: float = 3.0
    esd_alpha: float = 0.05
    esd_kmax_frac: float = 0.10
    robust: bool = False
    method_map: dict | None = None

    def __post_init__(self):
        if self.z_threshold <= 0.0:
            raise ValueError("z_threshold must be > 0")
        if not 0.0 < self.esd_alpha < 1.0:
            raise ValueError("esd_alpha must lie in (0, 1)")
        if not 0.0 < self.esd_kmax_frac <= 0.5:
            raise ValueError("esd_kmax_frac must lie in (0, 0.5]")
        if self.method_map is not None:
            for sig, method in self.method_map.items():
                if method not in METHODS:
                    raise ValueError(f"unknown method {method!r} for signal {sig!r}")

    def method_for(self, signal: str) -> str:
        if self.method_map is None:
            return "zscore"
        if signal not in self.method_map:
            raise ValueError(f"method_map has no entry for signal {signal!r}")
        return self.method_map[signal]


@dataclass(frozen=True)
class ResidualPanel:
    """Absolute forecast errors; NaN marks points outside any window."""

    values: np.ndarray
    cell_ids: tuple[str, ...]
    signal_names: tuple[str, ...]
    timestamps: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3:
            raise ValueError("residual values must be (n_cells, K, T)")
        finite = np.isfinite(vals)
        if (vals[finite] < 0.0).any():
            raise ValueError("residuals must be nonnegative")
        object.__setattr__(self, "values", _freeze(vals))
        object.__setattr__(self, "timestamps", _freeze(np.asarray(self.timestamps)))

    @property
    def evaluable(self) -> np.ndarray:
        return np.isfinite(self.values)


def residuals(model: GConvLSTMForecaster, panel: TimeSeriesPanel,
              windows: list[WindowBatch]) -> ResidualPanel:
    """Elementwise |forecast - observation| over all window targets.

    Overlapping horizons keep the prediction from the latest window (the one
    trained on the freshest history).
    """
    values = np.full(panel.values.shape, np.nan)
    k = panel.n_signals
    for batch in windows:
        pred = model.forward(batch)
        for s, (ci, start) in enumerate(batch.samples):
            for hz in range(batch.horizon):
                t = start + batch.history + hz
                obs = panel.values[ci, :, t]
                values[ci, :, t] = np.abs(pred[s * k:(s + 1) * k, 0, hz] - obs)
    return ResidualPanel(values=values, cell_ids=tuple(panel.cell_ids()),
                         signal_names=panel.signal_names, timestamps=panel.timestamps)


# ---------------------------------------------------------------------------
# univariate tests
# ---------------------------------------------------------------------------

def zscore_scores(series: np.ndarray) -> np.ndarray:
    """|x - mean| / std with ddof=1; a constant series scores all zeros."""
    x = np.asarray(series, dtype=np.float64)
    if x.size < 2:
        raise ValueError("z-score needs at least 2 points")
    std = x.std(ddof=1)
    if std == 0.0:
        return np.zeros_like(x)
    return np.abs(x - x.mean()) / std


def zscore_detect(series: np.ndarray, threshold: float = 3.0) -> np.ndarray:
    """Flag points with z-score strictly above the threshold."""
    return zscore_scores(series) > threshold


def t_quantile(p: float, df: float) -> float:
    """Student-t inverse CDF via the inverse regularized incomplete beta.

    For t >= 0: P(|T| > t) = I_x(df/2, 1/2) with x = df/(df + t^2), so the
    upper-tail quantile solves I_x = 2(1 - p).
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if df < 1.0:
        raise ValueError("df must be >= 1")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, df)
    x = float(betaincinv(df / 2.0, 0.5, 2.0 * (1.0 - p)))
    return float(np.sqrt(df * (1.0 - x) / x))


def esd_critical(n: int, i: int, alpha: float) -> float:
    """Rosner's critical value for the i-th extreme studentized deviate."""
    p = 1.0 - alpha / (2.0 * (n - i + 1))
    t = t_quantile(p, n - i - 1)
    return (n - i) * t / np.sqrt((n - i - 1 + t * t) * (n - i + 1))


@dataclass(frozen=True)
class EsdResult:
    flags: np.ndarray
    scores: np.ndarray          # R_i at each removed candidate, 0 elsewhere
    n_flagged: int
    candidates: tuple[int, ...]  # removal order


def esd_test(series: np.ndarray, alpha: float = 0.05, k_max: int | None = None,
             robust: bool = False) -> EsdResult:
    """Generalized ESD with streaming mean/variance updates.

    Classical estimators are maintained incrementally (sum and sum of
    squares, one subtraction per removal); the robust variant recomputes
    median and scaled MAD on the surviving points each iteration.  A zero
    MAD falls back to the classical estimators with a warning.
    """
    x = np.asarray(series, dtype=np.float64)
    n = x.size
    if k_max is None:
        k_max = max(1, int(0.10 * n))
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if n <= k_max + 2:
        raise ValueError(f"need more than k_max + 2 = {k_max + 2} points, got {n}")

    active = np.ones(n, dtype=bool)
    dev = np.empty(n)
    removed: list[int] = []
    r_values: list[float] = []
    s1 = float(x.sum())
    s2 = float((x * x).sum())
    m = n
    for _ in range(k_max):
        if robust:
            rem = x[active]
            center = float(np.median(rem))
            mad = float(np.median(np.abs(rem - center)))
            if mad == 0.0:
                warnings.warn("MAD is zero; falling back to classical ESD estimators")
                return esd_test(series, alpha, k_max, robust=False)
            spread = MAD_TO_STD * mad
        else:
            center = s1 / m
            var = (s2 - s1 * s1 / m) / (m - 1)
            spread = float(np.sqrt(max(var, 0.0)))
            if spread == 0.0:
                break  # remaining points are constant: no deviate to test
        np.abs(x - center, out=dev)
        dev[~active] = -np.inf
        j = int(np.argmax(dev))
        removed.append(j)
        r_values.append(dev[j] / spread)
        active[j] = False
        s1 -= x[j]
        s2 -= x[j] * x[j]
        m -= 1

    n_flagged = 0
    for i in range(1, len(removed) + 1):
        if r_values[i - 1] > esd_critical(n, i, alpha):
            n_flagged = i
    flags = np.zeros(n, dtype=bool)
    scores = np.zeros(n)
    for i, j in enumerate(removed):
        scores[j] = r_values[i]
    flags[removed[:n_flagged]] = True
    return EsdResult(flags=flags, scores=scores, n_flagged=n_flagged,
                     candidates=tuple(removed))


def esd_detect(series: np.ndarray, alpha: float = 0.05, k_max: int | None = None,
               robust: bool = False) -> np.ndarray:
    return esd_test(series, alpha, k_max, robust).flags


# ---------------------------------------------------------------------------
# panel-level application
# ---------------------------------------------------------------------------

def _f1(pred: np.ndarray, truth: np.ndarray) -> float:
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def calibrate_methods(res: ResidualPanel, validation_labels: LabelSet | None,
                      cfg: DetectorConfig | None = None) -> dict[str, str]:
    """Pick zscore vs esd per signal by F1 on labeled validation residuals.

    Ties go to zscore; with no labeled data every signal defaults to zscore
    (with a warning).
    """
    cfg = cfg or DetectorConfig()
    signals = res.signal_names
    if validation_labels is None or not validation_labels.flags.any():
        warnings.warn("no labeled validation data; defaulting every signal to zscore")
        return {sig: "zscore" for sig in signals}
    ev = res.evaluable
    method_map = {}
    for k, sig in enumerate(signals):
        scores = {}
        for method in METHODS:
            pred = np.zeros(res.values.shape[:1] + res.values.shape[2:], dtype=bool)
            truth = np.zeros_like(pred)
            for ci in range(res.values.shape[0]):
                mask = ev[ci, k]
                series = res.values[ci, k][mask]
                truth[ci, mask] = validation_labels.flags[ci, k][mask]
                if series.size < 2:
                    continue
                pred[ci, mask] = _apply_method(series, method, cfg)
            scores[method] = _f1(pred, truth)
        method_map[sig] = "esd" if scores["esd"] > scores["zscore"] else "zscore"
    return method_map


def _apply_method(series: np.ndarray, method: str, cfg: DetectorConfig) -> np.ndarray:
    if method == "zscore":
        return zscore_detect(series, cfg.z_threshold)
    k_max = max(1, int(cfg.esd_kmax_frac * series.size))
    if series.size <= k_max + 2:
        return np.zeros(series.size, dtype=bool)
    return esd_test(series, cfg.esd_alpha, k_max, cfg.robust).flags


def _apply_method_scored(series: np.ndarray, method: str,
                         cfg: DetectorConfig) -> tuple[np.ndarray, np.ndarray]:
    if method == "zscore":
        z = zscore_scores(series)
        return z > cfg.z_threshold, z
    k_max = max(1, int(cfg.esd_kmax_frac * series.size))
    if series.size <= k_max + 2:
        return np.zeros(series.size, dtype=bool), np.zeros(series.size)
    result = esd_test(series, cfg.esd_alpha, k_max, cfg.robust)
    return result.flags, result.scores


@dataclass(frozen=True)
class DetectionResult:
    labels: LabelSet
    scores: np.ndarray
    methods: dict[str, str] = field(default_factory=dict)


def detect_panel_scored(res: ResidualPanel, cfg: DetectorConfig) -> DetectionResult:
    """Run the per-signal mapped detector over every (cell, signal) series."""
    n, k, t = res.values.shape
    flags = np.zeros((n, k, t), dtype=bool)
    scores = np.zeros((n, k, t))
    ev = res.evaluable
    methods = {sig: cfg.method_for(sig) for sig in res.signal_names}
    for ci in range(n):
        for ki, sig in enumerate(res.signal_names):
            mask = ev[ci, ki]
            series = res.values[ci, ki][mask]
            if series.size < 2:
                continue
            f, s = _apply_method_scored(series, methods[sig], cfg)
            flags[ci, ki, mask] = f
            scores[ci, ki, mask] = s
    labels = LabelSet(flags=flags, cell_ids=res.cell_ids,
                      signal_names=res.signal_names, timestamps=res.timestamps)
    return DetectionResult(labels=labels, scores=scores, methods=methods)


def detect_panel(res: ResidualPanel, cfg: DetectorConfig) -> LabelSet:
    return detect_panel_scored(res, cfg).labels


def save_detections_csv(res: ResidualPanel, result: DetectionResult,
                        path: str | Path) -> None:
    """One row per evaluable (cell, signal, timestamp): flag, score, method."""
    ev = res.evaluable
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "signal", "timestamp", "flag", "score", "method"])
        for ci, cid in enumerate(res.cell_ids):
            for ki, sig in enumerate(res.signal_names):
                method = result.methods[sig]
                for ti in np.flatnonzero(ev[ci, ki]):
                    writer.writerow([cid, sig, str(res.timestamps[ti]),
                                     int(result.labels.flags[ci, ki, ti]),
                                     repr(float(result.scores[ci, ki, ti])), method])
