"""Synthetic telemetry panels, CSV ingestion, scaling, annotation, windowing.

A panel holds one K x T value matrix per cell, all cells sharing the same
timestamp axis.  Anomaly annotation follows a Bernoulli-per-point procedure
with configurable degradation scenarios and optional one-hop propagation
along the counter execution graph.
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .graphs import AREAS, CellMeta, SwGraph, BatchedGraph, chain_sw_graph, disjoint_union_batch

IQR_EPS = 1e-8
# Consistency factor turning an IQR into a std estimate for a normal law:
# IQR = 2 * Phi^-1(0.75) * sigma ~= 1.349 * sigma.
IQR_TO_STD = 1.349

SCENARIOS = ("spike", "drop_to_zero", "level_shift")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeSeriesPanel:
    """Counter telemetry for N cells: values is (n_cells, K, T)."""

    values: np.ndarray
    timestamps: np.ndarray
    cells: tuple[CellMeta, ...]
    signal_names: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3:
            raise ValueError(f"values must be (n_cells, K, T), got shape {vals.shape}")
        n, k, t = vals.shape
        if len(self.cells) != n:
            raise ValueError("cells length does not match values")
        if len(self.signal_names) != k:
            raise ValueError("signal_names length does not match values")
        ts = np.asarray(self.timestamps)
        if ts.shape != (t,):
            raise ValueError("timestamps length does not match values")
        if t > 1 and not (ts[1:] > ts[:-1]).all():
            raise ValueError("timestamps must be strictly increasing")
        if not np.isfinite(vals).all():
            raise ValueError("panel contains non-finite values")
        object.__setattr__(self, "values", _freeze(vals))
        object.__setattr__(self, "timestamps", _freeze(ts))

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_signals(self) -> int:
        return self.values.shape[1]

    @property
    def n_steps(self) -> int:
        return self.values.shape[2]

    def cell_ids(self) -> list[str]:
        return [c.id for c in self.cells]

    def cell_panel(self, index: int) -> "TimeSeriesPanel":
        """Single-cell view (used to hand each federated client its own slice)."""
        return TimeSeriesPanel(values=self.values[index:index + 1].copy(),
                               timestamps=self.timestamps,
                               cells=(self.cells[index],),
                               signal_names=self.signal_names,
                               meta=dict(self.meta))

    def identity_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.values.tobytes())
        h.update(np.asarray(self.timestamps, dtype="datetime64[s]").tobytes())
        h.update(",".join(self.cell_ids()).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class LabelSet:
    """Boolean anomaly flags aligned with a panel: flags is (n_cells, K, T)."""

    flags: np.ndarray
    cell_ids: tuple[str, ...]
    signal_names: tuple[str, ...]
    timestamps: np.ndarray

    def __post_init__(self):
        fl = np.asarray(self.flags, dtype=bool)
        if fl.ndim != 3:
            raise ValueError(f"flags must be (n_cells, K, T), got shape {fl.shape}")
        n, k, t = fl.shape
        if len(self.cell_ids) != n or len(self.signal_names) != k:
            raise ValueError("label axes do not match flags")
        ts = np.asarray(self.timestamps)
        if ts.shape != (t,):
            raise ValueError("timestamps length does not match flags")
        object.__setattr__(self, "flags", _freeze(fl))
        object.__setattr__(self, "timestamps", _freeze(ts))

    @property
    def n_flags(self) -> int:
        return int(self.flags.sum())

    def same_axes(self, other: "LabelSet") -> bool:
        return (self.flags.shape == other.flags.shape
                and self.cell_ids == other.cell_ids
                and self.signal_names == other.signal_names
                and bool((np.asarray(self.timestamps) == np.asarray(other.timestamps)).all()))


def empty_labels(panel: TimeSeriesPanel) -> LabelSet:
    return LabelSet(flags=np.zeros(panel.values.shape, dtype=bool),
                    cell_ids=tuple(panel.cell_ids()),
                    signal_names=panel.signal_names,
                    timestamps=panel.timestamps)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorProfile:
    """Knobs of the synthetic telemetry generator.

    Each signal is a daily sinusoid (period 96 steps at 15-minute sampling)
    on a per-(cell, signal) baseline, plus Gaussian flow noise correlated one
    step forward along the counter-graph edges.
    """

    base_range: tuple[float, float] = (20.0, 80.0)
    area_scale: tuple[tuple[str, float], ...] = (("airport", 1.4), ("downtown", 1.0), ("rural", 0.7))
    amp_frac_range: tuple[float, float] = (0.2, 0.5)
    noise_scale: float = 0.1
    coupling: float = 0.5
    period: int = 96
    start: str = "2024-01-01T00:00:00"
    step_minutes: int = 15

    def scale_for(self, area: str) -> float:
        return dict(self.area_scale)[area]


def default_cells(n_cells: int) -> tuple[CellMeta, ...]:
    """Cells split across areas in roughly 12:29:26 proportions.

    Positions are laid out deterministically on a grid around one center per
    area, so the radius topology rule has something to chew on.
    """
    n_air = int(round(n_cells * 12 / 67))
    n_down = int(round(n_cells * 29 / 67))
    counts = {"airport": n_air, "downtown": n_down, "rural": n_cells - n_air - n_down}
    centers = {"airport": (0.0, 0.0), "downtown": (20.0, 0.0), "rural": (40.0, 25.0)}
    cells = []
    i = 0
    for area in AREAS:
        cx, cy = centers[area]
        for j in range(counts[area]):
            pos = (cx + (j % 5) * 1.0, cy + (j // 5) * 1.0)
            cells.append(CellMeta(id=f"cell_{i:02d}", area=area, position=pos))
            i += 1
    return tuple(cells)


def generate_synthetic_panel(n_cells: int, n_signals: int, n_steps: int, seed: int,
                             profile: GeneratorProfile | None = None,
                             sw_graph: SwGraph | None = None,
                             cells: Sequence[CellMeta] | None = None) -> TimeSeriesPanel:
    """Deterministic synthetic panel; same seed gives bit-identical output."""
    if n_cells < 1 or n_signals < 1 or n_steps < 1:
        raise ValueError("n_cells, n_signals and n_steps must all be >= 1")
    profile = profile or GeneratorProfile()
    if sw_graph is None:
        sw_graph = chain_sw_graph(n_signals)
    if sw_graph.n_nodes != n_signals:
        raise ValueError("sw_graph node count does not match n_signals")
    cells = tuple(cells) if cells is not None else default_cells(n_cells)
    if len(cells) != n_cells:
        raise ValueError("cells length does not match n_cells")

    rng = np.random.default_rng(seed)
    scale = np.asarray([profile.scale_for(c.area) for c in cells])
    # Draw order is part of the determinism contract: base, amplitude
    # fraction, phase, then the full noise tensor, each in one call.
    base = rng.uniform(*profile.base_range, size=(n_cells, n_signals)) * scale[:, None]
    amp = base * rng.uniform(*profile.amp_frac_range, size=(n_cells, n_signals))
    phase = rng.uniform(0.0, profile.period, size=(n_cells, n_signals))
    eps = rng.standard_normal((n_cells, n_signals, n_steps))

    # Flow noise: own innovation plus the one-step-lagged innovations of the
    # counters feeding this one, so connected signals co-move.
    flow = eps.copy()
    for src, dst in sw_graph.edges:
        flow[:, dst, 1:] += profile.coupling * eps[:, src, :-1]

    t = np.arange(n_steps)
    seasonal = np.sin(2.0 * np.pi * (t[None, None, :] + phase[:, :, None]) / profile.period)
    sigma = profile.noise_scale * amp
    values = base[:, :, None] + amp[:, :, None] * seasonal + sigma[:, :, None] * flow

    start = np.datetime64(profile.start, "s")
    timestamps = start + np.arange(n_steps) * np.timedelta64(profile.step_minutes * 60, "s")
    names = tuple(sw_graph.node_names)
    meta = {"scaled": False,
            "generator": {"seed": int(seed), "noise_scale": profile.noise_scale,
                          "coupling": profile.coupling, "period": profile.period}}
    return TimeSeriesPanel(values=values, timestamps=timestamps, cells=cells,
                           signal_names=names, meta=meta)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _expect_header(header: list[str], n_signals: int | None = None) -> list[str]:
    if not header or header[0] != "timestamp":
        raise ValueError("missing timestamp column")
    if len(header) < 3 or header[1] != "cell_id":
        raise ValueError("header must be timestamp,cell_id,signal_...")
    names = header[2:]
    if n_signals is not None and len(names) != n_signals:
        raise ValueError(f"expected {n_signals} signal columns, found {len(names)}")
    return names


def save_panel_csv(panel: TimeSeriesPanel, path: str | Path) -> None:
    """Rows ordered by timestamp then cell; floats written in repr precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "cell_id"] + list(panel.signal_names))
        ids = panel.cell_ids()
        for ti in range(panel.n_steps):
            ts = str(panel.timestamps[ti])
            for ci in range(panel.n_cells):
                row = [ts, ids[ci]] + [repr(float(v)) for v in panel.values[ci, :, ti]]
                writer.writerow(row)


def load_panel_csv(path: str | Path, cells: Sequence[CellMeta] | None = None) -> TimeSeriesPanel:
    """Read a panel; cells keep first-appearance order, signals header order.

    Cell metadata (area, position) is not part of the CSV; pass ``cells`` to
    attach it, otherwise every cell defaults to the downtown area.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("missing timestamp column") from None
        names = _expect_header(header)
        k = len(names)
        per_cell: dict[str, list[tuple[str, list[float]]]] = {}
        for r, row in enumerate(reader, start=1):
            if len(row) != 2 + k:
                raise ValueError(f"ragged row at row {r}")
            vals = []
            for tok in row[2:]:
                try:
                    v = float(tok)
                except ValueError:
                    raise ValueError(f"non-numeric value at row {r}") from None
                if not np.isfinite(v):
                    raise ValueError(f"non-numeric value at row {r}")
                vals.append(v)
            per_cell.setdefault(row[1], []).append((row[0], vals))
    if not per_cell:
        raise ValueError("no data rows")
    ids = list(per_cell)
    ts_ref = [t for t, _ in per_cell[ids[0]]]
    for cid, rows in per_cell.items():
        if [t for t, _ in rows] != ts_ref:
            raise ValueError(f"cell {cid!r} timestamps do not match the first cell")
    values = np.empty((len(ids), k, len(ts_ref)))
    for ci, cid in enumerate(ids):
        for ti, (_, vals) in enumerate(per_cell[cid]):
            values[ci, :, ti] = vals
    timestamps = np.array([np.datetime64(t, "s") for t in ts_ref])
    if cells is not None:
        cells = tuple(cells)
        if [c.id for c in cells] != ids:
            raise ValueError("provided cells do not match CSV cell ids")
    else:
        cells = tuple(CellMeta(id=cid) for cid in ids)
    return TimeSeriesPanel(values=values, timestamps=timestamps, cells=cells,
                           signal_names=tuple(names), meta={"scaled": False})


def save_labels_csv(labels: LabelSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "cell_id"] + list(labels.signal_names))
        n, k, t = labels.flags.shape
        for ti in range(t):
            ts = str(labels.timestamps[ti])
            for ci in range(n):
                row = [ts, labels.cell_ids[ci]] + ["1" if f else "0" for f in labels.flags[ci, :, ti]]
                writer.writerow(row)


def load_labels_csv(path: str | Path) -> LabelSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("missing timestamp column") from None
        names = _expect_header(header)
        k = len(names)
        per_cell: dict[str, list[tuple[str, list[bool]]]] = {}
        for r, row in enumerate(reader, start=1):
            if len(row) != 2 + k:
                raise ValueError(f"ragged row at row {r}")
            if any(tok not in ("0", "1") for tok in row[2:]):
                raise ValueError(f"non-binary label at row {r}")
            per_cell.setdefault(row[1], []).append((row[0], [tok == "1" for tok in row[2:]]))
    if not per_cell:
        raise ValueError("no data rows")
    ids = list(per_cell)
    ts_ref = [t for t, _ in per_cell[ids[0]]]
    flags = np.zeros((len(ids), k, len(ts_ref)), dtype=bool)
    for ci, cid in enumerate(ids):
        rows = per_cell[cid]
        if [t for t, _ in rows] != ts_ref:
            raise ValueError(f"cell {cid!r} timestamps do not match the first cell")
        for ti, (_, vals) in enumerate(rows):
            flags[ci, :, ti] = vals
    timestamps = np.array([np.datetime64(t, "s") for t in ts_ref])
    return LabelSet(flags=flags, cell_ids=tuple(ids), signal_names=tuple(names),
                    timestamps=timestamps)


# ---------------------------------------------------------------------------
# robust scaling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalerParams:
    """Per-(cell, signal) median and epsilon-floored IQR."""

    median: np.ndarray
    iqr: np.ndarray

    def __post_init__(self):
        med = np.asarray(self.median, dtype=np.float64)
        iqr = np.asarray(self.iqr, dtype=np.float64)
        if med.shape != iqr.shape or med.ndim != 2:
            raise ValueError("median and iqr must share a (n_cells, K) shape")
        if (iqr < IQR_EPS).any():
            raise ValueError(f"iqr entries must be >= {IQR_EPS}")
        object.__setattr__(self, "median", _freeze(med))
        object.__setattr__(self, "iqr", _freeze(iqr))


def robust_scale(panel: TimeSeriesPanel) -> tuple[TimeSeriesPanel, ScalerParams]:
    """x' = (x - median) / max(IQR, eps), per cell per signal over time."""
    if panel.n_steps < 2:
        raise ValueError("robust scaling needs at least 2 time steps")
    med = np.median(panel.values, axis=2)
    q25, q75 = np.percentile(panel.values, [25.0, 75.0], axis=2)
    iqr = np.maximum(q75 - q25, IQR_EPS)
    scaled = (panel.values - med[:, :, None]) / iqr[:, :, None]
    meta = dict(panel.meta)
    meta["scaled"] = True
    out = TimeSeriesPanel(values=scaled, timestamps=panel.timestamps, cells=panel.cells,
                          signal_names=panel.signal_names, meta=meta)
    return out, ScalerParams(median=med, iqr=iqr)


def robust_unscale(panel: TimeSeriesPanel, params: ScalerParams) -> TimeSeriesPanel:
    values = panel.values * params.iqr[:, :, None] + params.median[:, :, None]
    meta = dict(panel.meta)
    meta["scaled"] = False
    return TimeSeriesPanel(values=values, timestamps=panel.timestamps, cells=panel.cells,
                           signal_names=panel.signal_names, meta=meta)


# ---------------------------------------------------------------------------
# annotation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnnotationConfig:
    """Fault injection settings.

    cell_rule is a small predicate language over cell metadata:
    "all", "none", "area:<name>", or "ids:<id1>,<id2>,...".  Amplitudes are
    in units of the target signal's robust std (IQR/1.349), so injected
    faults are scale-free.
    """

    anomaly_prob: float
    cell_rule: str = "all"
    amplitude: float | dict = 8.0
    scenario: str = "spike"
    propagate: bool = False
    damping: float = 0.5
    level_shift_width: int = 8

    def __post_init__(self):
        if not 0.0 <= self.anomaly_prob <= 1.0:
            raise ValueError("anomaly_prob must lie in [0, 1]")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}, expected one of {SCENARIOS}")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.level_shift_width < 1:
            raise ValueError("level_shift_width must be >= 1")
        parse_cell_rule(self.cell_rule)  # validate eagerly

    def amplitude_for(self, signal: str) -> float:
        if isinstance(self.amplitude, dict):
            return float(self.amplitude.get(signal, 8.0))
        return float(self.amplitude)


def parse_cell_rule(rule: str) -> Callable[[CellMeta], bool]:
    rule = rule.strip()
    if rule == "all":
        return lambda c: True
    if rule == "none":
        return lambda c: False
    if rule.startswith("area:"):
        area = rule.split(":", 1)[1].strip()
        if area not in AREAS:
            raise ValueError(f"unknown area {area!r} in cell_rule")
        return lambda c: c.area == area
    if rule.startswith("ids:"):
        ids = {tok.strip() for tok in rule.split(":", 1)[1].split(",") if tok.strip()}
        return lambda c: c.id in ids
    raise ValueError(f"cannot parse cell_rule {rule!r}")


def robust_std(panel: TimeSeriesPanel) -> np.ndarray:
    """Per-(cell, signal) scale estimate max(IQR, eps)/1.349."""
    q25, q75 = np.percentile(panel.values, [25.0, 75.0], axis=2)
    return np.maximum(q75 - q25, IQR_EPS) / IQR_TO_STD


def annotate(panel: TimeSeriesPanel, cfg: AnnotationConfig, sw_graph: SwGraph,
             rng_seed: int) -> tuple[TimeSeriesPanel, LabelSet]:
    """Degrade matching cells in place (copy) and return the truth labels.

    Each (signal, t) point of a matching cell is independently hit with
    probability anomaly_prob.  A hit applies the configured scenario and,
    when propagate is set, forwards the same degradation damped by ``damping``
    to the signal's one-hop successors in the counter graph.
    """
    if sw_graph.n_nodes != panel.n_signals:
        raise ValueError("sw_graph node count does not match panel signals")
    pred = parse_cell_rule(cfg.cell_rule)
    matched = [ci for ci, c in enumerate(panel.cells) if pred(c)]
    values = panel.values.copy()
    flags = np.zeros(panel.values.shape, dtype=bool)
    if not matched:
        warnings.warn(f"cell_rule {cfg.cell_rule!r} matches no cells; panel left unannotated")
    rstd = robust_std(panel)
    succ = {k: sw_graph.successors(k) for k in range(panel.n_signals)}
    rng = np.random.default_rng(rng_seed)
    if matched:
        hits = rng.random((len(matched), panel.n_signals, panel.n_steps)) < cfg.anomaly_prob
    n_steps = panel.n_steps
    width = cfg.level_shift_width
    for mi, ci in enumerate(matched):
        for k, t in np.argwhere(hits[mi]):
            amp = cfg.amplitude_for(panel.signal_names[k])
            if cfg.scenario == "spike":
                delta = amp * rstd[ci, k]
                values[ci, k, t] += delta
                flags[ci, k, t] = True
                if cfg.propagate:
                    for k2 in succ[k]:
                        values[ci, k2, t] += cfg.damping * delta
                        flags[ci, k2, t] = True
            elif cfg.scenario == "level_shift":
                delta = amp * rstd[ci, k]
                span = slice(t, min(t + width, n_steps))
                values[ci, k, span] += delta
                flags[ci, k, span] = True
                if cfg.propagate:
                    for k2 in succ[k]:
                        values[ci, k2, span] += cfg.damping * delta
                        flags[ci, k2, span] = True
            else:  # drop_to_zero
                values[ci, k, t] = 0.0
                flags[ci, k, t] = True
                if cfg.propagate:
                    for k2 in succ[k]:
                        values[ci, k2, t] *= 1.0 - cfg.damping
                        flags[ci, k2, t] = True
    meta = dict(panel.meta)
    meta["annotation"] = {"scenario": cfg.scenario, "anomaly_prob": cfg.anomaly_prob,
                          "cell_rule": cfg.cell_rule, "propagate": cfg.propagate,
                          "damping": cfg.damping, "seed": int(rng_seed),
                          "applied_to_scaled": bool(panel.meta.get("scaled", False))}
    out = TimeSeriesPanel(values=values, timestamps=panel.timestamps, cells=panel.cells,
                          signal_names=panel.signal_names, meta=meta)
    labels = LabelSet(flags=flags, cell_ids=tuple(panel.cell_ids()),
                      signal_names=panel.signal_names, timestamps=panel.timestamps)
    return out, labels


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowBatch:
    """One training batch: B windows stacked as a disjoint graph union.

    x is (K*B, F, history); y is (K*B, F, horizon); node u of sample s sits
    at row u + s*K.  samples records (cell_index, start_step) per window, in
    batch order; the target window starts exactly where the input ends.
    """

    x: np.ndarray
    y: np.ndarray
    graph: BatchedGraph
    samples: tuple[tuple[int, int], ...]
    history: int
    horizon: int

    def __post_init__(self):
        object.__setattr__(self, "x", _freeze(np.asarray(self.x, dtype=np.float64)))
        object.__setattr__(self, "y", _freeze(np.asarray(self.y, dtype=np.float64)))

    @property
    def batch_size(self) -> int:
        return self.graph.batch_size


def n_windows(n_steps: int, history: int, horizon: int, stride: int) -> int:
    if history < 1 or horizon < 1 or stride < 1:
        raise ValueError("history, horizon and stride must be >= 1")
    if n_steps < history + horizon:
        raise ValueError("need n_steps >= history + horizon")
    return (n_steps - history - horizon) // stride + 1


def window_split(panel: TimeSeriesPanel, history: int, horizon: int, stride: int,
                 batch_size: int, sw_graph: SwGraph) -> list[WindowBatch]:
    """Sliding windows per cell, cell-major order, chunked into batches.

    The last partial batch is kept.  Feature dim F is 1 (one scalar per
    counter per step).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if sw_graph.n_nodes != panel.n_signals:
        raise ValueError("sw_graph node count does not match panel signals")
    nw = n_windows(panel.n_steps, history, horizon, stride)
    samples = [(ci, w * stride) for ci in range(panel.n_cells) for w in range(nw)]
    k = panel.n_signals
    batches = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        b = len(chunk)
        x = np.empty((k * b, 1, history))
        y = np.empty((k * b, 1, horizon))
        for s, (ci, start) in enumerate(chunk):
            x[s * k:(s + 1) * k, 0, :] = panel.values[ci, :, start:start + history]
            y[s * k:(s + 1) * k, 0, :] = panel.values[ci, :, start + history:start + history + horizon]
        batches.append(WindowBatch(x=x, y=y, graph=disjoint_union_batch(sw_graph, b),
                                   samples=tuple(chunk), history=history, horizon=horizon))
    return batches
