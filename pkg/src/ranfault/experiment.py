"""Experiment configuration and pipeline orchestration.

One JSON config drives every command.  All seeds live in the config (or are
derived from the --seed override), and every artifact except the single
``created_at`` field of meta.json is byte-reproducible given config + seed.

Dataset ids mirror the annotation regimes: 0 = clean panel, 1 = injected
anomalies without propagation, 2 = with one-hop propagation.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import kernels
from .data import (AnnotationConfig, GeneratorProfile, LabelSet, TimeSeriesPanel,
                   annotate, empty_labels, generate_synthetic_panel,
                   load_labels_csv, load_panel_csv, robust_scale, save_labels_csv,
                   save_panel_csv, window_split)
from .detect import (DetectorConfig, ResidualPanel, calibrate_methods, detect_panel_scored,
                     residuals, save_detections_csv)
from .fed import (ClientState, FlConfig, parse_preset, partition_clients, run_rounds,
                  write_round_log)
from .graphs import NwGraph, SwGraph, build_nw_graph, chain_sw_graph
from .metrics import (FlRunSummary, fl_vs_cl_report, prf1,
                      write_report_csv, write_report_json)
from .model import (GConvLSTMForecaster, ModelConfig, TrainConfig, load_checkpoint,
                    save_checkpoint, train)

log = logging.getLogger("ranfault")

DATASET_IDS = (0, 1, 2)
FL_BASES = ("fedavg", "fedgraph")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def _take(section: dict, name: str, keys: set[str]) -> None:
    unknown = set(section) - keys
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section {name!r}")


@dataclass(frozen=True)
class DataSection:
    source: str = "generate"
    path: str | None = None
    n_cells: int = 10
    n_signals: int = 8
    n_steps: int = 1024
    seed: int = 0
    sw_graph: str | None = None
    noise_scale: float = 0.1
    coupling: float = 0.5

    def __post_init__(self):
        if self.source not in ("generate", "csv"):
            raise ConfigError(f"data.source must be 'generate' or 'csv', got {self.source!r}")
        if self.source == "csv" and not self.path:
            raise ConfigError("data.source 'csv' needs data.path")


@dataclass(frozen=True)
class FlSection:
    bases: tuple[str, ...] = FL_BASES
    presets: tuple[str, ...] = ("5x20", "10x10", "20x5")
    regularized_variants: bool = True
    reg_lambda: float = 0.1
    seed: int = 0
    sim_clamp: bool = True
    mp_steps: int = 1
    cl_reference: str | None = None
    per_round_eval: bool = False

    def __post_init__(self):
        for base in self.bases:
            if base not in FL_BASES:
                raise ConfigError(f"fl.bases entries must be in {FL_BASES}")
        for preset in self.presets:
            parse_preset(preset)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection
    dataset_id: int
    annotation: AnnotationConfig | None
    annotation_seed: int
    model: ModelConfig
    train: TrainConfig
    detect: DetectorConfig
    calibrate: bool
    fl: FlSection | None
    holdout: bool = False

    def __post_init__(self):
        if self.dataset_id not in DATASET_IDS:
            raise ConfigError(f"dataset_id must be one of {DATASET_IDS}")
        if self.dataset_id > 0 and self.annotation is None:
            raise ConfigError(f"dataset_id {self.dataset_id} needs an annotation section")
        if self.dataset_id == 1 and self.annotation.propagate:
            raise ConfigError("dataset_id 1 means no propagation, but annotation.propagate is true")
        if self.dataset_id == 2 and not self.annotation.propagate:
            raise ConfigError("dataset_id 2 means propagation, but annotation.propagate is false")


def parse_config(obj: dict, seed_override: int | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from a plain dict (strict about keys).

    A seed override rederives every section seed: data = s, annotation =
    s + 1, train = s + 2, fl = s + 3.
    """
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    _take(obj, "<root>", {"data", "dataset_id", "annotation", "model", "train",
                          "detect", "fl", "holdout"})
    try:
        data_raw = dict(obj.get("data", {}))
        _take(data_raw, "data", {f.name for f in dataclasses.fields(DataSection)})
        data = DataSection(**data_raw)

        ann_raw = obj.get("annotation")
        annotation = None
        annotation_seed = data.seed + 1
        if ann_raw is not None:
            ann_raw = dict(ann_raw)
            annotation_seed = ann_raw.pop("seed", data.seed + 1)
            _take(ann_raw, "annotation",
                  {f.name for f in dataclasses.fields(AnnotationConfig)})
            annotation = AnnotationConfig(**ann_raw)

        model_raw = dict(obj.get("model", {}))
        _take(model_raw, "model", {f.name for f in dataclasses.fields(ModelConfig)})
        model = ModelConfig(**model_raw)

        train_raw = dict(obj.get("train", {}))
        _take(train_raw, "train", {f.name for f in dataclasses.fields(TrainConfig)})
        train_cfg = TrainConfig(**train_raw)

        det_raw = dict(obj.get("detect", {}))
        calibrate = bool(det_raw.pop("calibrate", False))
        _take(det_raw, "detect", {f.name for f in dataclasses.fields(DetectorConfig)})
        detect_cfg = DetectorConfig(**det_raw)

        fl_raw = obj.get("fl")
        fl = None
        if fl_raw is not None:
            fl_raw = dict(fl_raw)
            for key in ("bases", "presets"):
                if key in fl_raw:
                    fl_raw[key] = tuple(fl_raw[key])
            _take(fl_raw, "fl", {f.name for f in dataclasses.fields(FlSection)})
            fl = FlSection(**fl_raw)

        cfg = ExperimentConfig(data=data, dataset_id=int(obj.get("dataset_id", 0)),
                               annotation=annotation, annotation_seed=int(annotation_seed),
                               model=model, train=train_cfg, detect=detect_cfg,
                               calibrate=calibrate, fl=fl,
                               holdout=bool(obj.get("holdout", False)))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc

    if seed_override is not None:
        s = int(seed_override)
        cfg = replace(cfg, data=replace(cfg.data, seed=s), annotation_seed=s + 1,
                      train=replace(cfg.train, seed=s + 2),
                      fl=replace(cfg.fl, seed=s + 3) if cfg.fl else None)
    if cfg.data.source == "csv" and not Path(cfg.data.path).exists():
        raise ConfigError(f"data.path {cfg.data.path!r} does not exist")
    if cfg.data.sw_graph and not Path(cfg.data.sw_graph).exists():
        raise ConfigError(f"data.sw_graph {cfg.data.sw_graph!r} does not exist")
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Canonical dict form; parse(config_to_dict(cfg)) == cfg."""
    out = {
        "data": dataclasses.asdict(cfg.data),
        "dataset_id": cfg.dataset_id,
        "model": dataclasses.asdict(cfg.model),
        "train": dataclasses.asdict(cfg.train),
        "detect": {**dataclasses.asdict(cfg.detect), "calibrate": cfg.calibrate},
        "holdout": cfg.holdout,
    }
    if cfg.annotation is not None:
        out["annotation"] = {**dataclasses.asdict(cfg.annotation), "seed": cfg.annotation_seed}
    if cfg.fl is not None:
        fl = dataclasses.asdict(cfg.fl)
        fl["bases"] = list(fl["bases"])
        fl["presets"] = list(fl["presets"])
        out["fl"] = fl
    return out


def load_config(path: str | Path, seed_override: int | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(obj, seed_override)


# ---------------------------------------------------------------------------
# shared pipeline pieces
# ---------------------------------------------------------------------------

def build_panel(cfg: ExperimentConfig) -> tuple[TimeSeriesPanel, SwGraph, NwGraph]:
    """Raw (unannotated) panel plus both graphs, per the data section."""
    if cfg.data.sw_graph:
        sw = SwGraph.load(cfg.data.sw_graph)
    else:
        sw = chain_sw_graph(cfg.data.n_signals)
    if cfg.data.source == "csv":
        panel = load_panel_csv(cfg.data.path)
        if panel.n_signals != sw.n_nodes:
            raise ConfigError("CSV signal count does not match the SW graph")
    else:
        profile = GeneratorProfile(noise_scale=cfg.data.noise_scale,
                                   coupling=cfg.data.coupling)
        panel = generate_synthetic_panel(cfg.data.n_cells, cfg.data.n_signals,
                                         cfg.data.n_steps, cfg.data.seed,
                                         profile=profile, sw_graph=sw)
    nw = build_nw_graph(panel.cells, rule="area_complete")
    return panel, sw, nw


def annotated_panel(cfg: ExperimentConfig) -> tuple[TimeSeriesPanel, LabelSet, SwGraph, NwGraph]:
    panel, sw, nw = build_panel(cfg)
    if cfg.dataset_id == 0:
        return panel, empty_labels(panel), sw, nw
    panel2, labels = annotate(panel, cfg.annotation, sw, cfg.annotation_seed)
    return panel2, labels, sw, nw


def _training_windows(cfg: ExperimentConfig, scaled: TimeSeriesPanel, graph: SwGraph):
    """Training batches; with holdout on, windows come from the first 80%."""
    panel = scaled
    if cfg.holdout:
        cut = max(cfg.model.history + cfg.model.horizon, int(0.8 * scaled.n_steps))
        panel = TimeSeriesPanel(values=scaled.values[:, :, :cut],
                                timestamps=scaled.timestamps[:cut], cells=scaled.cells,
                                signal_names=scaled.signal_names, meta=dict(scaled.meta))
    return window_split(panel, cfg.model.history, cfg.model.horizon, 1,
                        cfg.train.batch_size, graph)


def _run_info(cfg: ExperimentConfig) -> dict:
    """Deterministic provenance block shared by result artifacts."""
    return {"config": config_to_dict(cfg), "backend": kernels.backend_name}


def _meta(cfg: ExperimentConfig, extra: dict) -> dict:
    """Run info plus a wall-clock stamp; only meta.json carries the stamp so
    every other artifact stays byte-identical across reruns."""
    out = {"created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
           **_run_info(cfg)}
    out.update(extra)
    return out


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_training_log(path: Path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss,mse\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['loss']!r},{row['mse']!r}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def run_generate(cfg: ExperimentConfig, out: str | Path) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    panel, labels, sw, _ = annotated_panel(cfg)
    save_panel_csv(panel, out / "panel.csv")
    save_labels_csv(labels, out / "labels.csv")
    sw.save(out / "sw_graph.json")
    meta = _meta(cfg, {"panel_hash": panel.identity_hash(),
                       "n_labels": labels.n_flags,
                       "shape": list(panel.values.shape)})
    _write_json(out / "meta.json", meta)
    log.info("generated panel %s with %d labels", panel.values.shape, labels.n_flags)
    return {"panel": str(out / "panel.csv"), "labels": str(out / "labels.csv"),
            "n_labels": labels.n_flags}


def _detect_on(model: GConvLSTMForecaster, scaled: TimeSeriesPanel, batches,
               det_cfg: DetectorConfig):
    res = residuals(model, scaled, batches)
    return res, detect_panel_scored(res, det_cfg)


def _resolve_methods(cfg: ExperimentConfig, res: ResidualPanel,
                     truth: LabelSet) -> DetectorConfig:
    if cfg.calibrate:
        method_map = calibrate_methods(res, truth, cfg.detect)
    elif cfg.detect.method_map is not None:
        method_map = cfg.detect.method_map
    else:
        method_map = {sig: "zscore" for sig in res.signal_names}
    return replace(cfg.detect, method_map=method_map)


def run_train_central(cfg: ExperimentConfig, out: str | Path,
                      edges_mode: str = "graph") -> dict:
    """Centralized training + detection; also the disconnected baseline.

    edges_mode 'none' drops every SW edge (per-node model); artifacts then
    carry a 'baseline_' prefix so both runs can share a directory.
    """
    if edges_mode not in ("graph", "none"):
        raise ConfigError(f"edges mode must be 'graph' or 'none', got {edges_mode!r}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    prefix = "" if edges_mode == "graph" else "baseline_"
    panel, truth, sw, _ = annotated_panel(cfg)
    graph = sw if edges_mode == "graph" else SwGraph(node_names=sw.node_names,
                                                     edges=(), edge_attrs=())
    scaled, _ = robust_scale(panel)
    batches = _training_windows(cfg, scaled, graph)
    model = GConvLSTMForecaster(cfg.model, graph, seed=cfg.train.seed)
    trained, history = train(model, batches, cfg.train)
    eval_batches = (batches if not cfg.holdout else
                    window_split(scaled, cfg.model.history, cfg.model.horizon, 1,
                                 cfg.train.batch_size, graph))
    res = residuals(trained, scaled, eval_batches)
    det_cfg = _resolve_methods(cfg, res, truth)
    detection = detect_panel_scored(res, det_cfg)
    scores = prf1(detection.labels, truth, mask=res.evaluable)

    save_checkpoint(out / f"{prefix}checkpoint.bin", trained)
    _write_training_log(out / f"{prefix}training_log.csv", history)
    save_detections_csv(res, detection, out / f"{prefix}detections.csv")
    save_labels_csv(detection.labels, out / f"{prefix}detected_labels.csv")
    save_labels_csv(truth, out / f"{prefix}truth_labels.csv")
    arch = "GConvLSTM" if edges_mode == "graph" else "GConvLSTM (no edges)"
    final_mse = history[-1]["mse"] if history else float("nan")
    metrics = {"architecture": arch, "dataset_id": cfg.dataset_id,
               "mse": final_mse, "scores": scores.as_dict(),
               "panel_hash": panel.identity_hash(), "n_params": trained.n_params,
               "method_map": det_cfg.method_map, "epochs": cfg.train.epochs}
    _write_json(out / f"{prefix}metrics.json", {**_run_info(cfg), **metrics})
    write_report_csv([{"strategy": arch, "dataset": cfg.dataset_id, "loss": final_mse,
                       "precision": scores.precision, "recall": scores.recall,
                       "f1": scores.f1}],
                     out / f"{prefix}metrics_row.csv",
                     columns=["strategy", "dataset", "loss", "precision", "recall", "f1"])
    log.info("central run (%s): mse=%.6g f1=%.4f", arch, final_mse, scores.f1)
    return {"mse": final_mse, "scores": scores.as_dict(),
            "checkpoint": str(out / f"{prefix}checkpoint.bin"),
            "reference_labels": str(out / f"{prefix}detected_labels.csv")}


def _client_detections(clients: list[ClientState], stars: list[np.ndarray],
                       det_cfg: DetectorConfig,
                       template: GConvLSTMForecaster) -> LabelSet:
    """Union of per-client detections with each client's personalized weights."""
    flag_blocks = []
    for client, omega in zip(clients, stars):
        work = template.copy()
        work.set_flat(omega)
        res = residuals(work, client.panel, client.batches)
        flag_blocks.append(detect_panel_scored(res, det_cfg).labels.flags)
    first = clients[0].panel
    return LabelSet(flags=np.concatenate(flag_blocks, axis=0),
                    cell_ids=tuple(c.cell_id for c in clients),
                    signal_names=first.signal_names, timestamps=first.timestamps)


def _similarity_csv(records, path: Path) -> None:
    ids = records[0].cell_ids
    pairs = [(i, j) for i in range(len(ids)) for j in range(i + 1, len(ids))]
    with open(path, "w") as fh:
        fh.write(",".join(["round"] + [f"{ids[i]}|{ids[j]}" for i, j in pairs]) + "\n")
        for rec in records:
            cells = [repr(float(rec.similarity[i, j])) for i, j in pairs]
            fh.write(",".join([str(rec.round_index)] + cells) + "\n")


def run_train_fed(cfg: ExperimentConfig, out: str | Path) -> dict:
    """All configured FL strategies, scored against the centralized reference."""
    if cfg.fl is None:
        raise ConfigError("config has no fl section")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cl_dir = Path(cfg.fl.cl_reference) if cfg.fl.cl_reference else out
    cl_metrics_path = cl_dir / "metrics.json"
    cl_labels_path = cl_dir / "detected_labels.csv"
    if not cl_metrics_path.exists() or not cl_labels_path.exists():
        raise ConfigError(f"missing CL reference under {cl_dir} (run train-central first)")
    cl_meta = json.loads(cl_metrics_path.read_text())
    cl_labels = load_labels_csv(cl_labels_path)

    panel, truth, sw, nw = annotated_panel(cfg)
    panel_hash = panel.identity_hash()
    scaled, _ = robust_scale(panel)
    clients = partition_clients(scaled, nw, sw, cfg.model, cfg.train.batch_size)
    n_data_points = scaled.values.size
    template = GConvLSTMForecaster(cfg.model, sw, seed=cfg.train.seed)
    det_cfg = cfg.detect if cfg.detect.method_map is not None else replace(
        cfg.detect, method_map={sig: "zscore" for sig in scaled.signal_names})

    eval_fn = None
    if cfg.fl.per_round_eval:
        ev_truth = truth

        def eval_fn(client, omega):
            work = template.copy()
            work.set_flat(omega)
            res = residuals(work, client.panel, client.batches)
            det = detect_panel_scored(res, det_cfg)
            ci = [c.cell_id for c in clients].index(client.cell_id)
            ref = LabelSet(flags=ev_truth.flags[ci:ci + 1], cell_ids=(client.cell_id,),
                           signal_names=ev_truth.signal_names, timestamps=ev_truth.timestamps)
            s = prf1(det.labels, ref, mask=res.evaluable)
            return {"precision": s.precision, "recall": s.recall, "f1": s.f1}

    runs = []
    all_records = {}
    for base in cfg.fl.bases:
        for preset in cfg.fl.presets:
            rounds, epochs = parse_preset(preset)
            variants = [False, True] if cfg.fl.regularized_variants else [False]
            for reg in variants:
                flc = FlConfig(strategy=base + ("_reg" if reg else ""), rounds=rounds,
                               local_epochs=epochs,
                               reg_lambda=cfg.fl.reg_lambda if reg else 0.0,
                               seed=cfg.fl.seed, sim_clamp=cfg.fl.sim_clamp,
                               mp_steps=cfg.fl.mp_steps)
                log.info("running %s", flc.label)
                records = run_rounds(clients, flc, template, cfg.train,
                                     n_data_points, eval_fn=eval_fn)
                write_round_log(records, out / f"rounds_{flc.label}.ndjson")
                _similarity_csv(records, out / f"similarity_{flc.label}.csv")
                final = records[-1]
                detections = _client_detections(clients, list(final.omega_star),
                                                det_cfg, template)
                save_labels_csv(detections, out / f"detected_labels_{flc.label}.csv")
                ok_mse = [m for m, f in zip(final.client_mse, final.failed) if not f]
                runs.append(FlRunSummary(strategy=flc.label,
                                         final_mse=float(np.mean(ok_mse)),
                                         detections=detections,
                                         footprint=final.footprint_to_date,
                                         panel_hash=panel_hash,
                                         dataset_id=cfg.dataset_id))
                all_records[flc.label] = records
    rows = fl_vs_cl_report(runs, cl_labels, float(cl_meta["mse"]), cl_meta["panel_hash"])
    write_report_csv(rows, out / "fl_report.csv")
    write_report_json(rows, out / "fl_report.json")
    return {"report": str(out / "fl_report.csv"), "rows": rows}


def run_detect(cfg: ExperimentConfig, out: str | Path, checkpoint: str | Path) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(checkpoint)
    panel, truth, sw, _ = annotated_panel(cfg)
    scaled, _ = robust_scale(panel)
    batches = window_split(scaled, model.config.history, model.config.horizon, 1,
                           cfg.train.batch_size, model.sw_graph)
    res = residuals(model, scaled, batches)
    det_cfg = _resolve_methods(cfg, res, truth)
    detection = detect_panel_scored(res, det_cfg)
    save_detections_csv(res, detection, out / "detections.csv")
    save_labels_csv(detection.labels, out / "detected_labels.csv")
    return {"detections": str(out / "detections.csv"),
            "n_flags": detection.labels.n_flags}


def run_evaluate(pred_path: str | Path, truth_path: str | Path,
                 out: str | Path) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pred = load_labels_csv(pred_path)
    truth = load_labels_csv(truth_path)
    if not pred.same_axes(truth):
        raise ConfigError("label files cover different cells/signals/timestamps")
    scores = prf1(pred, truth)
    _write_json(out / "scores.json", scores.as_dict())
    write_report_csv([{"strategy": "evaluate", "dataset": "", "loss": "",
                       "precision": scores.precision, "recall": scores.recall,
                       "f1": scores.f1}],
                     out / "scores_row.csv",
                     columns=["strategy", "dataset", "loss", "precision", "recall", "f1"])
    return scores.as_dict()


def run_report(out: str | Path) -> dict:
    """Merge whatever metrics artifacts exist in a directory into one table."""
    out = Path(out)
    rows = []
    for name in ("metrics.json", "baseline_metrics.json"):
        path = out / name
        if path.exists():
            obj = json.loads(path.read_text())
            rows.append({"strategy": obj["architecture"], "dataset": obj["dataset_id"],
                         "loss": obj["mse"], "precision": obj["scores"]["precision"],
                         "recall": obj["scores"]["recall"], "f1": obj["scores"]["f1"],
                         "footprint": ""})
    fl_path = out / "fl_report.json"
    if fl_path.exists():
        for row in json.loads(fl_path.read_text()):
            rows.append({k: row.get(k, "") for k in
                         ("strategy", "dataset", "loss", "precision", "recall",
                          "f1", "footprint")})
    if not rows:
        raise ConfigError(f"no metrics artifacts found under {out}")
    write_report_csv(rows, out / "report.csv",
                     columns=["strategy", "dataset", "loss", "precision", "recall",
                              "f1", "footprint"])
    write_report_json(rows, out / "report.json")
    return {"rows": len(rows), "report": str(out / "report.csv")}
