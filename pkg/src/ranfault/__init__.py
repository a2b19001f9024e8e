"""ranfault: bi-level graph fault detection for cellular network telemetry.

Synthetic counter telemetry over a two-level graph (counters within a cell,
cells within a deployment), a graph-convolutional LSTM forecaster trained
centrally or via simulated federated learning, and residual-based anomaly
detection with z-score and generalized-ESD tests.
"""

__version__ = "0.1.0"

from .graphs import (CellMeta, SwGraph, NwGraph, BatchedGraph,
                     build_sw_graph, build_nw_graph, chain_sw_graph,
                     disjoint_union_batch)
from .data import (TimeSeriesPanel, LabelSet, AnnotationConfig, GeneratorProfile,
                   ScalerParams, WindowBatch, generate_synthetic_panel, default_cells,
                   load_panel_csv, save_panel_csv, load_labels_csv, save_labels_csv,
                   robust_scale, robust_unscale, annotate, window_split)
from .model import (ModelConfig, TrainConfig, GConvLSTMForecaster, DivergenceError,
                    cheb_conv, scaled_laplacian, gconv_lstm_step, loss, train,
                    save_checkpoint, load_checkpoint)
from .detect import (DetectorConfig, ResidualPanel, DetectionResult, EsdResult,
                     residuals, zscore_scores, zscore_detect, t_quantile,
                     esd_critical, esd_test, esd_detect, calibrate_methods,
                     detect_panel, detect_panel_scored, save_detections_csv)
from .fed import (FlConfig, ClientState, LocalResult, RoundRecord, parse_preset,
                  partition_clients, local_seed, local_train, fedavg_aggregate,
                  cosine_sim, similarity_matrix, fedgraph_aggregate, comm_footprint,
                  run_rounds, write_round_log)
from .metrics import (ClassificationScores, FlRunSummary, prf1, mse_metric,
                      fl_vs_cl_report, write_report_csv, write_report_json)
from .experiment import (ConfigError, ExperimentConfig, parse_config, config_to_dict,
                         load_config, run_generate, run_train_central, run_train_fed,
                         run_detect, run_evaluate, run_report)

__all__ = [
    "CellMeta", "SwGraph", "NwGraph", "BatchedGraph",
    "build_sw_graph", "build_nw_graph", "chain_sw_graph", "disjoint_union_batch",
    "TimeSeriesPanel", "LabelSet", "AnnotationConfig", "GeneratorProfile",
    "ScalerParams", "WindowBatch", "generate_synthetic_panel", "default_cells",
    "load_panel_csv", "save_panel_csv", "load_labels_csv", "save_labels_csv",
    "robust_scale", "robust_unscale", "annotate", "window_split",
    "ModelConfig", "TrainConfig", "GConvLSTMForecaster", "DivergenceError",
    "cheb_conv", "scaled_laplacian", "gconv_lstm_step", "loss", "train",
    "save_checkpoint", "load_checkpoint",
    "DetectorConfig", "ResidualPanel", "DetectionResult", "EsdResult",
    "residuals", "zscore_scores", "zscore_detect", "t_quantile",
    "esd_critical", "esd_test", "esd_detect", "calibrate_methods",
    "detect_panel", "detect_panel_scored", "save_detections_csv",
    "FlConfig", "ClientState", "LocalResult", "RoundRecord", "parse_preset",
    "partition_clients", "local_seed", "local_train", "fedavg_aggregate",
    "cosine_sim", "similarity_matrix", "fedgraph_aggregate", "comm_footprint",
    "run_rounds", "write_round_log",
    "ClassificationScores", "FlRunSummary", "prf1", "mse_metric",
    "fl_vs_cl_report", "write_report_csv", "write_report_json",
    "ConfigError", "ExperimentConfig", "parse_config", "config_to_dict",
    "load_config", "run_generate", "run_train_central", "run_train_fed",
    "run_detect", "run_evaluate", "run_report",
]
