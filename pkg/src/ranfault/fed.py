"""Single-process federated learning simulation.

One client per cell, all clients sampled every round.  The server sees only
weight vectors and scalar metrics: aggregation functions take lists of flat
weights, and ``run_rounds`` touches client data exclusively through the
injectable ``train_fn`` / ``eval_fn`` callables, so the server-side path
cannot read a client's panel.

Aggregation rules: FedAvg (unweighted mean, every client receives the global
model) and FedGraph (complete client graph weighted by clamped cosine
similarity, one row-normalized message-passing step produces personalized
weights; the global model is their mean and is logged for evaluation only).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import TimeSeriesPanel, WindowBatch, window_split
from .graphs import NwGraph, SwGraph
from .model import (DivergenceError, GConvLSTMForecaster, ModelConfig, TrainConfig,
                    train)

STRATEGIES = ("fedavg", "fedavg_reg", "fedgraph", "fedgraph_reg")


@dataclass(frozen=True)
class FlConfig:
    strategy: str = "fedavg"
    rounds: int = 5
    local_epochs: int = 20
    reg_lambda: float = 0.0
    seed: int = 0
    sim_clamp: bool = True
    mp_steps: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.rounds < 1 or self.local_epochs < 1:
            raise ValueError("rounds and local_epochs must be >= 1")
        if self.reg_lambda < 0.0:
            raise ValueError("reg_lambda must be >= 0")
        if self.mp_steps < 1:
            raise ValueError("mp_steps must be >= 1")

    @property
    def regularized(self) -> bool:
        return self.strategy.endswith("_reg")

    @property
    def loss_mode(self) -> str:
        return "mse_reg" if self.regularized else "mse"

    @property
    def label(self) -> str:
        base = "FedGraph" if self.strategy.startswith("fedgraph") else "FedAvg"
        if self.regularized:
            base += "Reg"
        return f"{base}-{self.rounds}x{self.local_epochs}"


def parse_preset(preset: str) -> tuple[int, int]:
    """'5x20' -> (rounds=5, local_epochs=20)."""
    try:
        rounds, epochs = preset.lower().split("x")
        return int(rounds), int(epochs)
    except ValueError:
        raise ValueError(f"preset must look like '5x20', got {preset!r}") from None


@dataclass
class ClientState:
    """One cell's private slice plus its weight bookkeeping."""

    cell_id: str
    panel: TimeSeriesPanel
    batches: list[WindowBatch]
    omega: np.ndarray | None = None
    omega_star: np.ndarray | None = None
    history: list = field(default_factory=list)
    failed: bool = False


@dataclass(frozen=True)
class LocalResult:
    omega: np.ndarray
    mse: float
    diverged: bool = False


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    strategy: str
    cell_ids: tuple[str, ...]
    client_mse: tuple[float, ...]
    client_metrics: tuple[dict, ...]
    failed: tuple[bool, ...]
    similarity: np.ndarray          # raw cosine, diagonal 1, pre-clamp
    omega: tuple[np.ndarray, ...]   # post-local-training weights
    omega_star: tuple[np.ndarray, ...]
    omega_global: np.ndarray
    footprint_to_date: float


def partition_clients(panel: TimeSeriesPanel, nw_graph: NwGraph, sw_graph: SwGraph,
                      model_cfg: ModelConfig, batch_size: int,
                      stride: int = 1) -> list[ClientState]:
    """One client per cell, holding only its own K x T slice and windows."""
    if panel.cell_ids() != nw_graph.cell_ids():
        raise ValueError("panel cells do not align with the topology graph")
    clients = []
    for i in range(panel.n_cells):
        sub = panel.cell_panel(i)
        batches = window_split(sub, model_cfg.history, model_cfg.horizon, stride,
                               batch_size, sw_graph)
        clients.append(ClientState(cell_id=sub.cells[0].id, panel=sub, batches=batches))
    return clients


def local_seed(seed: int, round_index: int, client_index: int) -> int:
    """Stable per-(round, client) training seed derivation."""
    return int(np.random.SeedSequence([seed, round_index, client_index]).generate_state(1)[0])


def local_train(client: ClientState, omega_star_in: np.ndarray, epochs: int,
                loss_mode: str, model: GConvLSTMForecaster, train_cfg: TrainConfig,
                reg_lambda: float, seed: int) -> LocalResult:
    """Train from the incoming weights; the regularizer anchor stays fixed.

    Divergence is reported via the flag, not raised: the round proceeds
    without this client's update.
    """
    if omega_star_in.shape != (model.n_params,):
        raise ValueError("omega_star_in length does not match the model")
    work = model.copy()
    work.set_flat(omega_star_in)
    if epochs == 0:
        return LocalResult(omega=omega_star_in.copy(), mse=float("nan"))
    cfg = replace(train_cfg, epochs=epochs, loss_mode=loss_mode,
                  reg_lambda=reg_lambda, seed=seed)
    try:
        trained, history = train(work, client.batches, cfg,
                                 omega_star=omega_star_in if loss_mode == "mse_reg" else None)
    except DivergenceError:
        return LocalResult(omega=omega_star_in.copy(), mse=float("inf"), diverged=True)
    return LocalResult(omega=trained.flatten(), mse=history[-1]["mse"])


# ---------------------------------------------------------------------------
# aggregation algebra (server side: weights in, weights out)
# ---------------------------------------------------------------------------

def fedavg_aggregate(weights: Sequence[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Unweighted mean in fixed client order; every client receives it."""
    if len(weights) == 0:
        raise ValueError("no client weights to aggregate")
    length = weights[0].shape
    for w in weights:
        if w.shape != length:
            raise ValueError("client weight lengths differ")
    total = np.zeros_like(weights[0])
    for w in weights:
        total = total + w
    omega_global = total / len(weights)
    return omega_global, [omega_global.copy() for _ in weights]


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two flat weight vectors; defined as 0 if either is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("vector lengths differ")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    if np.array_equal(a, b):
        return 1.0  # dot/(na*nb) can land an ulp off; the identity is exact
    return float(a @ b) / (na * nb)


def similarity_matrix(weights: Sequence[np.ndarray], clamp: bool = False) -> np.ndarray:
    """Pairwise cosine with unit diagonal; optionally clamped to [0, 1]."""
    n = len(weights)
    sim = np.eye(n)
    for j in range(n):
        for k in range(j + 1, n):
            s = cosine_sim(weights[j], weights[k])
            sim[j, k] = sim[k, j] = s
    if clamp:
        sim = np.clip(sim, 0.0, 1.0)
        np.fill_diagonal(sim, 1.0)
    return sim


def fedgraph_aggregate(weights: Sequence[np.ndarray], sim_clamp: bool = True,
                       mp_steps: int = 1) -> tuple[list[np.ndarray], np.ndarray]:
    """Personalized aggregation over the complete client similarity graph.

    R[j,k] = clamp(cos(w_j, w_k), 0, 1) off-diagonal, 1 on the diagonal;
    each message-passing step maps w to the row-normalized R @ w.  Returns
    (per-client personalized weights, their mean as the global model).
    """
    if len(weights) == 0:
        raise ValueError("no client weights to aggregate")
    mat = np.stack([np.asarray(w, dtype=np.float64) for w in weights])
    rel = similarity_matrix(weights, clamp=sim_clamp)
    row_sum = rel.sum(axis=1, keepdims=True)
    for _ in range(mp_steps):
        mat = (rel @ mat) / row_sum
    personalized = [mat[j].copy() for j in range(mat.shape[0])]
    omega_global = mat.mean(axis=0)
    return personalized, omega_global


def comm_footprint(rounds: int, n_params: int, n_data_points: int) -> float:
    """FL communication cost relative to dataset size: I * |params| / |points|."""
    if n_data_points <= 0:
        raise ValueError("n_data_points must be positive")
    if rounds < 0 or n_params < 0:
        raise ValueError("rounds and n_params must be nonnegative")
    return rounds * n_params / n_data_points


# ---------------------------------------------------------------------------
# the protocol loop
# ---------------------------------------------------------------------------

def run_rounds(clients: list[ClientState], fl_cfg: FlConfig,
               model: GConvLSTMForecaster, train_cfg: TrainConfig,
               n_data_points: int,
               eval_fn: Callable[[ClientState, np.ndarray], dict] | None = None,
               train_fn: Callable[..., LocalResult] | None = None) -> list[RoundRecord]:
    """Run the full FL protocol; deterministic given fl_cfg.seed.

    Every client starts from the same model weights.  Per round, each client
    trains locally from its current personalized weights (seed derived via
    local_seed), the server aggregates the returned weight vectors, and a
    RoundRecord captures weights, metrics and the raw similarity matrix.
    Diverged clients are excluded from aggregation and receive the global
    model; a round where every client diverges aborts the experiment.

    n_data_points is supplied by the caller (total points of the underlying
    panel) so this loop never inspects client data itself.
    """
    if not clients:
        raise ValueError("no clients")
    if train_fn is None:
        def train_fn(client, omega_in, epochs, loss_mode, seed):
            return local_train(client, omega_in, epochs, loss_mode, model,
                               train_cfg, fl_cfg.reg_lambda, seed)

    omega0 = model.flatten()
    stars = [omega0.copy() for _ in clients]
    records = []
    for rnd in range(1, fl_cfg.rounds + 1):
        results = []
        for j, client in enumerate(clients):
            client.omega_star = stars[j]
            res = train_fn(client, stars[j], fl_cfg.local_epochs, fl_cfg.loss_mode,
                           local_seed(fl_cfg.seed, rnd, j))
            client.omega = res.omega
            client.failed = res.diverged
            results.append(res)
        ok = [j for j, r in enumerate(results) if not r.diverged]
        if not ok:
            raise DivergenceError(f"all clients diverged in round {rnd}")
        # Failed clients keep their incoming weights in the record so the
        # similarity matrix stays N x N.
        omegas = [results[j].omega for j in range(len(clients))]
        sim_raw = similarity_matrix(omegas, clamp=False)
        ok_weights = [omegas[j] for j in ok]
        if fl_cfg.strategy.startswith("fedavg"):
            omega_global, personalized_ok = fedavg_aggregate(ok_weights)
        else:
            personalized_ok, omega_global = fedgraph_aggregate(
                ok_weights, sim_clamp=fl_cfg.sim_clamp, mp_steps=fl_cfg.mp_steps)
        stars = [omega_global.copy() for _ in clients]
        for pos, j in enumerate(ok):
            stars[j] = personalized_ok[pos]
        metrics = []
        for j, client in enumerate(clients):
            entry = {"cell_id": client.cell_id, "mse": results[j].mse,
                     "failed": results[j].diverged,
                     "precision": None, "recall": None, "f1": None}
            if eval_fn is not None and not results[j].diverged:
                entry.update(eval_fn(client, omegas[j]))
            client.history.append(entry)
            metrics.append(entry)
        records.append(RoundRecord(
            round_index=rnd, strategy=fl_cfg.label,
            cell_ids=tuple(c.cell_id for c in clients),
            client_mse=tuple(r.mse for r in results),
            client_metrics=tuple(metrics),
            failed=tuple(r.diverged for r in results),
            similarity=sim_raw,
            omega=tuple(w.copy() for w in omegas),
            omega_star=tuple(s.copy() for s in stars),
            omega_global=omega_global,
            footprint_to_date=comm_footprint(rnd, model.n_params, n_data_points)))
    return records


def round_log_entry(record: RoundRecord) -> dict:
    """JSON-ready view of one round (weights omitted, metrics kept)."""
    return {
        "round": record.round_index,
        "strategy": record.strategy,
        "clients": [
            {"cell_id": cid, "mse": _json_float(mse), "failed": bool(fail),
             "precision": m["precision"], "recall": m["recall"], "f1": m["f1"]}
            for cid, mse, fail, m in zip(record.cell_ids, record.client_mse,
                                         record.failed, record.client_metrics)
        ],
        "similarity": [[float(v) for v in row] for row in record.similarity],
        "footprint_to_date": record.footprint_to_date,
    }


def _json_float(x: float) -> float | str:
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf"
    return float(x)


def write_round_log(records: list[RoundRecord], path: str | Path) -> None:
    """Newline-delimited JSON, one object per round."""
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(round_log_entry(record), sort_keys=True) + "\n")
