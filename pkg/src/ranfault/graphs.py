"""Bi-level graph data model.

The inner level is a static execution graph over the software counters
monitored on every cell (one node per counter, directed edges for execution
flow).  The outer level is a topology graph over the cells themselves, with a
dense relation matrix.  Both are immutable after construction and safe to
share across concurrent readers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

AREAS = ("airport", "downtown", "rural")


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CellMeta:
    """Static description of one cell (one client in the federated loop)."""

    id: str
    area: str = "downtown"
    position: tuple[float, float] | None = None

    def __post_init__(self):
        if self.area not in AREAS:
            raise ValueError(f"unknown area {self.area!r}, expected one of {AREAS}")
        if self.position is not None:
            object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))


@dataclass(frozen=True)
class SwGraph:
    """Directed execution graph over counter signals.

    Node indices run over [0, K).  Edges carry one scalar weight each
    (default 1.0).  Topology is static; only node attributes (the telemetry
    values) evolve over time.
    """

    node_names: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    edge_attrs: tuple[float, ...]

    def __post_init__(self):
        if len(self.node_names) < 1:
            raise ValueError("SwGraph needs at least one node")
        if len(set(self.node_names)) != len(self.node_names):
            raise ValueError("duplicate node name in SwGraph")
        if len(self.edge_attrs) != len(self.edges):
            raise ValueError("edge_attrs length must match edges length")
        k = len(self.node_names)
        for src, dst in self.edges:
            if not (0 <= src < k and 0 <= dst < k):
                raise ValueError(f"edge ({src}, {dst}) out of range for {k} nodes")
        for a in self.edge_attrs:
            if not np.isfinite(a):
                raise ValueError("edge attributes must be finite")

    @property
    def n_nodes(self) -> int:
        return len(self.node_names)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def successors(self, node: int) -> list[int]:
        return [dst for src, dst in self.edges if src == node]

    def out_degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, dtype=np.int64)
        for src, _ in self.edges:
            deg[src] += 1
        return deg

    def edge_index(self) -> np.ndarray:
        """Edges as a 2 x E int64 matrix (row 0 sources, row 1 destinations)."""
        if not self.edges:
            return np.zeros((2, 0), dtype=np.int64)
        return np.asarray(self.edges, dtype=np.int64).T.copy()

    def to_json(self) -> str:
        return json.dumps({
            "nodes": list(self.node_names),
            "edges": [[int(s), int(d)] for s, d in self.edges],
            "attrs": [float(a) for a in self.edge_attrs],
        })

    @classmethod
    def from_json(cls, text: str) -> "SwGraph":
        obj = json.loads(text)
        return cls(
            node_names=tuple(obj["nodes"]),
            edges=tuple((int(s), int(d)) for s, d in obj["edges"]),
            edge_attrs=tuple(float(a) for a in obj["attrs"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SwGraph":
        return cls.from_json(Path(path).read_text())


def build_sw_graph(names: Sequence[str],
                   edges: Sequence[tuple[str, str]],
                   attrs: Sequence[float] | None = None) -> SwGraph:
    """Build a counter graph from node names and name-pair edges.

    ``attrs`` defaults to 1.0 per edge.  Raises on duplicate names or edge
    endpoints that do not resolve to a declared node.
    """
    names = tuple(str(n) for n in names)
    if len(set(names)) != len(names):
        raise ValueError("duplicate node name")
    index = {n: i for i, n in enumerate(names)}
    resolved = []
    for src, dst in edges:
        if src not in index:
            raise ValueError(f"dangling edge endpoint {src!r}")
        if dst not in index:
            raise ValueError(f"dangling edge endpoint {dst!r}")
        resolved.append((index[src], index[dst]))
    if attrs is None:
        attrs = [1.0] * len(resolved)
    return SwGraph(node_names=names, edges=tuple(resolved),
                   edge_attrs=tuple(float(a) for a in attrs))


def chain_sw_graph(n_signals: int, prefix: str = "signal_") -> SwGraph:
    """Chain of counters with forward edges: signal_1 -> signal_2 -> ..."""
    names = [f"{prefix}{i + 1}" for i in range(n_signals)]
    edges = [(names[i], names[i + 1]) for i in range(n_signals - 1)]
    return build_sw_graph(names, edges)


@dataclass(frozen=True)
class NwGraph:
    """Topology over cells with a dense relation matrix in [0, 1]."""

    cells: tuple[CellMeta, ...]
    relation: np.ndarray

    def __post_init__(self):
        rel = np.asarray(self.relation, dtype=np.float64)
        n = len(self.cells)
        if rel.shape != (n, n):
            raise ValueError(f"relation must be {n}x{n}, got {rel.shape}")
        if len({c.id for c in self.cells}) != n:
            raise ValueError("duplicate cell id in NwGraph")
        if not np.allclose(np.diag(rel), 1.0):
            raise ValueError("relation diagonal must be 1")
        if rel.min() < 0.0 or rel.max() > 1.0:
            raise ValueError("relation entries must lie in [0, 1]")
        object.__setattr__(self, "relation", _freeze(rel))

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def cell_ids(self) -> list[str]:
        return [c.id for c in self.cells]


def build_nw_graph(cells: Sequence[CellMeta],
                   rule: str = "area_complete",
                   radius: float | None = None) -> NwGraph:
    """Build the cell topology graph.

    rule "area_complete" connects every pair of cells sharing an area;
    rule "radius" connects cells within ``radius`` of each other and
    requires positions on every cell.  The diagonal is always 1.
    """
    cells = tuple(cells)
    if not cells:
        raise ValueError("need at least one cell")
    n = len(cells)
    rel = np.eye(n)
    if rule == "area_complete":
        for j in range(n):
            for k in range(j + 1, n):
                if cells[j].area == cells[k].area:
                    rel[j, k] = rel[k, j] = 1.0
    elif rule == "radius":
        if radius is None:
            raise ValueError("radius rule needs a radius")
        for c in cells:
            if c.position is None:
                raise ValueError(f"cell {c.id!r} has no position; radius rule needs one")
        pos = np.asarray([c.position for c in cells], dtype=np.float64)
        for j in range(n):
            for k in range(j + 1, n):
                if np.hypot(*(pos[j] - pos[k])) <= radius:
                    rel[j, k] = rel[k, j] = 1.0
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return NwGraph(cells=cells, relation=rel)


@dataclass(frozen=True)
class BatchedGraph:
    """Disjoint union of B copies of one SwGraph.

    Node u of sample s maps to row u + s*K; the batch vector maps each node
    copy back to its sample index.
    """

    edge_index: np.ndarray
    edge_attr: np.ndarray
    batch: np.ndarray
    n_nodes_per_sample: int
    batch_size: int

    def __post_init__(self):
        object.__setattr__(self, "edge_index", _freeze(np.asarray(self.edge_index, dtype=np.int64)))
        object.__setattr__(self, "edge_attr", _freeze(np.asarray(self.edge_attr, dtype=np.float64)))
        object.__setattr__(self, "batch", _freeze(np.asarray(self.batch, dtype=np.int64)))


def disjoint_union_batch(g: SwGraph, batch_size: int) -> BatchedGraph:
    """Stack ``batch_size`` copies of ``g`` with node offsets of K per sample."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    k = g.n_nodes
    base = g.edge_index()
    offsets = np.arange(batch_size, dtype=np.int64) * k
    edge_index = (base[:, None, :] + offsets[None, :, None]).reshape(2, -1)
    edge_attr = np.tile(np.asarray(g.edge_attrs, dtype=np.float64), batch_size)
    batch = np.repeat(np.arange(batch_size, dtype=np.int64), k)
    return BatchedGraph(edge_index=edge_index, edge_attr=edge_attr, batch=batch,
                        n_nodes_per_sample=k, batch_size=batch_size)
