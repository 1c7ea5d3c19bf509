"""Proxy graphs from labeled masks.

A node per instance carries (semantic class, center of mass, object
embedding). Nodes i, j are connected iff the straight segment between
their centers of mass crosses no pixel of any third instance; the segment
is discretized by supercover rasterization so the continuous criterion is
honored conservatively on the grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import CapacityError, ShapeError
from .kernels import segment_blocked
from .synthdata import LabeledMask

N_MAX_DEFAULT = 16


@dataclass
class TissueGraph:
    """Node attributes plus a symmetric 0/1 adjacency with zero diagonal."""

    classes: np.ndarray  # (N,) int
    coms: np.ndarray  # (N, 2) float, (row, col)
    embeddings: np.ndarray  # (N, d) float
    adj: np.ndarray  # (N, N) int8
    sources: np.ndarray | None = None  # original instance ids, optional

    @property
    def n_nodes(self) -> int:
        return int(self.classes.shape[0])

    def validate(self, n_classes: int | None = None, n_max: int = N_MAX_DEFAULT) -> None:
        n = self.n_nodes
        if self.coms.shape != (n, 2) or self.adj.shape != (n, n):
            raise ShapeError("graph field shapes disagree")
        if self.embeddings.shape[0] != n:
            raise ShapeError("embedding count differs from node count")
        if n > n_max:
            raise CapacityError(f"graph has {n} nodes, capacity is {n_max}")
        if n and not np.array_equal(self.adj, self.adj.T):
            raise ShapeError("adjacency is not symmetric")
        if n and np.any(np.diag(self.adj) != 0):
            raise ShapeError("adjacency has nonzero diagonal")
        if n and not np.isin(self.adj, (0, 1)).all():
            raise ShapeError("adjacency entries must be 0/1")
        if n_classes is not None and n:
            if self.classes.min() < 1 or self.classes.max() > n_classes:
                raise ShapeError("node class out of range")

    def copy(self) -> "TissueGraph":
        return TissueGraph(
            classes=self.classes.copy(),
            coms=self.coms.copy(),
            embeddings=self.embeddings.copy(),
            adj=self.adj.copy(),
            sources=None if self.sources is None else self.sources.copy(),
        )

    def edge_set(self) -> set[tuple[int, int]]:
        out = set()
        n = self.n_nodes
        for i in range(n):
            for j in range(i + 1, n):
                if self.adj[i, j]:
                    out.add((i, j))
        return out


def empty_graph(embed_dim: int = 0) -> TissueGraph:
    return TissueGraph(
        classes=np.zeros(0, dtype=np.int64),
        coms=np.zeros((0, 2)),
        embeddings=np.zeros((0, embed_dim)),
        adj=np.zeros((0, 0), dtype=np.int8),
        sources=np.zeros(0, dtype=np.int64),
    )


def canonical_order(classes, coms, sources) -> np.ndarray:
    """Deterministic node order: (class, COM row, COM col, source id)."""
    keys = list(zip(classes.tolist(), coms[:, 0].tolist(), coms[:, 1].tolist(), sources))
    return np.asarray(sorted(range(len(keys)), key=keys.__getitem__), dtype=np.int64)


def reorder(graph: TissueGraph) -> TissueGraph:
    """Return the graph with nodes sorted into canonical order."""
    n = graph.n_nodes
    src = graph.sources if graph.sources is not None else np.arange(n, dtype=np.int64)
    perm = canonical_order(graph.classes, graph.coms, src.tolist())
    return TissueGraph(
        classes=graph.classes[perm],
        coms=graph.coms[perm],
        embeddings=graph.embeddings[perm],
        adj=graph.adj[np.ix_(perm, perm)],
        sources=src[perm],
    )


def compute_coms(mask: LabeledMask) -> dict[int, tuple[float, float]]:
    """Per-instance arithmetic mean of pixel coordinates, real valued."""
    grid = mask.grid
    ids = mask.instance_ids()
    if not ids:
        return {}
    max_id = max(ids)
    flat = grid.reshape(-1).astype(np.int64)
    counts = np.bincount(flat, minlength=max_id + 1)
    rows = np.repeat(np.arange(grid.shape[0], dtype=np.float64), grid.shape[1])
    cols = np.tile(np.arange(grid.shape[1], dtype=np.float64), grid.shape[0])
    row_sum = np.bincount(flat, weights=rows, minlength=max_id + 1)
    col_sum = np.bincount(flat, weights=cols, minlength=max_id + 1)
    out = {}
    for i in ids:
        if counts[i] == 0:
            raise ShapeError(f"instance {i} has no pixels")
        out[i] = (row_sum[i] / counts[i], col_sum[i] / counts[i])
    return out


def visibility_edge(
    mask: LabeledMask,
    i: int,
    j: int,
    coms: dict[int, tuple[float, float]] | None = None,
) -> bool:
    """Edge iff no third instance's pixels touch the COM-to-COM segment.

    Background and the two endpoint instances never block. Coincident COMs
    produce an edge (the blocking set is empty by convention).
    """
    if i == j:
        raise ShapeError("visibility_edge needs two distinct instances")
    if coms is None:
        coms = compute_coms(mask)
    ri, ci = coms[i]
    rj, cj = coms[j]
    if ri == rj and ci == cj:
        return True
    return not segment_blocked(mask.grid, ri, ci, rj, cj, i, j)


def build_graph(
    mask: LabeledMask,
    embedder: Callable[[int], np.ndarray] | None = None,
    embed_dim: int = 16,
    n_max: int = N_MAX_DEFAULT,
) -> TissueGraph:
    """Graph over all instances, canonically ordered, visibility adjacency."""
    ids = mask.instance_ids()
    n = len(ids)
    if n > n_max:
        raise CapacityError(f"mask has {n} instances, graph capacity is {n_max}")
    if n == 0:
        return empty_graph(embed_dim)
    coms = compute_coms(mask)
    classes = np.asarray([mask.classes[i] for i in ids], dtype=np.int64)
    com_arr = np.asarray([coms[i] for i in ids], dtype=np.float64)
    perm = canonical_order(classes, com_arr, ids)
    ids = [ids[p] for p in perm]
    classes = classes[perm]
    com_arr = com_arr[perm]

    if embedder is not None:
        embeddings = np.stack([np.asarray(embedder(i), dtype=np.float64) for i in ids])
    else:
        embeddings = np.zeros((n, embed_dim))

    adj = np.zeros((n, n), dtype=np.int8)
    for a in range(n):
        for b in range(a + 1, n):
            if visibility_edge(mask, ids[a], ids[b], coms):
                adj[a, b] = adj[b, a] = 1
    graph = TissueGraph(
        classes=classes,
        coms=com_arr,
        embeddings=embeddings,
        adj=adj,
        sources=np.asarray(ids, dtype=np.int64),
    )
    graph.validate(n_max=n_max)
    return graph


# -- JSON wire format -------------------------------------------------------


def graph_to_json(graph: TissueGraph) -> dict:
    nodes = []
    for k in range(graph.n_nodes):
        nodes.append(
            {
                "id": int(k),
                "class": int(graph.classes[k]),
                "com": [float(graph.coms[k, 0]), float(graph.coms[k, 1])],
                "embedding": [float(v) for v in graph.embeddings[k]],
            }
        )
    edges = [[int(i), int(j)] for i, j in sorted(graph.edge_set())]
    return {"nodes": nodes, "edges": edges}


def graph_from_json(doc: dict) -> TissueGraph:
    nodes = doc["nodes"]
    n = len(nodes)
    if n == 0:
        return empty_graph()
    classes = np.asarray([nd["class"] for nd in nodes], dtype=np.int64)
    coms = np.asarray([nd["com"] for nd in nodes], dtype=np.float64)
    emb = np.asarray([nd["embedding"] for nd in nodes], dtype=np.float64)
    adj = np.zeros((n, n), dtype=np.int8)
    for i, j in doc["edges"]:
        adj[i, j] = adj[j, i] = 1
    np.fill_diagonal(adj, 0)
    return TissueGraph(classes=classes, coms=coms, embeddings=emb, adj=adj)


def save_graph(graph: TissueGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph_to_json(graph), sort_keys=True))


def load_graph(path: str | Path) -> TissueGraph:
    return graph_from_json(json.loads(Path(path).read_text()))
