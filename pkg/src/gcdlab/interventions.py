"""Graph-space augmentation: node removal, class change, bridge-based
cut-paste composition, and linear interpolation between graphs.

All operations return canonically reordered graphs satisfying the
TissueGraph invariants; inputs are never mutated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import CapacityError, ConfigError, ShapeError
from .maskgraph import N_MAX_DEFAULT, TissueGraph, empty_graph, reorder

INTERVENTION_KINDS = ("remove", "change_class", "cut_paste", "cut_paste_short", "interpolate")


@dataclass
class InterventionSpec:
    kind: str
    node: int | None = None
    to_class: int | None = None
    t: float | None = None
    count: int = 1

    def __post_init__(self):
        if self.kind not in INTERVENTION_KINDS:
            raise ConfigError(f"intervention kind must be one of {INTERVENTION_KINDS}")


def _subgraph(graph: TissueGraph, keep: np.ndarray) -> TissueGraph:
    keep = np.asarray(keep, dtype=np.int64)
    src = graph.sources if graph.sources is not None else np.arange(graph.n_nodes)
    return TissueGraph(
        classes=graph.classes[keep].copy(),
        coms=graph.coms[keep].copy(),
        embeddings=graph.embeddings[keep].copy(),
        adj=graph.adj[np.ix_(keep, keep)].copy(),
        sources=np.asarray(src)[keep].copy(),
    )


def remove_node(graph: TissueGraph, v: int) -> TissueGraph:
    """Delete node v and its incident edges; survivors keep their attributes."""
    if not 0 <= v < graph.n_nodes:
        raise ShapeError(f"node {v} not in graph of {graph.n_nodes} nodes")
    keep = np.asarray([k for k in range(graph.n_nodes) if k != v], dtype=np.int64)
    out = reorder(_subgraph(graph, keep))
    out.validate()
    return out


def change_class(graph: TissueGraph, v: int, new_class: int, n_classes: int = 3) -> TissueGraph:
    """Relabel one node's semantic class; geometry and edges untouched."""
    if not 0 <= v < graph.n_nodes:
        raise ShapeError(f"node {v} not in graph of {graph.n_nodes} nodes")
    if not 1 <= new_class <= n_classes:
        raise ConfigError(f"class {new_class} out of range 1..{n_classes}")
    out = graph.copy()
    out.classes[v] = new_class
    out = reorder(out)
    out.validate(n_classes)
    return out


def connected_components(adj: np.ndarray) -> list[list[int]]:
    n = adj.shape[0]
    seen = [False] * n
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        stack = [s]
        seen[s] = True
        comp = []
        while stack:
            u = stack.pop()
            comp.append(u)
            for w in np.flatnonzero(adj[u]):
                if not seen[w]:
                    seen[w] = True
                    stack.append(int(w))
        comps.append(sorted(comp))
    return comps


def find_bridges(graph: TissueGraph) -> list[tuple[int, int]]:
    """All edges whose removal disconnects a component (iterative lowpoint DFS)."""
    n = graph.n_nodes
    adj = graph.adj
    neighbors = [list(np.flatnonzero(adj[u])) for u in range(n)]
    disc = [-1] * n
    low = [0] * n
    bridges: list[tuple[int, int]] = []
    counter = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        # stack entries: (node, parent, iterator position)
        stack = [(root, -1, 0)]
        disc[root] = low[root] = counter
        counter += 1
        while stack:
            u, parent, i = stack.pop()
            if i < len(neighbors[u]):
                stack.append((u, parent, i + 1))
                w = int(neighbors[u][i])
                if disc[w] == -1:
                    disc[w] = low[w] = counter
                    counter += 1
                    stack.append((w, u, 0))
                elif w != parent:
                    low[u] = min(low[u], disc[w])
            else:
                if parent != -1:
                    low[parent] = min(low[parent], low[u])
                    if low[u] > disc[parent]:
                        bridges.append((min(parent, u), max(parent, u)))
    return sorted(bridges)


def split_on_bridge(graph: TissueGraph, edge: tuple[int, int]) -> tuple[TissueGraph, TissueGraph]:
    """The two components flanking a bridge after deleting it.

    For a connected graph these partition the node set; pre-existing other
    components are not part of either side.
    """
    i, j = int(edge[0]), int(edge[1])
    if graph.adj[i, j] != 1:
        raise ShapeError(f"({i}, {j}) is not an edge")
    if (min(i, j), max(i, j)) not in find_bridges(graph):
        raise ShapeError(f"({i}, {j}) is not a bridge")
    adj = graph.adj.copy()
    adj[i, j] = adj[j, i] = 0
    comps = connected_components(adj)
    side_i = next(c for c in comps if i in c)
    side_j = next(c for c in comps if j in c)
    return (
        reorder(_subgraph(graph, np.asarray(side_i))),
        reorder(_subgraph(graph, np.asarray(side_j))),
    )


def bridge_subgraph_pool(graphs: list[TissueGraph]) -> list[TissueGraph]:
    """Split every connected component of every graph on each of its bridges.

    Components without bridges contribute themselves, so the pool is never
    empty when any non-empty graph exists.
    """
    pool: list[TissueGraph] = []
    for g in graphs:
        if g.n_nodes == 0:
            continue
        for comp in connected_components(g.adj):
            part = reorder(_subgraph(g, np.asarray(comp)))
            bridges = find_bridges(part)
            if not bridges:
                pool.append(part)
                continue
            for e in bridges:
                g1, g2 = split_on_bridge(part, e)
                pool.append(g1)
                pool.append(g2)
    return pool


def _translate(graph: TissueGraph, dr: float, dc: float) -> TissueGraph:
    out = graph.copy()
    out.coms[:, 0] += dr
    out.coms[:, 1] += dc
    return out


def _bbox(coms: np.ndarray) -> tuple[float, float, float, float]:
    return (
        float(coms[:, 0].min()),
        float(coms[:, 1].min()),
        float(coms[:, 0].max()),
        float(coms[:, 1].max()),
    )


def cut_paste(
    pool: list[TissueGraph],
    k_max: int,
    seed: int,
    n_max: int = N_MAX_DEFAULT,
    image_size: int = 32,
) -> TissueGraph:
    """Compose 2..k_max pool subgraphs into one graph on a tile grid.

    Parts are translated so their COM bounding boxes sit in disjoint tiles;
    consecutive parts are joined by a single edge between their mutually
    nearest nodes. Compositions exceeding n_max nodes or whose parts do not
    fit their tiles are rejected and resampled (at most 100 times).
    """
    if not pool:
        raise ConfigError("cut-paste needs a non-empty subgraph pool")
    gen = rngmod.stream(seed, "cut-paste")
    for _attempt in range(100):
        k = int(gen.integers(2, k_max + 1)) if k_max >= 2 else 1
        k = min(k, len(pool))
        g_cols = math.ceil(math.sqrt(k))
        g_rows = math.ceil(k / g_cols)
        tile_h = image_size / g_rows
        tile_w = image_size / g_cols
        # draw only among parts whose COM bbox fits a tile
        eligible = [
            idx
            for idx, p in enumerate(pool)
            if _bbox(p.coms)[2] - _bbox(p.coms)[0] <= tile_h - 1
            and _bbox(p.coms)[3] - _bbox(p.coms)[1] <= tile_w - 1
        ]
        if len(eligible) < k:
            continue
        picks = gen.choice(len(eligible), size=k, replace=False)
        parts = [pool[eligible[int(p)]] for p in picks]
        if sum(p.n_nodes for p in parts) > n_max:
            continue
        placed = []
        for p_idx, part in enumerate(parts):
            r0, c0, r1, c1 = _bbox(part.coms)
            tr = p_idx // g_cols
            tc = p_idx % g_cols
            target_r = tr * tile_h + tile_h / 2.0
            target_c = tc * tile_w + tile_w / 2.0
            placed.append(
                _translate(part, target_r - (r0 + r1) / 2.0, target_c - (c0 + c1) / 2.0)
            )
        return _join_parts(placed)
    raise CapacityError("cut-paste rejected 100 consecutive compositions")


def _join_parts(parts: list[TissueGraph]) -> TissueGraph:
    sizes = [p.n_nodes for p in parts]
    offsets = np.cumsum([0] + sizes)
    n = int(offsets[-1])
    classes = np.concatenate([p.classes for p in parts])
    coms = np.concatenate([p.coms for p in parts])
    emb = np.concatenate([p.embeddings for p in parts])
    adj = np.zeros((n, n), dtype=np.int8)
    for idx, p in enumerate(parts):
        o = offsets[idx]
        adj[o : o + sizes[idx], o : o + sizes[idx]] = p.adj
    # one edge between mutually nearest nodes of consecutive parts
    for idx in range(len(parts) - 1):
        a0, a1 = offsets[idx], offsets[idx + 1]
        b0, b1 = offsets[idx + 1], offsets[idx + 2]
        best = None
        for u in range(a0, a1):
            for v in range(b0, b1):
                d = float(np.sum((coms[u] - coms[v]) ** 2))
                if best is None or d < best[0]:
                    best = (d, u, v)
        assert best is not None
        adj[best[1], best[2]] = adj[best[2], best[1]] = 1
    out = reorder(
        TissueGraph(classes=classes, coms=coms, embeddings=emb, adj=adj, sources=None)
    )
    out.validate()
    return out


def cut_paste_short(pool, seed, n_max=N_MAX_DEFAULT, image_size=32) -> TissueGraph:
    """Restricted composition: at most two subgraphs."""
    return cut_paste(pool, k_max=2, seed=seed, n_max=n_max, image_size=image_size)


def interpolate(g_a: TissueGraph, g_b: TissueGraph, t: float) -> TissueGraph:
    """Blend two graphs: greedy class-constrained nearest-COM matching,
    linear COM/embedding interpolation, structure from the dominant side."""
    if not 0.0 <= t <= 1.0:
        raise ConfigError("interpolation parameter must lie in [0, 1]")
    if g_a.embeddings.shape[1] != g_b.embeddings.shape[1] and g_a.n_nodes and g_b.n_nodes:
        raise ShapeError("embedding dims differ between endpoints")
    matches: dict[int, int] = {}  # a index -> b index
    used_b: set[int] = set()
    for i in range(g_a.n_nodes):
        best = None
        for j in range(g_b.n_nodes):
            if j in used_b or g_b.classes[j] != g_a.classes[i]:
                continue
            d = float(np.sum((g_a.coms[i] - g_b.coms[j]) ** 2))
            if best is None or d < best[0]:
                best = (d, j)
        if best is not None:
            matches[i] = best[1]
            used_b.add(best[1])

    take_a = t < 0.5
    base = g_a if take_a else g_b
    if base.n_nodes == 0:
        return empty_graph(base.embeddings.shape[1] if base.n_nodes else g_a.embeddings.shape[1])
    back = {j: i for i, j in matches.items()}
    classes = base.classes.copy()
    coms = base.coms.copy()
    emb = base.embeddings.copy()
    for k in range(base.n_nodes):
        if take_a and k in matches:
            j = matches[k]
            coms[k] = (1 - t) * g_a.coms[k] + t * g_b.coms[j]
            emb[k] = (1 - t) * g_a.embeddings[k] + t * g_b.embeddings[j]
        elif not take_a and k in back:
            i = back[k]
            coms[k] = (1 - t) * g_a.coms[i] + t * g_b.coms[k]
            emb[k] = (1 - t) * g_a.embeddings[i] + t * g_b.embeddings[k]
    out = reorder(
        TissueGraph(classes=classes, coms=coms, embeddings=emb, adj=base.adj.copy(), sources=None)
    )
    out.validate()
    return out


def apply_intervention(
    graph_pool: list[TissueGraph],
    spec: InterventionSpec,
    index: int,
    seed: int,
    n_max: int = N_MAX_DEFAULT,
    image_size: int = 32,
    n_classes: int = 3,
) -> TissueGraph:
    """One intervention instance, selecting operands deterministically."""
    gen = rngmod.stream(seed, "intervene", spec.kind, index)
    nonempty = [g for g in graph_pool if g.n_nodes > 0]
    if not nonempty:
        raise ConfigError("intervention needs at least one non-empty graph")
    g = nonempty[int(gen.integers(0, len(nonempty)))]
    if spec.kind == "remove":
        v = spec.node if spec.node is not None else int(gen.integers(0, g.n_nodes))
        return remove_node(g, v)
    if spec.kind == "change_class":
        v = spec.node if spec.node is not None else int(gen.integers(0, g.n_nodes))
        if spec.to_class is not None:
            c = spec.to_class
        else:
            others = [c for c in range(1, n_classes + 1) if c != int(g.classes[v])]
            c = int(others[int(gen.integers(0, len(others)))])
        return change_class(g, v, c, n_classes)
    if spec.kind in ("cut_paste", "cut_paste_short"):
        pool = bridge_subgraph_pool(nonempty)
        k_max = 2 if spec.kind == "cut_paste_short" else 4
        return cut_paste(
            pool, k_max, rngmod.derive_key(seed, "cp", index), n_max, image_size
        )
    if spec.kind == "interpolate":
        gb = nonempty[int(gen.integers(0, len(nonempty)))]
        t = spec.t if spec.t is not None else float(gen.uniform())
        return interpolate(g, gb, t)
    raise ConfigError(f"unknown intervention {spec.kind!r}")
