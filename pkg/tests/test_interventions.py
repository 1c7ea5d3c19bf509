import numpy as np
import pytest

from gcdlab.errors import ConfigError, ShapeError
from gcdlab.interventions import (
    InterventionSpec,
    apply_intervention,
    bridge_subgraph_pool,
    change_class,
    connected_components,
    cut_paste,
    cut_paste_short,
    find_bridges,
    interpolate,
    remove_node,
    split_on_bridge,
)
from gcdlab.maskgraph import TissueGraph, build_graph, reorder
from gcdlab.synthdata import SynthConfig, generate_sample


def graph_from_edges(n, edges, classes=None, coms=None, d=4, seed=0):
    rng = np.random.default_rng(seed)
    adj = np.zeros((n, n), dtype=np.int8)
    for i, j in edges:
        adj[i, j] = adj[j, i] = 1
    if classes is None:
        classes = rng.integers(1, 4, size=n)
    if coms is None:
        coms = rng.uniform(2, 29, size=(n, 2))
    g = TissueGraph(
        classes=np.asarray(classes, dtype=np.int64),
        coms=np.asarray(coms, dtype=np.float64),
        embeddings=rng.normal(size=(n, d)),
        adj=adj,
        sources=np.arange(n, dtype=np.int64),
    )
    return reorder(g)


def random_graph(rng, n_low=1, n_high=12):
    n = int(rng.integers(n_low, n_high + 1))
    p = rng.uniform(0.15, 0.7)
    adj = (rng.uniform(size=(n, n)) < p).astype(np.int8)
    adj = np.triu(adj, 1)
    adj = adj + adj.T
    return graph_from_edges(
        n,
        [(i, j) for i in range(n) for j in range(i + 1, n) if adj[i, j]],
        seed=int(rng.integers(0, 2**31)),
    )


def brute_force_bridges(graph):
    base = len(connected_components(graph.adj))
    out = []
    for i in range(graph.n_nodes):
        for j in range(i + 1, graph.n_nodes):
            if graph.adj[i, j]:
                adj = graph.adj.copy()
                adj[i, j] = adj[j, i] = 0
                if len(connected_components(adj)) > base:
                    out.append((i, j))
    return sorted(out)


def test_remove_from_single_node_graph_gives_empty():
    g = graph_from_edges(1, [])
    out = remove_node(g, 0)
    assert out.n_nodes == 0


def test_remove_from_triangle_leaves_one_edge():
    g = graph_from_edges(3, [(0, 1), (1, 2), (0, 2)])
    out = remove_node(g, 0)
    assert out.n_nodes == 2
    assert out.edge_set() == {(0, 1)}


def test_remove_is_principal_submatrix():
    rng = np.random.default_rng(1)
    for _ in range(30):
        g = random_graph(rng, n_low=2)
        v = int(rng.integers(0, g.n_nodes))
        out = remove_node(g, v)
        assert out.n_nodes == g.n_nodes - 1
        keep = [k for k in range(g.n_nodes) if k != v]
        sub = g.adj[np.ix_(keep, keep)]
        # compare as multisets of (class, com, row) after canonicalization
        expect = reorder(
            TissueGraph(
                classes=g.classes[keep],
                coms=g.coms[keep],
                embeddings=g.embeddings[keep],
                adj=sub,
                sources=np.asarray(keep),
            )
        )
        assert np.array_equal(out.adj, expect.adj)
        assert np.array_equal(out.coms, expect.coms)


def test_change_class_identity():
    g = graph_from_edges(4, [(0, 1), (2, 3)])
    c = int(g.classes[1])
    out = change_class(g, 1, c)
    assert np.array_equal(out.classes, g.classes)
    assert np.array_equal(out.adj, g.adj)
    assert np.array_equal(out.coms, g.coms)


def test_change_class_only_touches_one_node():
    g = graph_from_edges(5, [(0, 1), (1, 2), (3, 4)], classes=[1, 1, 2, 3, 2])
    out = change_class(g, 0, 2)
    # adjacency is preserved as a multiset of edges keyed by node identity (COM)
    def edges_by_com(gr):
        return {
            tuple(sorted((tuple(gr.coms[i]), tuple(gr.coms[j]))))
            for i, j in gr.edge_set()
        }

    assert edges_by_com(out) == edges_by_com(g)
    by_com_old = {tuple(g.coms[k]): int(g.classes[k]) for k in range(5)}
    by_com_new = {tuple(out.coms[k]): int(out.classes[k]) for k in range(5)}
    changed = [c for c in by_com_old if by_com_old[c] != by_com_new[c]]
    assert len(changed) == 1


def test_change_class_adjacency_bitidentical_many():
    rng = np.random.default_rng(3)
    for _ in range(100):
        g = random_graph(rng)
        v = int(rng.integers(0, g.n_nodes))
        out = change_class(g, v, int(g.classes[v]))  # same class: no reorder
        assert np.array_equal(out.adj, g.adj)


def test_change_class_out_of_range():
    g = graph_from_edges(2, [(0, 1)])
    with pytest.raises(ConfigError):
        change_class(g, 0, 9)


def test_tree_every_edge_is_bridge():
    g = graph_from_edges(6, [(0, 1), (1, 2), (2, 3), (2, 4), (4, 5)])
    assert find_bridges(g) == sorted(g.edge_set())


def test_cycle_has_no_bridges():
    g = graph_from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)])
    assert find_bridges(g) == []


def test_bridges_match_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(100):
        g = random_graph(rng)
        assert find_bridges(g) == brute_force_bridges(g)


def test_split_on_bridge_two_singletons():
    g = graph_from_edges(2, [(0, 1)])
    g1, g2 = split_on_bridge(g, (0, 1))
    assert g1.n_nodes == 1 and g2.n_nodes == 1


def test_split_on_bridge_partition_and_connectivity():
    rng = np.random.default_rng(11)
    done = 0
    while done < 25:
        g = random_graph(rng, n_low=3)
        if len(connected_components(g.adj)) != 1:
            continue
        bridges = find_bridges(g)
        if not bridges:
            continue
        e = bridges[int(rng.integers(0, len(bridges)))]
        g1, g2 = split_on_bridge(g, e)
        assert g1.n_nodes + g2.n_nodes == g.n_nodes
        assert len(connected_components(g1.adj)) == 1
        assert len(connected_components(g2.adj)) == 1
        done += 1


def test_split_requires_bridge():
    g = graph_from_edges(3, [(0, 1), (1, 2), (0, 2)])
    with pytest.raises(ShapeError):
        split_on_bridge(g, (0, 1))


def test_cut_paste_single_part_pool():
    g = graph_from_edges(3, [(0, 1), (1, 2)], coms=[[3, 3], [5, 7], [9, 4]])
    out = cut_paste([g], k_max=4, seed=0)
    assert out.n_nodes == 3
    assert len(out.edge_set()) == len(g.edge_set())


def test_cut_paste_two_parts_single_join_edge():
    a = graph_from_edges(3, [(0, 1), (1, 2)], coms=[[2, 2], [4, 5], [7, 3]])
    b = graph_from_edges(4, [(0, 1), (1, 2), (2, 3)], coms=[[3, 3], [5, 6], [8, 4], [9, 9]])
    out = cut_paste_short([a, b], seed=1)
    assert out.n_nodes == 7
    assert len(out.edge_set()) == len(a.edge_set()) + len(b.edge_set()) + 1


def test_cut_paste_geometry_contained_and_disjoint():
    cfg = SynthConfig()
    graphs = []
    for seed in range(30):
        _, mask = generate_sample(seed, cfg)
        g = build_graph(mask)
        if g.n_nodes:
            graphs.append(g)
    pool = bridge_subgraph_pool(graphs)
    for trial in range(100):
        out = cut_paste(pool, k_max=4, seed=trial, image_size=32)
        assert out.n_nodes <= 16
        assert np.all(out.coms >= -0.51) and np.all(out.coms <= 32.51)
        out.validate()


def test_cut_paste_empty_pool_rejected():
    with pytest.raises(ConfigError):
        cut_paste([], k_max=2, seed=0)


def test_interpolate_endpoints():
    rng = np.random.default_rng(5)
    a = random_graph(rng, n_low=2)
    b = random_graph(rng, n_low=2)
    out0 = interpolate(a, b, 0.0)
    assert np.array_equal(out0.coms, a.coms)
    assert np.array_equal(out0.classes, a.classes)
    assert np.array_equal(out0.adj, a.adj)
    out1 = interpolate(a, b, 1.0)
    assert np.array_equal(out1.coms, b.coms)
    assert np.array_equal(out1.adj, b.adj)


def test_interpolate_midpoint_com():
    a = graph_from_edges(1, [], classes=[2], coms=[[2.0, 2.0]])
    b = graph_from_edges(1, [], classes=[2], coms=[[6.0, 10.0]])
    mid = interpolate(a, b, 0.5)
    assert np.array_equal(mid.coms[0], [4.0, 6.0])


def test_all_interventions_preserve_invariants():
    rng = np.random.default_rng(13)
    cfg = SynthConfig()
    graphs = []
    for seed in range(40):
        _, mask = generate_sample(seed, cfg)
        g = build_graph(mask)
        if g.n_nodes:
            graphs.append(g)
    specs = [
        InterventionSpec("remove"),
        InterventionSpec("change_class"),
        InterventionSpec("cut_paste"),
        InterventionSpec("cut_paste_short"),
        InterventionSpec("interpolate"),
    ]
    for k in range(500):
        spec = specs[k % len(specs)]
        out = apply_intervention(graphs, spec, index=k, seed=99)
        out.validate(n_classes=3)


def test_remove_then_reorder_idempotent():
    rng = np.random.default_rng(17)
    for _ in range(20):
        g = random_graph(rng, n_low=2)
        out = remove_node(g, 0)
        again = reorder(out)
        assert np.array_equal(out.adj, again.adj)
        assert np.array_equal(out.coms, again.coms)
