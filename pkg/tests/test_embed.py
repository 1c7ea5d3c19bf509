import numpy as np
import pytest

from gcdlab.embed import (
    ByolConfig,
    FeatureConfig,
    byol_embed,
    byol_train,
    ema_update,
    init_byol,
    make_embedder,
    mask_object,
    node_features,
    pos_encoding,
)
from gcdlab.errors import ConfigError, ShapeError
from gcdlab.maskgraph import build_graph
from gcdlab.synthdata import LabeledMask, SynthConfig, generate_sample


def collect_crops(n_samples=30, seed0=0):
    cfg = SynthConfig()
    crops = []
    for seed in range(seed0, seed0 + n_samples):
        img, mask = generate_sample(seed, cfg)
        for i in mask.instance_ids():
            crops.append(mask_object(img, mask, i))
    return np.stack(crops)


def test_mask_object_full_coverage_is_identity():
    grid = np.ones((8, 8), dtype=np.int32)
    mask = LabeledMask(grid=grid, classes={1: 2})
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert np.array_equal(mask_object(img, mask, 1), img)


def test_mask_object_single_pixel():
    grid = np.zeros((8, 8), dtype=np.int32)
    grid[3, 5] = 1
    mask = LabeledMask(grid=grid, classes={1: 1})
    img = np.full((8, 8, 3), 0.7)
    out = mask_object(img, mask, 1)
    assert np.count_nonzero(out.sum(axis=2)) == 1
    assert np.array_equal(out[3, 5], img[3, 5])


def test_mask_object_zeroes_everything_else():
    cfg = SynthConfig()
    for seed in range(100):
        img, mask = generate_sample(seed, cfg)
        ids = mask.instance_ids()
        if not ids:
            continue
        out = mask_object(img, mask, ids[0])
        assert out[mask.grid != ids[0]].sum() == 0.0


def test_mask_object_missing_id_raises():
    grid = np.zeros((4, 4), dtype=np.int32)
    mask = LabeledMask(grid=grid, classes={})
    with pytest.raises(ShapeError):
        mask_object(np.zeros((4, 4, 3)), mask, 3)


def test_pos_encoding_origin_alternates():
    v = pos_encoding((0.0, 0.0), 16, 32)
    assert np.array_equal(v, np.tile([0.0, 1.0], 8))


def test_pos_encoding_unit_value():
    # image size 100 makes the normalized coordinate equal to the row index
    v = pos_encoding((1.0, 0.0), 16, 100)
    assert abs(v[0] - 0.8414709848) < 1e-10


def test_pos_encoding_unique_over_grid():
    seen = {}
    for r in range(32):
        for c in range(32):
            key = tuple(np.round(pos_encoding((r, c), 16, 32), 12))
            assert key not in seen
            seen[key] = (r, c)


def test_pos_encoding_rejects_bad_dim():
    with pytest.raises(ConfigError):
        pos_encoding((0, 0), 10, 32)


def test_ema_tau_one_freezes_target():
    params = init_byol(ByolConfig(), seed=0)
    before = {k: v.copy() for k, v in params.target.items()}
    online = {k: v + 1.0 for k, v in params.online.items()}
    ema_update(params.target, online, tau=1.0)
    for k in before:
        assert np.array_equal(params.target[k], before[k])


def test_ema_single_step_hand_value():
    target = {"w": np.zeros(3)}
    online = {"w": np.ones(3)}
    ema_update(target, online, tau=0.99)
    assert np.allclose(target["w"], 0.01, atol=1e-15)


def test_byol_training_halves_loss():
    crops = collect_crops(30)
    cfg = ByolConfig(steps=150, batch=16)
    _, history = byol_train(crops, cfg, seed=11)
    assert history[-1] < 0.5 * history[0]


def test_byol_loss_within_bounds():
    crops = collect_crops(10)
    cfg = ByolConfig(steps=20, batch=8)
    _, history = byol_train(crops, cfg, seed=3)
    assert all(0.0 <= v <= 4.0 for v in history)


def test_byol_empty_dataset_rejected():
    with pytest.raises(ConfigError):
        byol_train(np.zeros((1, 32, 32, 3)), ByolConfig(steps=1), seed=0)


def test_node_features_layout_and_padding():
    cfg = SynthConfig()
    img, mask = generate_sample(4, cfg)
    graph = build_graph(mask)
    fc = FeatureConfig()
    nf = node_features(graph, fc, image_size=32)
    n = graph.n_nodes
    assert nf.rows.shape == (16, 35)
    assert nf.valid[:n].all() and not nf.valid[n:].any()
    assert np.array_equal(nf.rows[n:], np.zeros((16 - n, 35)))
    for k in range(n):
        onehot = nf.rows[k, :3]
        assert onehot.sum() == 1.0 and np.count_nonzero(onehot) == 1
        assert onehot[graph.classes[k] - 1] == 1.0
        # position block is exactly the encoding of the node's COM
        expect = pos_encoding((graph.coms[k, 0], graph.coms[k, 1]), 16, 32)
        assert np.array_equal(nf.rows[k, 19:], expect)


def test_node_features_single_node_graph():
    grid = np.zeros((32, 32), dtype=np.int32)
    grid[5:9, 5:9] = 1
    mask = LabeledMask(grid=grid, classes={1: 2})
    graph = build_graph(mask)
    nf = node_features(graph, FeatureConfig(), image_size=32)
    assert nf.valid.sum() == 1
    assert np.array_equal(nf.rows[0, :3], [0.0, 1.0, 0.0])


def test_feature_dim_mismatch_raises():
    cfg = SynthConfig()
    _, mask = generate_sample(4, cfg)
    graph = build_graph(mask, embed_dim=8)
    if graph.n_nodes == 0:
        pytest.skip("empty sample")
    with pytest.raises(ConfigError):
        node_features(graph, FeatureConfig(d_object=16), image_size=32)


def test_embedder_modes_produce_16d_vectors():
    cfg = SynthConfig()
    img, mask = generate_sample(8, cfg)
    ids = mask.instance_ids()
    assert ids
    for mode in ("image", "manual"):
        emb = make_embedder(mode, img, mask)
        v = emb(ids[0])
        assert v.shape == (16,)
        assert np.isfinite(v).all()


def test_byol_embed_deterministic():
    crops = collect_crops(5)
    cfg = ByolConfig(steps=5, batch=4)
    params, _ = byol_train(crops, cfg, seed=1)
    a = byol_embed(params, crops[:3])
    b = byol_embed(params, crops[:3])
    assert np.array_equal(a, b)
