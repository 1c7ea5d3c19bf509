import math

import numpy as np
import pytest

from gcdlab.autodiff import finite_diff_check
from gcdlab.diffusion import (
    CascadeConfig,
    NoiseSchedule,
    ancestral_step,
    channels_from_pair,
    conditioning_batch,
    init_cascade,
    mask_from_channels,
    q_sample,
    sample_cascade,
    stage_targets,
    train_stage,
    training_loss,
    _build_loss_tape,
)
from gcdlab.embed import FeatureConfig, node_features
from gcdlab.errors import ConfigError
from gcdlab.graphcond import EncoderConfig
from gcdlab.maskgraph import build_graph
from gcdlab.synthdata import SynthConfig, generate_sample


def tiny_setup(n_graphs=6, resolutions=(8,), hidden=(48,), blocks=(1,),
               steps=(40,), batch=(8,), unconditional=False, d_model=16):
    """Small cascade plus matching data for fast tests."""
    enc_cfg = EncoderConfig(d_model=d_model, d_k=d_model, d_ff=2 * d_model, layers=1)
    feat_cfg = FeatureConfig()
    cfg = CascadeConfig(
        resolutions=resolutions, hidden=hidden, blocks=blocks,
        train_steps=steps, batch=batch, unconditional=unconditional,
        sample_steps=6, cond_dropout=0.1,
    )
    cascade = init_cascade(cfg, enc_cfg, feat_cfg, seed=71)
    scfg = SynthConfig()
    stacks, graphs, feats = [], [], []
    for seed in range(n_graphs):
        img, mask = generate_sample(seed, scfg)
        g = build_graph(mask)
        stacks.append(channels_from_pair(img, mask, 3))
        graphs.append(g)
        feats.append(node_features(g, feat_cfg, 32))
    stacks = np.stack(stacks)
    cond = conditioning_batch(graphs, feats, enc_cfg)
    return cascade, stacks, graphs, cond


# -- schedule ---------------------------------------------------------------


def test_schedule_midpoint_symmetry():
    sched = NoiseSchedule()
    a, s, lam = sched.at(0.5)
    assert abs(a - math.sqrt(2) / 2) < 1e-15
    assert abs(s - math.sqrt(2) / 2) < 1e-15
    assert abs(lam) < 1e-12


def test_schedule_boundary_behavior():
    sched = NoiseSchedule()
    a, s, lam = sched.at(0.0)  # clipped to t_eps
    assert a > 0.99999
    assert 0.0 < s < 0.002
    assert lam > 12.0
    a1, s1, lam1 = sched.at(1.0)
    assert lam1 < -12.0


def test_schedule_preserves_variance():
    sched = NoiseSchedule()
    rng = np.random.default_rng(0)
    t = rng.uniform(sched.t_eps, 1.0 - sched.t_eps, size=1000)
    a, s, lam = sched.at(t)
    assert np.max(np.abs(a**2 + s**2 - 1.0)) < 1e-12
    # lambda strictly decreasing over the clipped domain
    ts = np.sort(t)
    lam_sorted = sched.at(ts)[2]
    assert np.all(np.diff(lam_sorted) < 0)


# -- forward process -----------------------------------------------------------


def test_q_sample_near_identity_at_start():
    sched = NoiseSchedule()
    x0 = np.full((4, 4), 0.5)
    eps = np.random.default_rng(1).standard_normal((4, 4))
    xt = q_sample(x0, sched.t_eps, eps, sched)
    bound = float(np.abs(eps).max()) * math.sin(0.5 * math.pi * sched.t_eps) + 1e-9
    assert np.max(np.abs(xt - x0)) <= bound + 2e-6  # alpha shrink is tiny


def test_q_sample_pure_noise_at_end():
    sched = NoiseSchedule()
    x0 = np.full((4, 4), 0.9)
    eps = np.random.default_rng(2).standard_normal((4, 4))
    xt = q_sample(x0, 1.0 - sched.t_eps, eps, sched)
    assert np.max(np.abs(xt - eps)) < 3e-3


def test_q_sample_moments_at_half():
    sched = NoiseSchedule()
    n = 10_000
    x0 = np.full((n,), 0.7)
    gen = np.random.default_rng(3)
    eps = gen.standard_normal(n)
    xt = q_sample(x0, 0.5, eps, sched)
    a, s, _ = sched.at(0.5)
    se_mean = s / math.sqrt(n)
    assert abs(xt.mean() - a * 0.7) < 3 * se_mean
    dev_var = np.var(xt - a * 0.7)
    se_var = s**2 * math.sqrt(2.0 / (n - 1))
    assert abs(dev_var - s**2) < 3 * se_var


def test_q_sample_shape_mismatch():
    sched = NoiseSchedule()
    with pytest.raises(Exception):
        q_sample(np.zeros((2, 2)), 0.5, np.zeros((3,)), sched)


# -- ancestral step ---------------------------------------------------------------


def test_ancestral_step_hand_trace():
    sched = NoiseSchedule()
    t, s = 0.8, 0.6
    x_t, x_hat, gamma, noise = 1.0, 0.5, 0.3, 0.7
    got = ancestral_step(
        np.asarray(x_t), t, s, np.asarray(x_hat), gamma, np.asarray(noise), sched
    )
    # independent scalar trace
    a_t, s_t = math.cos(math.pi * t / 2), math.sin(math.pi * t / 2)
    a_s, s_s = math.cos(math.pi * s / 2), math.sin(math.pi * s / 2)
    lam_t = math.log(a_t**2 / s_t**2)
    lam_s = math.log(a_s**2 / s_s**2)
    r = math.exp(lam_t - lam_s)
    mu = r * (a_s / a_t) * x_t + (1 - r) * a_s * x_hat
    var_sq = (1 - r) * s_s**2
    var_tq = (1 - r) * s_t**2
    expect = mu + math.sqrt(var_sq ** (1 - gamma) * var_tq**gamma) * noise
    assert abs(float(got) - expect) < 1e-12


def test_ancestral_step_variance_ordering():
    sched = NoiseSchedule()
    rng = np.random.default_rng(4)
    for _ in range(50):
        t = rng.uniform(0.1, 0.99)
        s = rng.uniform(sched.t_eps, t - 0.01)
        x = np.asarray(0.0)
        n = np.asarray(1.0)
        x0 = ancestral_step(x, t, s, x, 0.0, n, sched)  # std = sigma~_{s|t}
        x1 = ancestral_step(x, t, s, x, 1.0, n, sched)  # std = sigma_{t|s}
        assert float(x0) <= float(x1) + 1e-15


def test_ancestral_step_noiseless_terminal():
    sched = NoiseSchedule()
    x_hat = np.asarray(0.37)
    # as s -> t_eps with exact prediction, the state approaches x_hat
    x = ancestral_step(np.asarray(0.9), 0.05, sched.t_eps, x_hat, 0.3, None, sched)
    assert abs(float(x) - float(x_hat)) < 0.05


def test_ancestral_step_requires_s_below_t():
    sched = NoiseSchedule()
    with pytest.raises(ConfigError):
        ancestral_step(np.zeros(1), 0.3, 0.5, np.zeros(1), 0.0, None, sched)


def test_composed_steps_match_forward_marginals():
    # with a perfect predictor and gamma = 0, composing posterior steps
    # reproduces q(x_s | x_0) in distribution
    sched = NoiseSchedule()
    n = 10_000
    x0 = 0.8
    s_target = 0.35
    gen = np.random.default_rng(5)
    t0 = 1.0 - sched.t_eps
    a0, s0, _ = sched.at(t0)
    x = a0 * x0 + s0 * gen.standard_normal(n)
    grid = np.linspace(t0, s_target, 11)
    for i in range(10):
        noise = gen.standard_normal(n)
        x = ancestral_step(x, float(grid[i]), float(grid[i + 1]),
                           np.full(n, x0), 0.0, noise, sched)
    a_s, s_s, _ = sched.at(s_target)
    se_mean = s_s / math.sqrt(n)
    assert abs(x.mean() - a_s * x0) < 3 * se_mean
    assert abs(x.var() - s_s**2) < 0.05 * s_s**2


# -- channel stacks ----------------------------------------------------------------


def test_channel_roundtrip_recovers_semantics():
    cfg = SynthConfig()
    for seed in range(10):
        img, mask = generate_sample(seed, cfg)
        stack = channels_from_pair(img, mask, 3)
        back = mask_from_channels(stack, 3, min_component_area=1)
        # same per-class pixel sets
        for cls in (1, 2, 3):
            want = np.zeros(mask.shape, dtype=bool)
            for inst, c in mask.classes.items():
                if c == cls:
                    want |= mask.grid == inst
            got = np.zeros(mask.shape, dtype=bool)
            for inst, c in back.classes.items():
                if c == cls:
                    got |= back.grid == inst
            assert np.array_equal(want, got)


def test_mask_extraction_counts_components():
    stack = np.zeros((16, 16, 6))
    stack[2:5, 2:5, 3] = 1.0  # class 1 blob
    stack[10:14, 9:13, 5] = 1.0  # class 3 blob
    mask = mask_from_channels(stack, 3, min_component_area=4)
    assert sorted(mask.classes.values()) == [1, 3]


def test_mask_extraction_drops_specks():
    stack = np.zeros((16, 16, 6))
    stack[2, 2, 3] = 1.0  # single-pixel speck
    mask = mask_from_channels(stack, 3, min_component_area=4)
    assert mask.classes == {}


# -- training loss ------------------------------------------------------------------


def test_training_loss_zero_predictor_closed_form():
    cascade, stacks, graphs, cond = tiny_setup()
    x0_flat, _ = stage_targets(stacks, cascade.config, 0)
    got = training_loss(
        cascade, 0, stacks, cond, seed=9,
        denoiser_override=lambda i, x_t, lam, c: np.zeros_like(x_t),
    )
    want = float(np.mean(np.sum(x0_flat**2, axis=1)))
    assert abs(got - want) < 1e-9


def test_training_loss_perfect_prediction_is_zero():
    cascade, stacks, graphs, cond = tiny_setup()
    x0_flat, _ = stage_targets(stacks, cascade.config, 0)
    got = training_loss(
        cascade, 0, stacks, cond, seed=9,
        denoiser_override=lambda i, x_t, lam, c: x0_flat.copy(),
    )
    assert got == 0.0


def test_training_loss_deterministic():
    cascade, stacks, graphs, cond = tiny_setup()
    a = training_loss(cascade, 0, stacks, cond, seed=4)
    b = training_loss(cascade, 0, stacks, cond, seed=4)
    assert a == b
    c = training_loss(cascade, 0, stacks, cond, seed=5)
    assert a != c


def test_loss_gradient_matches_finite_differences():
    # tiny denoiser: few enough parameters for elementwise central differences
    enc_cfg = EncoderConfig(f_dim=35, d_model=6, d_k=6, d_ff=8, layers=1, n_max=16)
    cfg = CascadeConfig(resolutions=(4,), hidden=(6,), blocks=(1,),
                        train_steps=(1,), batch=(2,))
    feat_cfg = FeatureConfig()
    cascade = init_cascade(cfg, enc_cfg, feat_cfg, seed=13)
    scfg = SynthConfig()
    stacks, graphs, feats = [], [], []
    for seed in range(2):
        img, mask = generate_sample(seed, scfg)
        g = build_graph(mask)
        stacks.append(channels_from_pair(img, mask, 3))
        graphs.append(g)
        feats.append(node_features(g, feat_cfg, 32))
    cond = conditioning_batch(graphs, feats, enc_cfg)
    x0_flat, _ = stage_targets(np.stack(stacks), cfg, 0)
    tape, values, loss, _ = _build_loss_tape(cascade, 0, 2, train_encoder=True)
    from gcdlab.diffusion import _loss_inputs

    values.update(_loss_inputs(cascade, 0, x0_flat, None, cond, seed=3, step=0))
    n_params = sum(values[n].size for n in tape.param_names)
    assert n_params < 4000
    assert finite_diff_check(tape, values, loss, step=1e-5) < 1e-4


# -- stage training -------------------------------------------------------------------


def test_train_stage_lr_zero_keeps_params():
    cascade, stacks, graphs, cond = tiny_setup()
    before = {k: v.copy() for k, v in cascade.stage_params[0].items()}
    train_stage(cascade, 0, stacks, cond, seed=1, steps=5, lr=0.0)
    for k, v in cascade.stage_params[0].items():
        assert np.array_equal(v, before[k])


def test_train_stage_overfits_small_batch():
    cascade, stacks, graphs, cond = tiny_setup(n_graphs=8)
    history = train_stage(cascade, 0, stacks, cond, seed=2, steps=500, batch_size=8)
    assert np.mean(history[-20:]) < 0.1 * history[0]


def test_train_stage_deterministic_history():
    c1, stacks, graphs, cond = tiny_setup()
    h1 = train_stage(c1, 0, stacks, cond, seed=3, steps=12)
    c2, stacks2, graphs2, cond2 = tiny_setup()
    h2 = train_stage(c2, 0, stacks2, cond2, seed=3, steps=12)
    assert h1 == h2


# -- sampling ----------------------------------------------------------------------


def test_sample_cascade_oracle_collapse():
    cascade, stacks, graphs, cond = tiny_setup(
        n_graphs=3, resolutions=(8, 16, 32), hidden=(32, 32, 32),
        blocks=(1, 1, 1), steps=(1, 1, 1), batch=(2, 2, 2),
    )
    cfg = cascade.config
    gen = np.random.default_rng(10)
    targets = {}
    for i, res in enumerate(cfg.resolutions):
        targets[i] = gen.uniform(0.1, 0.9, size=(3, res * res * cfg.channels))

    def oracle(stage_idx, x_in, lam, cond_batch):
        return targets[stage_idx].copy()

    outs = sample_cascade(graphs[:3], cascade, steps=4, seed=0, denoiser_override=oracle)
    final = targets[len(cfg.resolutions) - 1]
    for b, (img, mask) in enumerate(outs):
        stack = final[b].reshape(32, 32, cfg.channels)
        assert np.array_equal(img, stack[..., :3])
        assert img.shape == (32, 32, 3)
        assert mask.shape == (32, 32)


def test_sample_cascade_deterministic():
    cascade, stacks, graphs, cond = tiny_setup(
        n_graphs=2, resolutions=(8,), hidden=(32,), blocks=(1,), steps=(3,), batch=(2,)
    )
    train_stage(cascade, 0, stacks, cond, seed=0, steps=3)
    a = sample_cascade(graphs[:2], cascade, steps=4, seed=7)
    b = sample_cascade(graphs[:2], cascade, steps=4, seed=7)
    for (ia, ma), (ib, mb) in zip(a, b):
        assert np.array_equal(ia, ib)
        assert np.array_equal(ma.grid, mb.grid)


def test_sample_requires_trained_stages():
    cascade, stacks, graphs, cond = tiny_setup(n_graphs=2)
    with pytest.raises(ConfigError, match="untrained"):
        sample_cascade(graphs[:2], cascade, steps=4, seed=0)


def test_conditioning_pathway_changes_output():
    cascade, stacks, graphs, cond = tiny_setup(n_graphs=4)
    train_stage(cascade, 0, stacks, cond, seed=5, steps=30)
    nonempty = [g for g in graphs if g.n_nodes > 0][:2]
    a = sample_cascade(nonempty, cascade, steps=4, seed=3, conditioned=True)
    b = sample_cascade(nonempty, cascade, steps=4, seed=3, conditioned=False)
    diff = max(np.max(np.abs(ia - ib)) for (ia, _), (ib, _) in zip(a, b))
    assert diff > 0.0
