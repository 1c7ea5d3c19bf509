"""Variance-preserving diffusion with graph conditioning.

A three-stage cascade generates joint image+mask channel stacks: the base
stage samples 8x8 from noise, two super-resolution stages upsample to
16x16 and 32x32, every stage conditioned on graph tokens. Channel layout
is [RGB | class one-hot]; all channels live in [0, 1]. Denoisers are
residual perceptrons over flattened pixels with a log-SNR embedding, a
sum-pooled conditioning read at the input and one cross-attention read of
the conditioning tokens per block; they predict the clean signal directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import rng as rngmod
from .autodiff import AdamState, Tape, adam_step, eval_and_backprop, init_matrix
from .embed import FeatureConfig, NodeFeatures, declare, node_features
from .errors import ConfigError, NumericError, ShapeError
from .graphcond import (
    EncoderConfig,
    GraphEncoderParams,
    build_graph_encoder,
    conditioning_inputs,
    init_graph_encoder,
)
from .maskgraph import TissueGraph
from .synthdata import LabeledMask

T_EPS_DEFAULT = 1e-3
N_LAMBDA_FEATURES = 16


# -- noise schedule -----------------------------------------------------------


@dataclass
class NoiseSchedule:
    """Cosine variance-preserving schedule on t in [t_eps, 1 - t_eps]."""

    t_eps: float = T_EPS_DEFAULT

    def clip(self, t):
        return np.clip(t, self.t_eps, 1.0 - self.t_eps)

    def at(self, t):
        """(alpha_t, sigma_t, lambda_t); lambda is the log signal-to-noise ratio."""
        t = self.clip(np.asarray(t, dtype=np.float64))
        alpha = np.cos(0.5 * np.pi * t)
        sigma = np.sin(0.5 * np.pi * t)
        lam = 2.0 * (np.log(alpha) - np.log(sigma))
        return alpha, sigma, lam


def q_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule):
    """Forward noising x_t = alpha_t x0 + sigma_t eps; t broadcasts per sample."""
    if eps.shape != x0.shape:
        raise ShapeError(f"noise shape {eps.shape} != data shape {x0.shape}")
    alpha, sigma, _ = schedule.at(t)
    alpha = np.asarray(alpha)
    sigma = np.asarray(sigma)
    if alpha.ndim:
        extra = x0.ndim - alpha.ndim
        alpha = alpha.reshape(alpha.shape + (1,) * extra)
        sigma = sigma.reshape(sigma.shape + (1,) * extra)
    return alpha * x0 + sigma * eps


def lambda_features(lam: np.ndarray) -> np.ndarray:
    """Fixed sinusoidal features of the log-SNR, shape (..., 16)."""
    freqs = np.geomspace(0.02, 2.0, N_LAMBDA_FEATURES // 2)
    lam = np.asarray(lam, dtype=np.float64)[..., None]
    return np.concatenate([np.sin(lam * freqs), np.cos(lam * freqs)], axis=-1)


def ancestral_step(
    x_t: np.ndarray,
    t: float,
    s: float,
    x_hat: np.ndarray,
    gamma: float,
    noise: np.ndarray | None,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One reverse step t -> s (s < t) of the VP posterior.

    With r = exp(lambda_t - lambda_s): the posterior mean is
    r (alpha_s / alpha_t) x_t + (1 - r) alpha_s x_hat and the step standard
    deviation interpolates ((1-r) sigma_s^2)^(1-gamma) ((1-r) sigma_t^2)^gamma
    in log space. `noise=None` performs the terminal noiseless step.
    """
    if s >= t:
        raise ConfigError(f"ancestral step needs s < t, got s={s}, t={t}")
    alpha_t, sigma_t, lam_t = schedule.at(t)
    alpha_s, sigma_s, lam_s = schedule.at(s)
    r = math.exp(float(lam_t - lam_s))
    mean = r * (alpha_s / alpha_t) * x_t + (1.0 - r) * alpha_s * x_hat
    if noise is None:
        return mean
    var_sq = (1.0 - r) * sigma_s**2
    var_tq = (1.0 - r) * sigma_t**2
    std = math.sqrt(var_sq ** (1.0 - gamma) * var_tq**gamma)
    return mean + std * noise


# -- channel stacks ------------------------------------------------------------


def channels_from_pair(image: np.ndarray, mask: LabeledMask, n_classes: int) -> np.ndarray:
    """(H, W, 3 + C) stack: RGB plus per-class one-hot of the semantic mask."""
    h, w = mask.shape
    onehot = np.zeros((h, w, n_classes))
    for inst, cls in mask.classes.items():
        onehot[mask.grid == inst, cls - 1] = 1.0
    return np.concatenate([image, onehot], axis=2)


def mask_from_channels(
    channels: np.ndarray, n_classes: int, min_component_area: int = 4
) -> LabeledMask:
    """Semantic argmax (background where every class channel < 0.5), then
    4-connected components per class become instances; specks below
    min_component_area are dropped."""
    mask_ch = channels[..., 3 : 3 + n_classes]
    best = np.argmax(mask_ch, axis=2)
    conf = np.take_along_axis(mask_ch, best[..., None], axis=2)[..., 0]
    semantic = np.where(conf >= 0.5, best + 1, 0)
    grid = np.zeros(semantic.shape, dtype=np.int32)
    classes: dict[int, int] = {}
    next_id = 1
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    for cls in range(1, n_classes + 1):
        labeled, n_found = ndimage.label(semantic == cls, structure=structure)
        for comp in range(1, n_found + 1):
            sel = labeled == comp
            if int(sel.sum()) < min_component_area:
                continue
            grid[sel] = next_id
            classes[next_id] = cls
            next_id += 1
    return LabeledMask(grid=grid, classes=classes)


def image_from_channels(channels: np.ndarray) -> np.ndarray:
    return np.clip(channels[..., :3], 0.0, 1.0)


def downsample_mean(x: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(x, factor, axis=0), factor, axis=1)


# -- denoiser -------------------------------------------------------------------


@dataclass
class StageConfig:
    resolution: int
    channels: int  # 3 + n_classes
    hidden: int
    blocks: int
    has_lowres: bool
    n_query: int = 4
    d_model: int = 32
    d_k: int = 32

    @property
    def data_dim(self) -> int:
        return self.resolution * self.resolution * self.channels

    @property
    def in_dim(self) -> int:
        return self.data_dim * (2 if self.has_lowres else 1)


# data-scale constant in the skip/output preconditioning
_SIGMA_DATA = 0.5


def preconditioning(alpha, sigma):
    """Per-noise-level scales (c_skip, c_out, c_mean).

    x_hat = c_skip x_t + c_out f(...) + c_mean m keeps the learned part
    O(1) across noise levels and makes x_hat -> x_t exact as sigma -> 0,
    which a narrow perceptron cannot represent on its own; c_skip is the
    optimal linear coefficient for data of scale _SIGMA_DATA and c_mean
    its exact companion for a learned per-dimension data mean m.
    """
    s2 = _SIGMA_DATA**2
    denom = sigma**2 + alpha**2 * s2
    c_skip = alpha * s2 / denom
    c_out = sigma * _SIGMA_DATA / np.sqrt(denom)
    c_mean = 1.0 - alpha * c_skip
    return c_skip, c_out, c_mean


def init_stage(config: StageConfig, seed: int, index: int) -> dict[str, np.ndarray]:
    rng = rngmod.stream(seed, "stage-init", index)
    pre = f"stage{index}"
    p: dict[str, np.ndarray] = {}
    p[f"{pre}.in.w"] = init_matrix(rng, config.in_dim, config.hidden)
    p[f"{pre}.in.b"] = np.zeros(config.hidden)
    p[f"{pre}.lam.w"] = init_matrix(rng, N_LAMBDA_FEATURES, config.hidden)
    p[f"{pre}.pool.w"] = init_matrix(rng, config.d_model, config.hidden)
    for b in range(config.blocks):
        bp = f"{pre}.block{b}"
        p[f"{bp}.ln1.g"] = np.ones(config.hidden)
        p[f"{bp}.ln1.b"] = np.zeros(config.hidden)
        p[f"{bp}.ff.w1"] = init_matrix(rng, config.hidden, config.hidden)
        p[f"{bp}.ff.b1"] = np.zeros(config.hidden)
        p[f"{bp}.ff.w2"] = init_matrix(rng, config.hidden, config.hidden)
        p[f"{bp}.ff.b2"] = np.zeros(config.hidden)
        p[f"{bp}.ln2.g"] = np.ones(config.hidden)
        p[f"{bp}.ln2.b"] = np.zeros(config.hidden)
        p[f"{bp}.attn.wq"] = init_matrix(rng, config.hidden, config.n_query * config.d_k)
        p[f"{bp}.attn.wk"] = init_matrix(rng, config.d_model, config.d_k)
        p[f"{bp}.attn.wv"] = init_matrix(rng, config.d_model, config.d_model)
        p[f"{bp}.attn.wo"] = init_matrix(rng, config.n_query * config.d_model, config.hidden)
    p[f"{pre}.out.ln.g"] = np.ones(config.hidden)
    p[f"{pre}.out.ln.b"] = np.zeros(config.hidden)
    # zero-initialized head: the untrained denoiser is exactly the
    # preconditioning skip, and training only has to learn the correction
    p[f"{pre}.out.w"] = np.zeros((config.hidden, config.data_dim))
    p[f"{pre}.out.b"] = np.zeros(config.data_dim)
    p[f"{pre}.mean.d"] = np.zeros(config.data_dim)
    # noise-level gate on the skip; bias +2 opens it (~0.98) at init
    p[f"{pre}.gate.w"] = np.zeros((N_LAMBDA_FEATURES, 1))
    p[f"{pre}.gate.b"] = np.full(1, 2.0)
    if config.has_lowres:
        p[f"{pre}.lowskip.d"] = np.ones(config.data_dim)
    return p


def _ln_affine(tape, values, params, x, prefix, as_param):
    g = declare(tape, f"{prefix}.g", params[f"{prefix}.g"].shape, as_param, values, params)
    b = declare(tape, f"{prefix}.b", params[f"{prefix}.b"].shape, as_param, values, params)
    return tape.add(tape.mul(tape.layer_norm(x), g), b)


def build_denoiser(
    tape: Tape,
    x_noisy: int,
    lowres: int | None,
    lam_feats: int,
    cond_scales: int,
    tokens: int,
    token_mask: int,
    batch: int,
    config: StageConfig,
    params: dict[str, np.ndarray],
    values: dict[str, np.ndarray],
    as_param: bool,
    index: int,
) -> int:
    """Tape subgraph from a (B, data_dim) noisy state to the x0 prediction.

    `tokens` is (B, n_max, d_model) with padded rows exactly zero;
    `token_mask` is a (B, 1, n_max) additive logit mask (all zeros when a
    sample has no valid tokens, which is harmless because its token values
    are zero too). `cond_scales` is a (B, 4) node of per-sample
    (c_skip, c_out, c_mean, 1 - c_skip) preconditioning factors.
    """
    pre = f"stage{index}"
    x_in = x_noisy if lowres is None else tape.concat([x_noisy, lowres], axis=1)
    w_in = declare(tape, f"{pre}.in.w", (config.in_dim, config.hidden), as_param, values, params)
    b_in = declare(tape, f"{pre}.in.b", (config.hidden,), as_param, values, params)
    w_lam = declare(tape, f"{pre}.lam.w", (N_LAMBDA_FEATURES, config.hidden), as_param, values, params)
    w_pool = declare(tape, f"{pre}.pool.w", (config.d_model, config.hidden), as_param, values, params)
    pooled = tape.reduce_sum(tokens, axis=1)
    h = tape.add(
        tape.add(tape.matmul(x_in, w_in), b_in),
        tape.add(tape.matmul(lam_feats, w_lam), tape.matmul(pooled, w_pool)),
    )
    scale = 1.0 / math.sqrt(config.d_k)
    for b in range(config.blocks):
        bp = f"{pre}.block{b}"
        u = _ln_affine(tape, values, params, h, f"{bp}.ln1", as_param)
        w1 = declare(tape, f"{bp}.ff.w1", (config.hidden, config.hidden), as_param, values, params)
        b1 = declare(tape, f"{bp}.ff.b1", (config.hidden,), as_param, values, params)
        w2 = declare(tape, f"{bp}.ff.w2", (config.hidden, config.hidden), as_param, values, params)
        b2 = declare(tape, f"{bp}.ff.b2", (config.hidden,), as_param, values, params)
        ff = tape.add(tape.matmul(tape.tanh(tape.add(tape.matmul(u, w1), b1)), w2), b2)
        h = tape.add(h, ff)
        u = _ln_affine(tape, values, params, h, f"{bp}.ln2", as_param)
        wq = declare(tape, f"{bp}.attn.wq", (config.hidden, config.n_query * config.d_k), as_param, values, params)
        wk = declare(tape, f"{bp}.attn.wk", (config.d_model, config.d_k), as_param, values, params)
        wv = declare(tape, f"{bp}.attn.wv", (config.d_model, config.d_model), as_param, values, params)
        wo = declare(tape, f"{bp}.attn.wo", (config.n_query * config.d_model, config.hidden), as_param, values, params)
        q = tape.reshape(tape.matmul(u, wq), (batch, config.n_query, config.d_k))
        k = tape.matmul(tokens, wk)
        v = tape.matmul(tokens, wv)
        logits = tape.add(tape.scale(tape.matmul(q, tape.transpose(k)), scale), token_mask)
        att = tape.matmul(tape.softmax(logits), v)
        att = tape.reshape(att, (batch, config.n_query * config.d_model))
        h = tape.add(h, tape.matmul(att, wo))
    u = _ln_affine(tape, values, params, h, f"{pre}.out.ln", as_param)
    w_out = declare(tape, f"{pre}.out.w", (config.hidden, config.data_dim), as_param, values, params)
    b_out = declare(tape, f"{pre}.out.b", (config.data_dim,), as_param, values, params)
    raw = tape.add(tape.matmul(u, w_out), b_out)
    c_skip = tape.slice(cond_scales, 1, 0, 1)
    c_out = tape.slice(cond_scales, 1, 1, 2)
    c_mean = tape.slice(cond_scales, 1, 2, 3)
    m = declare(tape, f"{pre}.mean.d", (config.data_dim,), as_param, values, params)
    # the skip passes state noise through to the prediction; a learned
    # per-noise-level gate lets the model discard it where the prior or the
    # conditioning reconstructs better than the noisy state
    gw = declare(tape, f"{pre}.gate.w", (N_LAMBDA_FEATURES, 1), as_param, values, params)
    gb = declare(tape, f"{pre}.gate.b", (1,), as_param, values, params)
    gate = tape.scale(tape.offset(tape.tanh(tape.add(tape.matmul(lam_feats, gw), gb)), 1.0), 0.5)
    out = tape.add(tape.mul(x_noisy, tape.mul(c_skip, gate)), tape.mul(raw, c_out))
    out = tape.add(out, tape.mul(m, c_mean))
    if lowres is not None:
        # coarse-structure prior fades in as the skip from x_t fades out
        d = declare(tape, f"{pre}.lowskip.d", (config.data_dim,), as_param, values, params)
        c_low = tape.slice(cond_scales, 1, 3, 4)
        out = tape.add(out, tape.mul(tape.mul(lowres, d), c_low))
    return out


# -- cascade --------------------------------------------------------------------


@dataclass
class CascadeConfig:
    n_classes: int = 3
    image_size: int = 32
    resolutions: tuple[int, ...] = (8, 16, 32)
    hidden: tuple[int, ...] = (256, 256, 320)
    blocks: tuple[int, ...] = (3, 2, 2)
    n_query: int = 4
    t_eps: float = T_EPS_DEFAULT
    gamma: float = 0.3
    sample_steps: int = 36
    cond_dropout: float = 0.1
    unconditional: bool = False
    lr: float = 3e-4
    train_steps: tuple[int, ...] = (4000, 3000, 2200)
    batch: tuple[int, ...] = (64, 48, 24)
    min_component_area: int = 4

    @property
    def channels(self) -> int:
        return 3 + self.n_classes

    def stage_config(self, i: int, encoder: EncoderConfig) -> StageConfig:
        return StageConfig(
            resolution=self.resolutions[i],
            channels=self.channels,
            hidden=self.hidden[i],
            blocks=self.blocks[i],
            has_lowres=i > 0,
            n_query=self.n_query,
            d_model=encoder.d_model,
            d_k=encoder.d_k,
        )


@dataclass
class DiffusionCascade:
    config: CascadeConfig
    encoder_config: EncoderConfig
    feature_config: FeatureConfig
    encoder: GraphEncoderParams
    stage_params: list[dict[str, np.ndarray]]
    trained: list[bool] = field(default_factory=lambda: [False, False, False])

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(t_eps=self.config.t_eps)


def init_cascade(
    config: CascadeConfig,
    encoder_config: EncoderConfig,
    feature_config: FeatureConfig,
    seed: int,
) -> DiffusionCascade:
    stages = [
        init_stage(config.stage_config(i, encoder_config), seed, i)
        for i in range(len(config.resolutions))
    ]
    return DiffusionCascade(
        config=config,
        encoder_config=encoder_config,
        feature_config=feature_config,
        encoder=init_graph_encoder(encoder_config, seed),
        stage_params=stages,
        trained=[False] * len(config.resolutions),
    )


@dataclass
class ConditioningBatch:
    """Stacked per-graph arrays feeding the encoder and the denoiser reads."""

    feats: np.ndarray  # (B, n_max, f_dim)
    enc_mask: np.ndarray  # (B, n_max, n_max)
    valid_col: np.ndarray  # (B, n_max, 1)
    token_mask: np.ndarray  # (B, 1, n_max)

    @property
    def size(self) -> int:
        return self.feats.shape[0]

    def take(self, idx: np.ndarray) -> "ConditioningBatch":
        return ConditioningBatch(
            feats=self.feats[idx],
            enc_mask=self.enc_mask[idx],
            valid_col=self.valid_col[idx],
            token_mask=self.token_mask[idx],
        )


def conditioning_batch(
    graphs: list[TissueGraph],
    features: list[NodeFeatures],
    enc_cfg: EncoderConfig,
) -> ConditioningBatch:
    feats, enc_masks, valid_cols, token_masks = [], [], [], []
    for g, f in zip(graphs, features):
        m, vc = conditioning_inputs(f, g.adj, enc_cfg)
        feats.append(f.rows)
        enc_masks.append(m)
        valid_cols.append(vc)
        if f.valid.any():
            token_masks.append(np.where(f.valid, 0.0, -1e30)[None, :])
        else:
            # empty graph: uniform attention over all-zero tokens reads zero
            token_masks.append(np.zeros((1, enc_cfg.n_max)))
    return ConditioningBatch(
        feats=np.stack(feats),
        enc_mask=np.stack(enc_masks),
        valid_col=np.stack(valid_cols),
        token_mask=np.stack(token_masks),
    )


def sample_t_grid(t_eps: float, steps: int) -> np.ndarray:
    return np.linspace(1.0 - t_eps, t_eps, steps + 1)


def stage_targets(
    stacks: np.ndarray, config: CascadeConfig, stage_idx: int
) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-stage training targets from full-resolution channel stacks.

    Returns (x0_flat, lowres_flat) where lowres_flat is the ground-truth
    lower-resolution stack, nearest-upsampled to the stage resolution, for
    super-resolution stages (None for the base stage).
    """
    full = config.image_size
    res = config.resolutions[stage_idx]
    b = stacks.shape[0]
    x0 = np.stack([downsample_mean(s, full // res) for s in stacks])
    x0_flat = x0.reshape(b, -1)
    if stage_idx == 0:
        return x0_flat, None
    prev = config.resolutions[stage_idx - 1]
    low = np.stack(
        [upsample_nearest(downsample_mean(s, full // prev), res // prev) for s in stacks]
    )
    return x0_flat, low.reshape(b, -1)


def _build_loss_tape(
    cascade: DiffusionCascade,
    stage_idx: int,
    batch: int,
    train_encoder: bool,
):
    """Training tape: encoder -> dropout -> denoiser -> per-sample MSE."""
    cfg = cascade.config
    enc_cfg = cascade.encoder_config
    sc = cfg.stage_config(stage_idx, enc_cfg)
    tape = Tape()
    values: dict[str, np.ndarray] = {}
    feats = tape.input("cond.feats", (batch, enc_cfg.n_max, enc_cfg.f_dim))
    enc_mask = tape.input("cond.enc_mask", (batch, enc_cfg.n_max, enc_cfg.n_max))
    valid_col = tape.input("cond.valid_col", (batch, enc_cfg.n_max, 1))
    token_mask = tape.input("cond.token_mask", (batch, 1, enc_cfg.n_max))
    drop = tape.input("cond.drop", (batch, 1, 1))
    tokens = build_graph_encoder(
        tape, feats, enc_mask, valid_col, enc_cfg, cascade.encoder.params, values,
        as_param=train_encoder,
    )
    tokens = tape.mul(tokens, drop)
    x_noisy = tape.input("x_noisy", (batch, sc.data_dim))
    lowres = tape.input("lowres", (batch, sc.data_dim)) if sc.has_lowres else None
    lam = tape.input("lam_feats", (batch, N_LAMBDA_FEATURES))
    scales = tape.input("cond_scales", (batch, 4))
    x_hat = build_denoiser(
        tape, x_noisy, lowres, lam, scales, tokens, token_mask, batch, sc,
        cascade.stage_params[stage_idx], values, as_param=True, index=stage_idx,
    )
    target = tape.input("x0", (batch, sc.data_dim))
    diff = tape.sub(x_hat, target)
    per_sample = tape.reduce_sum(tape.mul(diff, diff), axis=1)
    loss = tape.reduce_mean(per_sample)
    return tape, values, loss, x_hat


def _loss_inputs(
    cascade: DiffusionCascade,
    stage_idx: int,
    x0_flat: np.ndarray,
    lowres_flat: np.ndarray | None,
    cond: ConditioningBatch,
    seed: int,
    step: int,
) -> dict[str, np.ndarray]:
    cfg = cascade.config
    b = x0_flat.shape[0]
    gen = rngmod.stream(seed, "loss", stage_idx, step)
    t = gen.uniform(cfg.t_eps, 1.0 - cfg.t_eps, size=b)
    eps = gen.standard_normal(x0_flat.shape)
    x_t = q_sample(x0_flat, t, eps, cascade.schedule)
    alpha, sigma, lam = cascade.schedule.at(t)
    if cfg.unconditional:
        keep = np.zeros((b, 1, 1))
    elif cfg.cond_dropout > 0.0:
        keep = (gen.uniform(size=(b, 1, 1)) >= cfg.cond_dropout).astype(np.float64)
    else:
        keep = np.ones((b, 1, 1))
    c_skip, c_out, c_mean = preconditioning(alpha, sigma)
    values = {
        "cond.feats": cond.feats,
        "cond.enc_mask": cond.enc_mask,
        "cond.valid_col": cond.valid_col,
        "cond.token_mask": cond.token_mask,
        "cond.drop": keep,
        "x_noisy": x_t,
        "lam_feats": lambda_features(lam),
        "cond_scales": np.stack([c_skip, c_out, c_mean, 1.0 - c_skip], axis=1),
        "x0": x0_flat,
    }
    if lowres_flat is not None:
        values["lowres"] = lowres_flat
    return values


def training_loss(
    cascade: DiffusionCascade,
    stage_idx: int,
    stacks: np.ndarray,
    cond: ConditioningBatch,
    seed: int,
    denoiser_override=None,
) -> float:
    """Monte-Carlo estimate of the denoising objective on one batch.

    `denoiser_override(stage_idx, x_t, lam, cond) -> x_hat` replaces the
    model prediction while keeping the identical (t, noise) draws; used to
    check the objective against closed forms.
    """
    x0_flat, lowres_flat = stage_targets(stacks, cascade.config, stage_idx)
    inputs = _loss_inputs(cascade, stage_idx, x0_flat, lowres_flat, cond, seed, step=0)
    if denoiser_override is not None:
        x_hat = denoiser_override(stage_idx, inputs["x_noisy"], inputs["lam_feats"], cond)
        out = float(np.mean(np.sum((x_hat - x0_flat) ** 2, axis=1)))
    else:
        tape, values, loss, _ = _build_loss_tape(
            cascade, stage_idx, x0_flat.shape[0], train_encoder=False
        )
        values.update(inputs)
        out = float(tape.forward(values)[loss])
    if not math.isfinite(out):
        raise NumericError("non-finite training loss")
    return out


def train_stage(
    cascade: DiffusionCascade,
    stage_idx: int,
    stacks: np.ndarray,
    cond: ConditioningBatch,
    seed: int,
    steps: int | None = None,
    batch_size: int | None = None,
    lr: float | None = None,
    log_every: int = 0,
) -> list[float]:
    """Adam on the denoising objective; the graph encoder trains jointly with
    the base stage and stays frozen for the super-resolution stages."""
    cfg = cascade.config
    steps = cfg.train_steps[stage_idx] if steps is None else steps
    batch_size = cfg.batch[stage_idx] if batch_size is None else batch_size
    batch_size = min(batch_size, stacks.shape[0])
    x0_all, low_all = stage_targets(stacks, cfg, stage_idx)

    train_encoder = stage_idx == 0 and not cfg.unconditional
    params: dict[str, np.ndarray] = dict(cascade.stage_params[stage_idx])
    if train_encoder:
        params.update(cascade.encoder.params)
    state = AdamState(lr=cfg.lr if lr is None else lr)
    tape, base_values, loss_node, _ = _build_loss_tape(
        cascade, stage_idx, batch_size, train_encoder
    )

    history: list[float] = []
    for step in range(steps):
        gen = rngmod.stream(seed, "pick", stage_idx, step)
        idx = gen.integers(0, stacks.shape[0], size=batch_size)
        values = dict(base_values)
        values.update(
            _loss_inputs(
                cascade, stage_idx, x0_all[idx],
                None if low_all is None else low_all[idx],
                cond.take(idx), seed, step,
            )
        )
        # parameter leaves read the live arrays, which adam mutates in place
        for name in params:
            values[name] = params[name]
        loss_val, grads = eval_and_backprop(tape, values, loss_node)
        adam_step(params, grads, state)
        history.append(loss_val)
        if history[0] > 0 and loss_val > 1e3 * history[0]:
            raise NumericError(
                f"stage {stage_idx} diverged at step {step}: loss {loss_val:.3e} "
                f"vs initial {history[0]:.3e}"
            )
        if log_every and step % log_every == 0:
            print(f"stage {stage_idx} step {step}: loss {loss_val:.4f}", flush=True)
    for name in cascade.stage_params[stage_idx]:
        cascade.stage_params[stage_idx][name] = params[name]
    if train_encoder:
        for name in cascade.encoder.params:
            cascade.encoder.params[name] = params[name]
    cascade.trained[stage_idx] = True
    return history


# -- sampling ---------------------------------------------------------------------


def _denoise_forward(
    cascade: DiffusionCascade,
    stage_idx: int,
    x_t: np.ndarray,
    lowres_flat: np.ndarray | None,
    lam: np.ndarray,
    cond: ConditioningBatch,
    conditioned: bool,
):
    b = x_t.shape[0]
    tape, values, _, x_hat = _build_loss_tape(cascade, stage_idx, b, train_encoder=False)
    sc = cascade.config.stage_config(stage_idx, cascade.encoder_config)
    # recover (alpha, sigma) from the log-SNR: alpha^2 = sigmoid(lam)
    alpha = np.sqrt(1.0 / (1.0 + np.exp(-lam)))
    sigma = np.sqrt(1.0 - alpha**2)
    c_skip, c_out, c_mean = preconditioning(alpha, sigma)
    values.update(
        {
            "cond.feats": cond.feats,
            "cond.enc_mask": cond.enc_mask,
            "cond.valid_col": cond.valid_col,
            "cond.token_mask": cond.token_mask,
            "cond.drop": (np.ones if conditioned else np.zeros)((b, 1, 1)),
            "x_noisy": x_t,
            "lam_feats": lambda_features(lam),
            "cond_scales": np.stack([c_skip, c_out, c_mean, 1.0 - c_skip], axis=1),
            "x0": np.zeros((b, sc.data_dim)),
        }
    )
    if lowres_flat is not None:
        values["lowres"] = lowres_flat
    return tape.forward(values)[x_hat]


def sample_stage(
    cascade: DiffusionCascade,
    stage_idx: int,
    cond: ConditioningBatch,
    lowres_flat: np.ndarray | None,
    gamma: float,
    steps: int,
    seed: int,
    conditioned: bool = True,
    denoiser_override=None,
) -> np.ndarray:
    """Ancestral sampling at one stage; returns (B, data_dim) in [0, 1].

    The final state is read out through the denoiser at t_eps, so a perfect
    predictor reproduces its target exactly.
    """
    cfg = cascade.config
    sc = cfg.stage_config(stage_idx, cascade.encoder_config)
    b = cond.size
    if (lowres_flat is None) != (stage_idx == 0):
        raise ConfigError("super-resolution stages need a low-res input")

    def predict(x, lam_value):
        lam = np.full(b, lam_value)
        if denoiser_override is not None:
            raw = denoiser_override(stage_idx, x, lam, cond)
        else:
            raw = _denoise_forward(cascade, stage_idx, x, lowres_flat, lam, cond,
                                   conditioned)
        return np.clip(raw, 0.0, 1.0)

    grid = sample_t_grid(cfg.t_eps, steps)
    x = rngmod.stream(seed, "sample-init", stage_idx).standard_normal((b, sc.data_dim))
    schedule = cascade.schedule
    for i in range(steps):
        t, s = float(grid[i]), float(grid[i + 1])
        _, _, lam_t = schedule.at(t)
        x_hat = predict(x, float(lam_t))
        if i == steps - 1:
            noise = None
        else:
            noise = rngmod.stream(seed, "sample-noise", stage_idx, i).standard_normal(
                (b, sc.data_dim)
            )
        x = ancestral_step(x, t, s, x_hat, gamma, noise, schedule)
    _, _, lam_end = schedule.at(float(grid[-1]))
    return predict(x, float(lam_end))


def sample_cascade(
    graphs: list[TissueGraph],
    cascade: DiffusionCascade,
    gamma: float | None = None,
    steps: int | None = None,
    seed: int = 0,
    conditioned: bool = True,
    denoiser_override=None,
) -> list[tuple[np.ndarray, LabeledMask]]:
    """Sample one (image, instance mask) pair per conditioning graph."""
    cfg = cascade.config
    if denoiser_override is None and not all(cascade.trained):
        missing = [i for i, t in enumerate(cascade.trained) if not t]
        raise ConfigError(f"stages {missing} are untrained; run train-diffusion first")
    gamma = cfg.gamma if gamma is None else gamma
    steps = cfg.sample_steps if steps is None else steps
    features = [
        node_features(g, cascade.feature_config, cfg.image_size) for g in graphs
    ]
    cond = conditioning_batch(graphs, features, cascade.encoder_config)

    x = sample_stage(
        cascade, 0, cond, None, gamma, steps, rngmod.derive_key(seed, "stage", 0),
        conditioned, denoiser_override,
    )
    for i in range(1, len(cfg.resolutions)):
        res_prev, res = cfg.resolutions[i - 1], cfg.resolutions[i]
        low = np.stack(
            [
                upsample_nearest(
                    xi.reshape(res_prev, res_prev, cfg.channels), res // res_prev
                ).reshape(-1)
                for xi in x
            ]
        )
        x = sample_stage(
            cascade, i, cond, low, gamma, steps, rngmod.derive_key(seed, "stage", i),
            conditioned, denoiser_override,
        )

    out = []
    final_res = cfg.resolutions[-1]
    for xi in x:
        stack = xi.reshape(final_res, final_res, cfg.channels)
        out.append(
            (
                image_from_channels(stack),
                mask_from_channels(stack, cfg.n_classes, cfg.min_component_area),
            )
        )
    return out
