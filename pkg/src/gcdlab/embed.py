"""Per-node feature rows: class one-hot, object embedding, position code.

The object embedding comes from a small strided-convolution encoder trained
self-supervised (BYOL style: online/target networks, normalized-prediction
MSE, EMA target updates) on masked object crops. Two alternative object
encodings are available as feature-layout modes: raw downsampled masked
pixels ("image") and hand-crafted centroid/area/bbox statistics ("manual").
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import rng as rngmod
from .autodiff import AdamState, Tape, adam_step, eval_and_backprop, init_matrix
from .errors import ConfigError, ShapeError
from .maskgraph import TissueGraph
from .synthdata import LabeledMask

FEATURE_MODES = ("extracted", "image", "manual")


@dataclass
class FeatureConfig:
    n_classes: int = 3
    d_object: int = 16
    d_pos: int = 16
    n_max: int = 16
    mode: str = "extracted"

    @property
    def f_dim(self) -> int:
        return self.n_classes + self.d_object + self.d_pos

    def __post_init__(self):
        if self.mode not in FEATURE_MODES:
            raise ConfigError(f"feature mode must be one of {FEATURE_MODES}")
        if self.d_pos % 4 != 0:
            raise ConfigError("d_pos must be divisible by 4")


@dataclass
class NodeFeatures:
    rows: np.ndarray  # (n_max, f_dim)
    valid: np.ndarray  # (n_max,) bool


def mask_object(image: np.ndarray, mask: LabeledMask, instance_id: int) -> np.ndarray:
    """Keep only the pixels of one instance; everything else zeroed."""
    if instance_id not in mask.classes:
        raise ShapeError(f"instance {instance_id} not present in mask")
    keep = mask.grid == instance_id
    out = np.zeros_like(image)
    out[keep] = image[keep]
    return out


def pos_encoding(com: tuple[float, float], d_pos: int, image_size: int) -> np.ndarray:
    """Sinusoidal position code; each axis normalized to [0, 100).

    Per axis: interleaved sin/cos pairs at divisors 10000^(2k/(d_pos/2)),
    k = 0 .. d_pos/4 - 1.
    """
    if d_pos % 4 != 0:
        raise ConfigError("d_pos must be divisible by 4")
    half = d_pos // 2
    n_freq = d_pos // 4
    out = np.empty(d_pos)
    for axis, value in enumerate(com):
        p = 100.0 * float(value) / float(image_size)
        for k in range(n_freq):
            div = 10000.0 ** (2.0 * k / half)
            out[axis * half + 2 * k] = np.sin(p / div)
            out[axis * half + 2 * k + 1] = np.cos(p / div)
    return out


# -- strided-conv encoder over flattened pixels ------------------------------


def _conv_indices(h: int, w: int, batch: int) -> np.ndarray:
    """Gather indices realizing a 3x3 stride-2 pad-1 convolution.

    Rows index a (batch*h*w + 1) pixel matrix whose final row is a shared
    zero row standing in for padding.
    """
    oh, ow = h // 2, w // 2
    sentinel = batch * h * w
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    idx = np.empty((oh * ow, 9), dtype=np.int64)
    k = 0
    for dy in range(3):
        for dx in range(3):
            iy = 2 * oy + dy - 1
            ix = 2 * ox + dx - 1
            valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
            flat = np.where(valid, iy * w + ix, -1).reshape(-1)
            idx[:, k] = flat
            k += 1
    per_image = []
    for b in range(batch):
        off = idx + b * h * w
        off[idx < 0] = sentinel
        per_image.append(off)
    return np.concatenate(per_image, axis=0)


@dataclass
class EncoderSpec:
    image_size: int = 32
    channels: tuple[int, ...] = (3, 12, 24, 32)
    d_out: int = 16


def init_encoder(spec: EncoderSpec, rng: np.random.Generator, prefix: str) -> dict:
    params = {}
    for i in range(len(spec.channels) - 1):
        cin, cout = spec.channels[i], spec.channels[i + 1]
        params[f"{prefix}.conv{i}.w"] = init_matrix(rng, 9 * cin, cout)
        params[f"{prefix}.conv{i}.b"] = np.zeros(cout)
    params[f"{prefix}.head.w"] = init_matrix(rng, spec.channels[-1], spec.d_out)
    params[f"{prefix}.head.b"] = np.zeros(spec.d_out)
    return params


def declare(tape: Tape, name: str, shape, as_param: bool, values: dict, params: dict) -> int:
    """Get-or-create a named leaf so weights can be shared across subgraphs."""
    if name in tape.leaves:
        return tape.leaves[name]
    values[name] = params[name]
    return (tape.param if as_param else tape.input)(name, shape)


def build_encoder(
    tape: Tape,
    x: int,
    spec: EncoderSpec,
    batch: int,
    prefix: str,
    as_param: bool,
    values: dict,
    params: dict,
) -> int:
    """Encoder forward over a (batch*size*size, 3) pixel node; returns (batch, d_out)."""
    size = spec.image_size
    h = x
    hw = size
    for i in range(len(spec.channels) - 1):
        cin, cout = spec.channels[i], spec.channels[i + 1]
        zero = tape.constant(np.zeros((1, cin)))
        padded = tape.concat([h, zero], axis=0)
        idx = _conv_indices(hw, hw, batch)
        g = tape.gather(padded, idx)  # (batch*oh*ow, 9, cin)
        g = tape.reshape(g, (idx.shape[0], 9 * cin))
        w = declare(tape, f"{prefix}.conv{i}.w", (9 * cin, cout), as_param, values, params)
        b = declare(tape, f"{prefix}.conv{i}.b", (cout,), as_param, values, params)
        h = tape.tanh(tape.add(tape.matmul(g, w), b))
        hw //= 2
    # global average pool per image
    h = tape.reshape(h, (batch, hw * hw, spec.channels[-1]))
    pooled = tape.reduce_mean(h, axis=1)
    w = declare(tape, f"{prefix}.head.w", (spec.channels[-1], spec.d_out), as_param, values, params)
    b = declare(tape, f"{prefix}.head.b", (spec.d_out,), as_param, values, params)
    return tape.add(tape.matmul(pooled, w), b)


def _build_mlp(
    tape: Tape,
    x: int,
    dims: tuple[int, ...],
    prefix: str,
    as_param: bool,
    values: dict,
    params: dict,
) -> int:
    h = x
    for i in range(len(dims) - 1):
        w = declare(tape, f"{prefix}.l{i}.w", (dims[i], dims[i + 1]), as_param, values, params)
        b = declare(tape, f"{prefix}.l{i}.b", (dims[i + 1],), as_param, values, params)
        h = tape.add(tape.matmul(h, w), b)
        if i < len(dims) - 2:
            h = tape.tanh(h)
    return h


def _init_mlp(dims, rng, prefix):
    params = {}
    for i in range(len(dims) - 1):
        params[f"{prefix}.l{i}.w"] = init_matrix(rng, dims[i], dims[i + 1])
        params[f"{prefix}.l{i}.b"] = np.zeros(dims[i + 1])
    return params


def _l2_normalize(tape: Tape, x: int) -> int:
    sq = tape.reduce_sum(tape.mul(x, x), axis=1, keepdims=True)
    inv = tape.reciprocal(tape.sqrt(tape.offset(sq, 1e-12)))
    return tape.mul(x, inv)


# -- BYOL ---------------------------------------------------------------------


@dataclass
class ByolConfig:
    steps: int = 400
    batch: int = 32
    lr: float = 1e-3
    tau: float = 0.99
    d_embed: int = 16
    image_size: int = 32
    shift: int = 2
    brightness: float = 0.2


@dataclass
class ByolEncoderParams:
    online: dict[str, np.ndarray]
    target: dict[str, np.ndarray]
    tau: float
    spec: EncoderSpec
    proj_dims: tuple[int, ...] = (16, 32, 16)
    pred_dims: tuple[int, ...] = (16, 32, 16)


def init_byol(config: ByolConfig, seed: int) -> ByolEncoderParams:
    rng = rngmod.stream(seed, "byol-init")
    spec = EncoderSpec(image_size=config.image_size, d_out=config.d_embed)
    online = {}
    online.update(init_encoder(spec, rng, "enc"))
    online.update(_init_mlp((config.d_embed, 32, config.d_embed), rng, "proj"))
    online.update(_init_mlp((config.d_embed, 32, config.d_embed), rng, "pred"))
    target = {k: v.copy() for k, v in online.items() if not k.startswith("pred")}
    return ByolEncoderParams(
        online=online,
        target=target,
        tau=config.tau,
        spec=spec,
        proj_dims=(config.d_embed, 32, config.d_embed),
        pred_dims=(config.d_embed, 32, config.d_embed),
    )


def ema_update(target: dict, online: dict, tau: float) -> None:
    """target <- tau * target + (1 - tau) * online, per shared key."""
    for k in target:
        target[k] = tau * target[k] + (1.0 - tau) * online[k]


def augment(crops: np.ndarray, gen: np.random.Generator, config: ByolConfig) -> np.ndarray:
    """Flips, small zero-padded shifts and brightness jitter, per crop."""
    out = crops.copy()
    b = out.shape[0]
    for i in range(b):
        if gen.uniform() < 0.5:
            out[i] = out[i, ::-1]
        if gen.uniform() < 0.5:
            out[i] = out[i, :, ::-1]
        dy, dx = gen.integers(-config.shift, config.shift + 1, size=2)
        out[i] = _shift2d(out[i], int(dy), int(dx))
        out[i] = np.clip(out[i] + gen.uniform(-config.brightness, config.brightness), 0, 1)
    return out


def _shift2d(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    res = np.zeros_like(img)
    h, w = img.shape[:2]
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    res[ys, xs] = img[ys_src, xs_src]
    return res


def _byol_pair_loss(tape, values, params, v_on, batch, spec, proj_dims, pred_dims):
    """Loss of one direction: predict the target projection of the other view."""
    x_on = tape.input(f"view_on_{v_on}", (batch * spec.image_size**2, 3))
    z = build_encoder(tape, x_on, spec, batch, "enc", True, values, params)
    z = _build_mlp(tape, z, proj_dims, "proj", True, values, params)
    p = _build_mlp(tape, z, pred_dims, "pred", True, values, params)
    p = _l2_normalize(tape, p)
    # target side is a constant input (no gradient flows into it)
    tgt = tape.input(f"target_{v_on}", (batch, pred_dims[-1]))
    tgt_n = _l2_normalize(tape, tgt)
    diff = tape.sub(p, tgt_n)
    per = tape.reduce_sum(tape.mul(diff, diff), axis=1)
    return x_on, tgt, tape.reduce_mean(per)


def _forward_encoder_numpy(params: dict, spec: EncoderSpec, images: np.ndarray) -> np.ndarray:
    """Plain numpy forward of the conv encoder; images (B, S, S, 3)."""
    b = images.shape[0]
    tape = Tape()
    values: dict[str, np.ndarray] = {}
    x = tape.input("x", (b * spec.image_size**2, 3))
    out = build_encoder(tape, x, spec, b, "enc", False, values, params)
    values["x"] = images.reshape(-1, 3)
    return tape.forward(values)[out]


def _forward_mlp_numpy(params: dict, dims, prefix: str, x: np.ndarray) -> np.ndarray:
    tape = Tape()
    values: dict[str, np.ndarray] = {}
    node = tape.input("x", x.shape)
    out = _build_mlp(tape, node, dims, prefix, False, values, params)
    values["x"] = x
    return tape.forward(values)[out]


def byol_train(
    crops: np.ndarray,
    config: ByolConfig,
    seed: int,
) -> tuple[ByolEncoderParams, list[float]]:
    """Train online/target encoders on (N, S, S, 3) masked crops.

    Returns the trained parameters and the per-step loss history.
    """
    if crops.ndim != 4 or crops.shape[0] < 2:
        raise ConfigError("need at least 2 crops to train the embedder")
    params = init_byol(config, seed)
    state = AdamState(lr=config.lr)
    history: list[float] = []
    spec = params.spec
    for step in range(config.steps):
        gen = rngmod.stream(seed, "byol-step", step)
        pick = gen.integers(0, crops.shape[0], size=config.batch)
        batch = crops[pick]
        v1 = augment(batch, gen, config)
        v2 = augment(batch, gen, config)

        # target projections for both views, outside the tape
        t1 = _forward_mlp_numpy(
            params.target, params.proj_dims, "proj",
            _forward_encoder_numpy(params.target, spec, v1),
        )
        t2 = _forward_mlp_numpy(
            params.target, params.proj_dims, "proj",
            _forward_encoder_numpy(params.target, spec, v2),
        )

        tape = Tape()
        values: dict[str, np.ndarray] = {}
        xa, ta, loss_a = _byol_pair_loss(
            tape, values, params.online, "a", config.batch, spec,
            params.proj_dims, params.pred_dims,
        )
        xb, tb, loss_b = _byol_pair_loss(
            tape, values, params.online, "b", config.batch, spec,
            params.proj_dims, params.pred_dims,
        )
        loss = tape.scale(tape.add(loss_a, loss_b), 0.5)
        values["view_on_a"] = v1.reshape(-1, 3)
        values["target_a"] = t2
        values["view_on_b"] = v2.reshape(-1, 3)
        values["target_b"] = t1
        loss_val, grads = eval_and_backprop(tape, values, loss)
        adam_step(params.online, grads, state)
        ema_update(params.target, params.online, params.tau)
        history.append(loss_val)
    return params, history


def byol_embed(params: ByolEncoderParams, images: np.ndarray) -> np.ndarray:
    """Representation of each (S, S, 3) image: online encoder output."""
    return _forward_encoder_numpy(params.online, params.spec, images)


# -- object encodings + feature assembly --------------------------------------


def _downsample_gray(img: np.ndarray, out: int = 4) -> np.ndarray:
    h = img.shape[0]
    f = h // out
    gray = img.mean(axis=2)
    return gray[: out * f, : out * f].reshape(out, f, out, f).mean(axis=(1, 3)).reshape(-1)


def _manual_stats(mask: LabeledMask, instance_id: int, d: int) -> np.ndarray:
    rows, cols = np.nonzero(mask.grid == instance_id)
    h, w = mask.shape
    out = np.zeros(d)
    out[0] = rows.mean() / h
    out[1] = cols.mean() / w
    out[2] = rows.size / (h * w)
    out[3] = rows.min() / h
    out[4] = cols.min() / w
    out[5] = rows.max() / h
    out[6] = cols.max() / w
    return out


def make_embedder(
    mode: str,
    image: np.ndarray,
    mask: LabeledMask,
    byol_params: ByolEncoderParams | None = None,
    d_object: int = 16,
) -> Callable[[int], np.ndarray]:
    """Per-instance object-vector function for build_graph, by layout mode."""
    if mode == "extracted":
        if byol_params is None:
            raise ConfigError("extracted mode needs trained embedder params")

        def embed_one(instance_id: int) -> np.ndarray:
            crop = mask_object(image, mask, instance_id)
            return byol_embed(byol_params, crop[None])[0]

        return embed_one
    if mode == "image":
        return lambda i: _downsample_gray(mask_object(image, mask, i), 4)[:d_object]
    if mode == "manual":
        return lambda i: _manual_stats(mask, i, d_object)
    raise ConfigError(f"unknown feature mode {mode!r}")


def node_features(
    graph: TissueGraph, config: FeatureConfig, image_size: int
) -> NodeFeatures:
    """Assemble [one-hot class | object vector | position code] rows, padded."""
    n = graph.n_nodes
    if n > config.n_max:
        raise ConfigError(f"graph has {n} nodes, features allow {config.n_max}")
    if n and graph.embeddings.shape[1] != config.d_object:
        raise ConfigError(
            f"object vectors are {graph.embeddings.shape[1]}-d, config wants "
            f"{config.d_object}"
        )
    rows = np.zeros((config.n_max, config.f_dim))
    valid = np.zeros(config.n_max, dtype=bool)
    for k in range(n):
        cls = int(graph.classes[k])
        if not 1 <= cls <= config.n_classes:
            raise ConfigError(f"node class {cls} out of range")
        rows[k, cls - 1] = 1.0
        rows[k, config.n_classes : config.n_classes + config.d_object] = (
            graph.embeddings[k]
        )
        rows[k, config.n_classes + config.d_object :] = pos_encoding(
            (graph.coms[k, 0], graph.coms[k, 1]), config.d_pos, image_size
        )
        valid[k] = True
    return NodeFeatures(rows=rows, valid=valid)
