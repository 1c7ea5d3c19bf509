"""Transformer-style graph encoder with adjacency-restricted attention.

Attention logits are computed as scaled dot products and then restricted
by the effective adjacency (graph edges plus self-loops). Two masking
modes exist: "additive" (default) replaces disallowed logits with a large
negative value so their softmax weight is exactly zero, and "literal"
multiplies the logits elementwise by the adjacency before the softmax,
kept for ablation. Rows with no admissible key produce zero output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .autodiff import Tape, init_matrix
from .embed import NodeFeatures, declare
from .errors import ConfigError, ShapeError

MASK_MODES = ("additive", "literal")
_NEG_BIG = -1e30


@dataclass
class EncoderConfig:
    f_dim: int = 35
    d_model: int = 32
    d_k: int = 32
    d_ff: int = 64
    layers: int = 2
    n_max: int = 16
    mode: str = "additive"

    def __post_init__(self):
        if self.mode not in MASK_MODES:
            raise ConfigError(f"attention mode must be one of {MASK_MODES}")


@dataclass
class ConditioningTokens:
    tokens: np.ndarray  # (n_max, d_model)
    valid: np.ndarray  # (n_max,) bool


def masked_attention(
    Q: np.ndarray,
    K: np.ndarray,
    V: np.ndarray,
    A_effective: np.ndarray,
    mode: str = "additive",
) -> tuple[np.ndarray, np.ndarray]:
    """Single-head attention restricted by a 0/1 admissibility matrix.

    Returns (attended values, weights). Rows of A_effective that are all
    zero yield zero output rows (and uniform weights are suppressed).
    """
    if mode not in MASK_MODES:
        raise ConfigError(f"attention mode must be one of {MASK_MODES}")
    A = np.asarray(A_effective, dtype=np.float64)
    if A.shape != (Q.shape[0], K.shape[0]):
        raise ShapeError("A_effective shape does not match Q/K")
    d_k = Q.shape[-1]
    logits = (Q @ K.T) / np.sqrt(d_k)
    if mode == "additive":
        logits = np.where(A > 0, logits, _NEG_BIG)
    else:
        logits = logits * A
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    weights = e / e.sum(axis=-1, keepdims=True)
    dead = A.sum(axis=-1) == 0
    weights[dead] = 0.0
    out = weights @ V
    return out, weights


@dataclass
class GraphEncoderParams:
    params: dict[str, np.ndarray]
    config: EncoderConfig


def init_graph_encoder(config: EncoderConfig, seed: int) -> GraphEncoderParams:
    rng = rngmod.stream(seed, "graph-encoder-init")
    p: dict[str, np.ndarray] = {}
    p["genc.in.w"] = init_matrix(rng, config.f_dim, config.d_model)
    p["genc.in.b"] = np.zeros(config.d_model)
    for l in range(config.layers):
        p[f"genc.{l}.wq"] = init_matrix(rng, config.d_model, config.d_k)
        p[f"genc.{l}.wk"] = init_matrix(rng, config.d_model, config.d_k)
        p[f"genc.{l}.wv"] = init_matrix(rng, config.d_model, config.d_model)
        p[f"genc.{l}.wo"] = init_matrix(rng, config.d_model, config.d_model)
        p[f"genc.{l}.ln1.g"] = np.ones(config.d_model)
        p[f"genc.{l}.ln1.b"] = np.zeros(config.d_model)
        p[f"genc.{l}.ff.w1"] = init_matrix(rng, config.d_model, config.d_ff)
        p[f"genc.{l}.ff.b1"] = np.zeros(config.d_ff)
        p[f"genc.{l}.ff.w2"] = init_matrix(rng, config.d_ff, config.d_model)
        p[f"genc.{l}.ff.b2"] = np.zeros(config.d_model)
        p[f"genc.{l}.ln2.g"] = np.ones(config.d_model)
        p[f"genc.{l}.ln2.b"] = np.zeros(config.d_model)
    return GraphEncoderParams(params=p, config=config)


def effective_adjacency(adj: np.ndarray, valid: np.ndarray, n_max: int) -> np.ndarray:
    """Pad adjacency to n_max, add self-loops, restrict to valid rows/cols."""
    n = adj.shape[0]
    out = np.zeros((n_max, n_max))
    out[:n, :n] = adj
    idx = np.flatnonzero(valid)
    out[idx, idx] = 1.0
    vf = valid.astype(np.float64)
    return out * vf[:, None] * vf[None, :]


def attention_mask_additive(a_eff: np.ndarray) -> np.ndarray:
    """Additive logit mask: 0 where admissible, a large negative elsewhere."""
    return np.where(a_eff > 0, 0.0, _NEG_BIG)


def _ln_affine(tape, values, params, x, prefix, as_param):
    g = declare(tape, f"{prefix}.g", params[f"{prefix}.g"].shape, as_param, values, params)
    b = declare(tape, f"{prefix}.b", params[f"{prefix}.b"].shape, as_param, values, params)
    return tape.add(tape.mul(tape.layer_norm(x), g), b)


def build_graph_encoder(
    tape: Tape,
    feats: int,
    attn_mask: int,
    valid_col: int,
    config: EncoderConfig,
    params: dict[str, np.ndarray],
    values: dict[str, np.ndarray],
    as_param: bool,
) -> int:
    """Tape subgraph mapping (B, n_max, f_dim) features to conditioning tokens.

    `attn_mask` is a (B, n_max, n_max) node: additive logit mask in additive
    mode, the raw effective adjacency in literal mode. `valid_col` is a
    (B, n_max, 1) 0/1 node zeroing padded and dead rows.
    """
    w_in = declare(tape, "genc.in.w", (config.f_dim, config.d_model), as_param, values, params)
    b_in = declare(tape, "genc.in.b", (config.d_model,), as_param, values, params)
    h = tape.add(tape.matmul(feats, w_in), b_in)
    scale = 1.0 / np.sqrt(config.d_k)
    for l in range(config.layers):
        wq = declare(tape, f"genc.{l}.wq", (config.d_model, config.d_k), as_param, values, params)
        wk = declare(tape, f"genc.{l}.wk", (config.d_model, config.d_k), as_param, values, params)
        wv = declare(tape, f"genc.{l}.wv", (config.d_model, config.d_model), as_param, values, params)
        wo = declare(tape, f"genc.{l}.wo", (config.d_model, config.d_model), as_param, values, params)
        q = tape.matmul(h, wq)
        k = tape.matmul(h, wk)
        v = tape.matmul(h, wv)
        logits = tape.scale(tape.matmul(q, tape.transpose(k)), scale)
        if config.mode == "additive":
            logits = tape.add(logits, attn_mask)
        else:
            logits = tape.mul(logits, attn_mask)
        weights = tape.softmax(logits)
        attended = tape.matmul(tape.matmul(weights, v), wo)
        attended = tape.mul(attended, valid_col)
        h = _ln_affine(tape, values, params, tape.add(h, attended), f"genc.{l}.ln1", as_param)
        w1 = declare(tape, f"genc.{l}.ff.w1", (config.d_model, config.d_ff), as_param, values, params)
        b1 = declare(tape, f"genc.{l}.ff.b1", (config.d_ff,), as_param, values, params)
        w2 = declare(tape, f"genc.{l}.ff.w2", (config.d_ff, config.d_model), as_param, values, params)
        b2 = declare(tape, f"genc.{l}.ff.b2", (config.d_model,), as_param, values, params)
        ff = tape.matmul(tape.tanh(tape.add(tape.matmul(h, w1), b1)), w2)
        ff = tape.add(ff, b2)
        h = _ln_affine(tape, values, params, tape.add(h, ff), f"genc.{l}.ln2", as_param)
    return tape.mul(h, valid_col)


def conditioning_inputs(
    features: NodeFeatures, adj: np.ndarray, config: EncoderConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Per-graph (attn_mask, valid_col) arrays for build_graph_encoder."""
    n_max = config.n_max
    a_eff = effective_adjacency(adj, features.valid, n_max)
    if config.mode == "additive":
        mask = attention_mask_additive(a_eff)
    else:
        mask = a_eff
    valid_col = features.valid.astype(np.float64).reshape(n_max, 1)
    return mask, valid_col


def encode_graph(
    features: NodeFeatures, adj: np.ndarray, enc: GraphEncoderParams
) -> ConditioningTokens:
    """Single-graph convenience wrapper around the tape builder."""
    config = enc.config
    if not np.array_equal(adj, adj.T):
        raise ShapeError("adjacency must be symmetric")
    mask, valid_col = conditioning_inputs(features, adj, config)
    tape = Tape()
    values: dict[str, np.ndarray] = {}
    f = tape.input("feats", (1, config.n_max, config.f_dim))
    m = tape.input("mask", (1, config.n_max, config.n_max))
    vc = tape.input("valid", (1, config.n_max, 1))
    out = build_graph_encoder(tape, f, m, vc, config, enc.params, values, as_param=False)
    values["feats"] = features.rows[None]
    values["mask"] = mask[None]
    values["valid"] = valid_col[None]
    tokens = tape.forward(values)[out][0]
    return ConditioningTokens(tokens=tokens, valid=features.valid.copy())
