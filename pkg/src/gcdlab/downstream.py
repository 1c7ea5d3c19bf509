"""Patch-based pixel classifier for downstream segmentation.

A small MLP over a p x p RGB neighborhood predicts the semantic class of
the center pixel (background included). Instances come from per-class
connected components of the predicted semantic mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import rng as rngmod
from .autodiff import AdamState, Tape, adam_step, eval_and_backprop, init_matrix
from .errors import ConfigError, ShapeError
from .synthdata import LabeledMask


@dataclass
class SegmenterConfig:
    patch: int = 5
    hidden: int = 64
    n_classes: int = 3
    steps: int = 2500
    batch: int = 256
    lr: float = 1e-3

    def __post_init__(self):
        if self.patch % 2 != 1:
            raise ConfigError("receptive field must be odd")

    @property
    def in_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def out_dim(self) -> int:
        return self.n_classes + 1


@dataclass
class SegmenterParams:
    params: dict[str, np.ndarray]
    config: SegmenterConfig


def init_segmenter(config: SegmenterConfig, seed: int) -> SegmenterParams:
    rng = rngmod.stream(seed, "segmenter-init")
    p = {
        "seg.w1": init_matrix(rng, config.in_dim, config.hidden),
        "seg.b1": np.zeros(config.hidden),
        "seg.w2": init_matrix(rng, config.hidden, config.out_dim),
        "seg.b2": np.zeros(config.out_dim),
    }
    return SegmenterParams(params=p, config=config)


def _patches(image: np.ndarray, patch: int) -> np.ndarray:
    """(H*W, patch*patch*3) zero-padded neighborhoods around every pixel."""
    half = patch // 2
    padded = np.pad(image, ((half, half), (half, half), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (patch, patch), axis=(0, 1))
    h, w = image.shape[:2]
    # win: (H, W, 3, patch, patch) -> (H*W, patch*patch*3) matching row layout
    return win.transpose(0, 1, 3, 4, 2).reshape(h * w, patch * patch * 3)


def _semantic(mask: LabeledMask) -> np.ndarray:
    out = np.zeros(mask.shape, dtype=np.int64)
    for inst, cls in mask.classes.items():
        out[mask.grid == inst] = cls
    return out


def _build_tape(config: SegmenterConfig, batch: int, params, as_param: bool):
    tape = Tape()
    values: dict[str, np.ndarray] = {}
    x = tape.input("x", (batch, config.in_dim))
    from .embed import declare

    w1 = declare(tape, "seg.w1", (config.in_dim, config.hidden), as_param, values, params)
    b1 = declare(tape, "seg.b1", (config.hidden,), as_param, values, params)
    w2 = declare(tape, "seg.w2", (config.hidden, config.out_dim), as_param, values, params)
    b2 = declare(tape, "seg.b2", (config.out_dim,), as_param, values, params)
    h = tape.tanh(tape.add(tape.matmul(x, w1), b1))
    logits = tape.add(tape.matmul(h, w2), b2)
    return tape, values, x, logits


def train_segmenter(
    pairs: list[tuple[np.ndarray, LabeledMask]],
    config: SegmenterConfig,
    seed: int,
) -> tuple[SegmenterParams, list[float]]:
    """Cross-entropy over randomly sampled pixel neighborhoods."""
    if not pairs:
        raise ConfigError("need at least one (image, mask) pair")
    model = init_segmenter(config, seed)
    state = AdamState(lr=config.lr)
    patches = [_patches(img, config.patch) for img, _ in pairs]
    labels = [_semantic(mask).reshape(-1) for _, mask in pairs]
    n_pixels = labels[0].shape[0]

    tape, base_values, x_node, logits = _build_tape(config, config.batch, model.params, True)
    probs = tape.softmax(logits)
    onehot = tape.input("y", (config.batch, config.out_dim))
    picked = tape.reduce_sum(tape.mul(probs, onehot), axis=1)
    loss = tape.scale(tape.reduce_mean(tape.log(tape.offset(picked, 1e-12))), -1.0)

    history: list[float] = []
    for step in range(config.steps):
        gen = rngmod.stream(seed, "seg-step", step)
        img_idx = gen.integers(0, len(pairs), size=config.batch)
        pix_idx = gen.integers(0, n_pixels, size=config.batch)
        xb = np.stack([patches[i][p] for i, p in zip(img_idx, pix_idx)])
        yb = np.zeros((config.batch, config.out_dim))
        for row, (i, p) in enumerate(zip(img_idx, pix_idx)):
            yb[row, labels[i][p]] = 1.0
        values = dict(base_values)
        values["x"] = xb
        values["y"] = yb
        loss_val, grads = eval_and_backprop(tape, values, loss)
        adam_step(model.params, grads, state)
        history.append(loss_val)
    return model, history


def predict_logits(image: np.ndarray, model: SegmenterParams) -> np.ndarray:
    config = model.config
    feats = _patches(image, config.patch)
    tape, values, x_node, logits = _build_tape(config, feats.shape[0], model.params, False)
    values["x"] = feats
    return tape.forward(values)[logits]


def predict_mask(image: np.ndarray, model: SegmenterParams) -> LabeledMask:
    """Argmax semantic classes, then per-class 4-connected components."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    logits = predict_logits(image, model)
    semantic = logits.argmax(axis=1).reshape(h, w)
    grid = np.zeros((h, w), dtype=np.int32)
    classes: dict[int, int] = {}
    next_id = 1
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    for cls in range(1, model.config.n_classes + 1):
        labeled, n_found = ndimage.label(semantic == cls, structure=structure)
        for comp in range(1, n_found + 1):
            sel = labeled == comp
            grid[sel] = next_id
            classes[next_id] = cls
            next_id += 1
    return LabeledMask(grid=grid, classes=classes)


def pixel_accuracy(pairs, model: SegmenterParams) -> float:
    """Fraction of pixels whose predicted semantic class matches."""
    total = 0
    hit = 0
    for img, mask in pairs:
        sem = _semantic(mask)
        pred = predict_logits(img, model).argmax(axis=1).reshape(sem.shape)
        hit += int((pred == sem).sum())
        total += sem.size
    return hit / total
