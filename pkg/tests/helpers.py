"""Shared test utilities: random tape construction and small oracles."""

from __future__ import annotations

import numpy as np

from gcdlab.autodiff import Tape


def random_mlp_tape(rng: np.random.Generator, max_params: int = 500):
    """Random small feed-forward tape with smooth ops only.

    Uses tanh/softmax/layer-norm/matmul/add/mul so central differences are
    valid everywhere. Returns (tape, values, loss_node).
    """
    batch = int(rng.integers(1, 5))
    d_in = int(rng.integers(3, 9))
    widths = [d_in]
    # keep total parameter count under max_params; widths >= 4 so that
    # layer-norm never degenerates to a piecewise-constant map
    budget = max_params
    for _ in range(int(rng.integers(1, 4))):
        w = int(rng.integers(4, 9))
        if (widths[-1] + 1) * w > budget:
            break
        budget -= (widths[-1] + 1) * w
        widths.append(w)
    if len(widths) == 1:
        widths.append(4)

    tape = Tape()
    values: dict[str, np.ndarray] = {}
    x = tape.input("x", (batch, d_in))
    values["x"] = rng.normal(size=(batch, d_in))
    h = x
    for i in range(1, len(widths)):
        w = tape.param(f"w{i}", (widths[i - 1], widths[i]))
        b = tape.param(f"b{i}", (widths[i],))
        values[f"w{i}"] = rng.normal(size=(widths[i - 1], widths[i])) * 0.5
        values[f"b{i}"] = rng.normal(size=(widths[i],)) * 0.1
        h = tape.add(tape.matmul(h, w), b)
        kind = rng.integers(0, 3)
        if kind == 0:
            h = tape.tanh(h)
        elif kind == 1:
            h = tape.softmax(h)
        else:
            h = tape.layer_norm(h)
    # random fixed readout so the loss is never constant in the parameters
    # (e.g. sum of squares of a layer-norm row is identically 1)
    readout = tape.constant(rng.normal(size=(widths[-1], 1)))
    out = tape.matmul(h, readout)
    loss = tape.reduce_mean(tape.mul(out, out))
    return tape, values, loss
