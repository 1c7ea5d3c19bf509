"""Tape-based reverse-mode differentiation over dense float64 arrays.

A Tape is a declarative expression graph over a closed, enumerated set of
primitives (matmul, elementwise arithmetic, softmax, layer-norm, pointwise
nonlinearities, concat/slice/gather/reshape, reductions). It is built once
and can be evaluated repeatedly; replay with identical inputs is
bit-identical. Leaves are named inputs or parameters; `eval_and_backprop`
binds values, runs the forward pass, and accumulates gradients for every
parameter leaf.

All values are float64. Every primitive checks its output for non-finite
entries and raises NumericError naming the offending op.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_NEG_BIG = -1e30  # additive-mask logit; exp underflows to exactly 0.0
_LN_EPS = 1e-12


@dataclass
class _Op:
    name: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    payload: dict = field(default_factory=dict)
    leaf: str | None = None  # leaf name for "input"/"param" ops


def _as_shape(shape) -> tuple[int, ...]:
    return tuple(int(s) for s in shape)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


class Tape:
    """Expression graph builder. Methods append an op and return its node id."""

    def __init__(self):
        self.ops: list[_Op] = []
        self.leaves: dict[str, int] = {}
        self.param_names: list[str] = []

    # -- leaves ------------------------------------------------------------

    def _leaf(self, kind: str, name: str, shape) -> int:
        if name in self.leaves:
            raise ShapeError(f"duplicate leaf name {name!r}")
        nid = self._push(_Op(kind, (), _as_shape(shape), leaf=name))
        self.leaves[name] = nid
        return nid

    def input(self, name: str, shape) -> int:
        return self._leaf("input", name, shape)

    def param(self, name: str, shape) -> int:
        nid = self._leaf("param", name, shape)
        self.param_names.append(name)
        return nid

    def constant(self, value) -> int:
        arr = np.asarray(value, dtype=np.float64)
        return self._push(_Op("const", (), arr.shape, {"value": arr}))

    # -- op plumbing -------------------------------------------------------

    def _push(self, op: _Op) -> int:
        self.ops.append(op)
        return len(self.ops) - 1

    def shape_of(self, nid: int) -> tuple[int, ...]:
        return self.ops[nid].shape

    def _binary_shape(self, name: str, a: int, b: int) -> tuple[int, ...]:
        try:
            return tuple(np.broadcast_shapes(self.shape_of(a), self.shape_of(b)))
        except ValueError as exc:
            raise ShapeError(
                f"{name}: cannot broadcast {self.shape_of(a)} with {self.shape_of(b)}"
            ) from exc

    # -- arithmetic ----------------------------------------------------------

    def add(self, a: int, b: int) -> int:
        return self._push(_Op("add", (a, b), self._binary_shape("add", a, b)))

    def sub(self, a: int, b: int) -> int:
        return self._push(_Op("sub", (a, b), self._binary_shape("sub", a, b)))

    def mul(self, a: int, b: int) -> int:
        return self._push(_Op("mul", (a, b), self._binary_shape("mul", a, b)))

    def scale(self, a: int, k: float) -> int:
        return self._push(_Op("scale", (a,), self.shape_of(a), {"k": float(k)}))

    def offset(self, a: int, k: float) -> int:
        return self._push(_Op("offset", (a,), self.shape_of(a), {"k": float(k)}))

    def matmul(self, a: int, b: int) -> int:
        sa, sb = self.shape_of(a), self.shape_of(b)
        if len(sa) < 2 or len(sb) < 2:
            raise ShapeError(f"matmul needs >=2-d operands, got {sa} @ {sb}")
        if sa[-1] != sb[-2]:
            raise ShapeError(f"matmul inner dims differ: {sa} @ {sb}")
        try:
            lead = np.broadcast_shapes(sa[:-2], sb[:-2])
        except ValueError as exc:
            raise ShapeError(f"matmul batch dims differ: {sa} @ {sb}") from exc
        return self._push(_Op("matmul", (a, b), lead + (sa[-2], sb[-1])))

    # -- nonlinearities ------------------------------------------------------

    def tanh(self, a: int) -> int:
        return self._push(_Op("tanh", (a,), self.shape_of(a)))

    def relu(self, a: int) -> int:
        return self._push(_Op("relu", (a,), self.shape_of(a)))

    def exp(self, a: int) -> int:
        return self._push(_Op("exp", (a,), self.shape_of(a)))

    def log(self, a: int) -> int:
        return self._push(_Op("log", (a,), self.shape_of(a)))

    def sqrt(self, a: int) -> int:
        return self._push(_Op("sqrt", (a,), self.shape_of(a)))

    def reciprocal(self, a: int) -> int:
        return self._push(_Op("reciprocal", (a,), self.shape_of(a)))

    # -- normalizers -----------------------------------------------------------

    def softmax(self, a: int) -> int:
        """Row-wise softmax over the last axis."""
        return self._push(_Op("softmax", (a,), self.shape_of(a)))

    def layer_norm(self, a: int) -> int:
        """Zero-mean unit-variance normalization over the last axis (eps 1e-12)."""
        return self._push(_Op("layer_norm", (a,), self.shape_of(a)))

    # -- structure -------------------------------------------------------------

    def concat(self, nodes: Sequence[int], axis: int) -> int:
        shapes = [self.shape_of(n) for n in nodes]
        base = list(shapes[0])
        ax = axis % len(base)
        for s in shapes[1:]:
            if len(s) != len(base) or any(
                s[i] != base[i] for i in range(len(base)) if i != ax
            ):
                raise ShapeError(f"concat: incompatible shapes {shapes}")
            base[ax] += s[ax]
        return self._push(_Op("concat", tuple(nodes), tuple(base), {"axis": ax}))

    def slice(self, a: int, axis: int, start: int, stop: int) -> int:
        shape = list(self.shape_of(a))
        ax = axis % len(shape)
        if not (0 <= start <= stop <= shape[ax]):
            raise ShapeError(f"slice [{start}:{stop}] out of range for {tuple(shape)}")
        shape[ax] = stop - start
        return self._push(
            _Op("slice", (a,), tuple(shape), {"axis": ax, "start": start, "stop": stop})
        )

    def gather(self, a: int, index: np.ndarray) -> int:
        """Take rows of a 2-d node by a fixed integer index array (axis 0)."""
        sa = self.shape_of(a)
        if len(sa) != 2:
            raise ShapeError(f"gather expects a 2-d node, got {sa}")
        index = np.asarray(index, dtype=np.int64)
        return self._push(
            _Op("gather", (a,), index.shape + (sa[1],), {"index": index, "n": sa[0]})
        )

    def reshape(self, a: int, shape) -> int:
        shape = _as_shape(shape)
        if int(np.prod(shape, dtype=np.int64)) != int(
            np.prod(self.shape_of(a), dtype=np.int64)
        ):
            raise ShapeError(f"reshape {self.shape_of(a)} -> {shape}: size differs")
        return self._push(_Op("reshape", (a,), shape))

    def transpose(self, a: int) -> int:
        sa = self.shape_of(a)
        if len(sa) < 2:
            raise ShapeError(f"transpose needs >=2-d, got {sa}")
        return self._push(_Op("transpose", (a,), sa[:-2] + (sa[-1], sa[-2])))

    # -- reductions --------------------------------------------------------------

    def _reduce(self, name: str, a: int, axis, keepdims: bool) -> int:
        sa = self.shape_of(a)
        if axis is None:
            shape = tuple(1 for _ in sa) if keepdims else ()
        else:
            ax = axis % len(sa)
            shape = tuple(
                (1 if i == ax else s) for i, s in enumerate(sa) if keepdims or i != ax
            )
        return self._push(
            _Op(name, (a,), shape, {"axis": axis, "keepdims": keepdims})
        )

    def reduce_sum(self, a: int, axis: int | None = None, keepdims: bool = False) -> int:
        return self._reduce("reduce_sum", a, axis, keepdims)

    def reduce_mean(self, a: int, axis: int | None = None, keepdims: bool = False) -> int:
        return self._reduce("reduce_mean", a, axis, keepdims)

    # -- evaluation ----------------------------------------------------------------

    def forward(self, values: Mapping[str, np.ndarray]) -> list[np.ndarray]:
        """Evaluate every node; returns the per-node value list."""
        out: list[np.ndarray] = [None] * len(self.ops)  # type: ignore[list-item]
        for nid, op in enumerate(self.ops):
            if op.name in ("input", "param"):
                if op.leaf not in values:
                    raise ShapeError(f"no value supplied for leaf {op.leaf!r}")
                v = np.asarray(values[op.leaf], dtype=np.float64)
                if v.shape != op.shape:
                    raise ShapeError(
                        f"leaf {op.leaf!r}: supplied shape {v.shape}, tape expects {op.shape}"
                    )
            else:
                with np.errstate(all="ignore"):
                    v = _FORWARD[op.name](op, [out[i] for i in op.inputs])
            if not np.isfinite(np.sum(v)):
                if not np.all(np.isfinite(v)):
                    raise NumericError(
                        f"non-finite value in op {op.name!r} (node {nid})"
                    )
            out[nid] = v
        return out

    def backprop(
        self, values: list[np.ndarray], loss: int, wrt: Sequence[str]
    ) -> dict[str, np.ndarray]:
        if self.ops[loss].shape != ():
            raise ShapeError(
                f"loss node must be scalar, has shape {self.ops[loss].shape}"
            )
        grads: dict[int, np.ndarray] = {loss: np.asarray(1.0)}
        leaf_grads: dict[str, np.ndarray] = {}
        for nid in range(loss, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            op = self.ops[nid]
            if op.name in ("input", "param", "const"):
                if op.leaf is not None:
                    leaf_grads[op.leaf] = g
                continue
            in_grads = _BACKWARD[op.name](
                op, [values[i] for i in op.inputs], values[nid], g
            )
            for src, ig in zip(op.inputs, in_grads):
                if src in grads:
                    grads[src] = grads[src] + ig
                else:
                    grads[src] = ig
        return {
            name: leaf_grads.get(name, np.zeros(self.ops[self.leaves[name]].shape))
            for name in wrt
        }


def eval_and_backprop(
    tape: Tape, values: Mapping[str, np.ndarray], loss: int
) -> tuple[float, dict[str, np.ndarray]]:
    """Forward + reverse pass; returns (scalar loss, grads for every param leaf)."""
    vals = tape.forward(values)
    grads = tape.backprop(vals, loss, tape.param_names)
    return float(vals[loss]), grads


def finite_diff_check(
    tape: Tape,
    values: Mapping[str, np.ndarray],
    loss: int,
    step: float = 1e-5,
) -> float:
    """Max relative error of analytic grads vs central finite differences.

    Relative error uses max(|analytic|, |numeric|, 1e-12) as denominator;
    perturbs every element of every parameter leaf.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    _, grads = eval_and_backprop(tape, values, loss)
    work = {k: np.array(v, dtype=np.float64) for k, v in values.items()}
    worst = 0.0
    for name in tape.param_names:
        base = work[name]
        flat = base.reshape(-1)
        gflat = np.asarray(grads[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(tape.forward(work)[loss])
            flat[i] = orig - step
            lo = float(tape.forward(work)[loss])
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            analytic = float(gflat[i])
            denom = max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# -- primitive forward/backward tables -------------------------------------------


def _fw_add(op, xs):
    return xs[0] + xs[1]


def _fw_sub(op, xs):
    return xs[0] - xs[1]


def _fw_mul(op, xs):
    return xs[0] * xs[1]


def _fw_softmax(op, xs):
    x = xs[0]
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fw_layer_norm(op, xs):
    x = xs[0]
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + _LN_EPS)


def _fw_reduce(op, xs, fn):
    axis = op.payload["axis"]
    return fn(xs[0], axis=axis, keepdims=op.payload["keepdims"])


_FORWARD: dict[str, Callable] = {
    "const": lambda op, xs: op.payload["value"],
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "scale": lambda op, xs: xs[0] * op.payload["k"],
    "offset": lambda op, xs: xs[0] + op.payload["k"],
    "matmul": lambda op, xs: xs[0] @ xs[1],
    "tanh": lambda op, xs: np.tanh(xs[0]),
    "relu": lambda op, xs: np.maximum(xs[0], 0.0),
    "exp": lambda op, xs: np.exp(xs[0]),
    "log": lambda op, xs: np.log(xs[0]),
    "sqrt": lambda op, xs: np.sqrt(xs[0]),
    "reciprocal": lambda op, xs: 1.0 / xs[0],
    "softmax": _fw_softmax,
    "layer_norm": _fw_layer_norm,
    "concat": lambda op, xs: np.concatenate(xs, axis=op.payload["axis"]),
    "slice": lambda op, xs: xs[0][
        tuple(
            slice(op.payload["start"], op.payload["stop"])
            if i == op.payload["axis"]
            else slice(None)
            for i in range(xs[0].ndim)
        )
    ],
    "gather": lambda op, xs: xs[0][op.payload["index"]],
    "reshape": lambda op, xs: xs[0].reshape(op.shape),
    "transpose": lambda op, xs: _swap_last(xs[0]),
    "reduce_sum": lambda op, xs: _fw_reduce(op, xs, np.sum),
    "reduce_mean": lambda op, xs: _fw_reduce(op, xs, np.mean),
}


def _bw_add(op, xs, y, g):
    return (_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape))


def _bw_sub(op, xs, y, g):
    return (_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape))


def _bw_mul(op, xs, y, g):
    return (
        _unbroadcast(g * xs[1], xs[0].shape),
        _unbroadcast(g * xs[0], xs[1].shape),
    )


def _bw_matmul(op, xs, y, g):
    a, b = xs
    ga = g @ _swap_last(b)
    gb = _swap_last(a) @ g
    return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))


def _bw_softmax(op, xs, y, g):
    dot = np.sum(g * y, axis=-1, keepdims=True)
    return ((g - dot) * y,)


def _bw_layer_norm(op, xs, y, g):
    x = xs[0]
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    gm = g.mean(axis=-1, keepdims=True)
    gy = np.mean(g * y, axis=-1, keepdims=True)
    return ((g - gm - y * gy) * inv,)


def _bw_concat(op, xs, y, g):
    axis = op.payload["axis"]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _bw_slice(op, xs, y, g):
    out = np.zeros_like(xs[0])
    sel = tuple(
        slice(op.payload["start"], op.payload["stop"])
        if i == op.payload["axis"]
        else slice(None)
        for i in range(xs[0].ndim)
    )
    out[sel] = g
    return (out,)


def _bw_gather(op, xs, y, g):
    out = np.zeros_like(xs[0])
    idx = op.payload["index"].reshape(-1)
    np.add.at(out, idx, g.reshape(idx.size, -1))
    return (out,)


def _bw_reduce_sum(op, xs, y, g):
    axis = op.payload["axis"]
    if axis is None:
        return (np.broadcast_to(g, xs[0].shape).copy(),)
    if not op.payload["keepdims"]:
        g = np.expand_dims(g, axis=axis)
    return (np.broadcast_to(g, xs[0].shape).copy(),)


def _bw_reduce_mean(op, xs, y, g):
    axis = op.payload["axis"]
    n = xs[0].size if axis is None else xs[0].shape[axis]
    (gs,) = _bw_reduce_sum(op, xs, y, g)
    return (gs / n,)


_BACKWARD: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scale": lambda op, xs, y, g: (g * op.payload["k"],),
    "offset": lambda op, xs, y, g: (g,),
    "matmul": _bw_matmul,
    "tanh": lambda op, xs, y, g: (g * (1.0 - y * y),),
    "relu": lambda op, xs, y, g: (g * (xs[0] > 0.0),),
    "exp": lambda op, xs, y, g: (g * y,),
    "log": lambda op, xs, y, g: (g / xs[0],),
    "sqrt": lambda op, xs, y, g: (g * 0.5 / y,),
    "reciprocal": lambda op, xs, y, g: (-g * y * y,),
    "softmax": _bw_softmax,
    "layer_norm": _bw_layer_norm,
    "concat": _bw_concat,
    "slice": _bw_slice,
    "gather": _bw_gather,
    "reshape": lambda op, xs, y, g: (g.reshape(xs[0].shape),),
    "transpose": lambda op, xs, y, g: (_swap_last(g),),
    "reduce_sum": _bw_reduce_sum,
    "reduce_mean": _bw_reduce_mean,
}


# -- optimizer ---------------------------------------------------------------------


class AdamState:
    """Adam moments plus hyperparameters for one parameter set."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self._scratch: dict[str, np.ndarray] = {}


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update, in place on `params`.

    Written with a per-parameter scratch buffer: the moment and update
    passes dominate training time for the larger denoisers.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
            raise NumericError(f"NaN/Inf gradient for parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.m[name] = m
            state.v[name] = np.zeros_like(p)
            state._scratch[name] = np.empty_like(p)
        v = state.v[name]
        s = state._scratch[name]
        # m += (1-b1)(g - m);  v += (1-b2)(g^2 - v)
        np.subtract(g, m, out=s)
        s *= 1.0 - b1
        m += s
        np.multiply(g, g, out=s)
        s -= v
        s *= 1.0 - b2
        v += s
        # p -= lr * (m/corr1) / (sqrt(v/corr2) + eps)
        np.divide(v, corr2, out=s)
        np.sqrt(s, out=s)
        s += state.eps
        np.divide(m, s, out=s)
        s *= state.lr / corr1
        p -= s
    return params, state


def init_matrix(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    """Xavier-uniform init, float64."""
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))
