"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of ops the retrieval transformer needs are provided. Every op
takes and returns :class:`Tensor`; when a :class:`Tape` is active and any input
requires a gradient, the op appends its gradient rule to the tape.

    with Tape() as tape:
        loss = f(params)
    grads = tape.backward(loss, params)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, NumericalError

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5

_active: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "degenerate", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        # set by softmax_masked: boolean array over rows that were fully masked
        self.degenerate = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Op:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    """Ordered record of differentiable ops, replayed backwards by :meth:`backward`."""

    ops: list = field(default_factory=list)

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def backward(self, loss: Tensor, wrt: Sequence[Tensor]) -> dict:
        """Gradients of scalar ``loss`` for every tensor in ``wrt``.

        Parameters that never reached the loss get an all-zero entry.
        """
        if loss.data.size != 1:
            raise ConfigurationError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        # consumers of an op's output always sit later on the tape, so by the
        # time the reverse sweep reaches the op its gradient is complete
        for op in reversed(self.ops):
            g = grads.get(id(op.output))
            if g is None:
                continue
            for inp, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return {p: grads.get(id(p), np.zeros_like(p.data)) for p in wrt}


def active_tape():
    return _active[-1] if _active else None


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name, out_data, inputs, backward):
    tape = active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.ops.append(_Op(name, tuple(inputs), out, backward))
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, c: float):
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def gelu(x):
    """tanh-approximated GELU."""
    k = math.sqrt(2.0 / math.pi)
    x2 = x.data * x.data
    t = np.tanh(k * x.data * (1.0 + 0.044715 * x2))
    out = 0.5 * x.data * (1.0 + t)

    def back(g):
        du = k * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _record("gelu", out, (x,), back)


# -- linear algebra / shape -------------------------------------------------

def _mm(x, w):
    """x (..., k) @ w (k, m) as one flat gemm."""
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[-1],))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2

    def back(g):
        if flat:
            # stacked activation times a weight matrix: flat gemms, no batch + sum
            ga = _mm(g, b.data.T)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    out = _mm(a.data, b.data) if flat else a.data @ b.data
    return _record("matmul", out, (a, b), back)


def transpose(x, axes):
    inv = np.argsort(axes)
    return _record("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape):
    old = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def broadcast_to(x, shape):
    old = x.shape
    return _record("broadcast_to", np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, old),))


def take(x, idx):
    """Rows of ``x`` selected along axis 0 by an integer index array of any shape."""
    idx = np.asarray(idx)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record("take", x.data[idx], (x,), back)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def sum_(x, axis=None, keepdims=False):
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None):
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis), 1.0 / n)


def logsumexp(x, axis=-1):
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def back(g):
        return (np.expand_dims(g, axis) * e / s,)

    return _record("logsumexp", out, (x,), back)


# -- normalisation / attention ----------------------------------------------

def softmax_masked(logits, blocked):
    """Softmax along the last axis with boolean ``blocked`` positions forced to zero.

    ``blocked`` broadcasts against ``logits``. Blocked entries get exactly zero
    weight. A row with every position blocked comes back all-zero and is
    flagged in ``out.degenerate`` (shape ``logits.shape[:-1]``).
    """
    blocked = np.broadcast_to(np.asarray(blocked, dtype=bool), logits.shape)
    if logits.shape != blocked.shape:
        raise ConfigurationError(f"mask shape {blocked.shape} does not match logits {logits.shape}")
    z = np.where(blocked, -np.inf, logits.data)
    degenerate = blocked.all(axis=-1)
    m = z.max(axis=-1, keepdims=True)
    m = np.where(degenerate[..., None], 0.0, m)
    e = np.where(blocked, 0.0, np.exp(z - m))
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s == 0.0, 1.0, s)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    out = _record("softmax_masked", y, (logits,), back)
    out.degenerate = degenerate
    return out


def layer_norm(x, gain, bias):
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _record("layer_norm", out, (x, gain, bias), back)


# -- optimisation -------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Decoupled-weight-decay Adam, in place on ``params`` (name -> Tensor).

    Every gradient is checked before any parameter moves, so a NaN aborts the
    whole step and names the offending parameter.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}", where=name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def grad_check(f, params, num_samples=20, step=1e-5, rng=None):
    """Max relative error between tape gradients and central differences.

    ``f`` maps nothing to a scalar Tensor and must read ``params`` (a list of
    Tensors) each time it is called. Up to ``num_samples`` coordinates per
    parameter are checked; ``None`` checks all of them.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    with Tape() as tape:
        loss = f()
    analytic = tape.backward(loss, params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if num_samples is not None and flat.size > num_samples:
            coords = rng.choice(flat.size, size=num_samples, replace=False)
        ga = analytic[p].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = float(f().data)
            flat[c] = orig - step
            down = float(f().data)
            flat[c] = orig
            num = (up - down) / (2 * step)
            err = abs(ga[c] - num) / max(abs(ga[c]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
