"""Closed set of differentiable primitives.

Every function accepts plain ndarrays or :class:`Var` nodes. With no Var among
the inputs it returns an ndarray and records nothing, so the same model code
serves inference and training.
"""
from __future__ import annotations

import contextlib
from typing import List, Optional, Sequence

import numpy as np

from .tape import AutogradError, Var

NORM_FLOOR = 1e-8
GEM_FLOOR = 1e-6
MINMAX_EPS = 1e-12


def is_var(x) -> bool:
    return isinstance(x, Var)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise AutogradError("inputs recorded on different tapes")
            tape = x.tape
    return tape


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class _Freezer:
    def __init__(self):
        self.values: List[np.ndarray] = []
        self.replay = False
        self.cursor = 0


_freezer: Optional[_Freezer] = None


@contextlib.contextmanager
def frozen_constants():
    """Record stop-gradient outputs once, then replay them on later evaluations.

    Inside the block, call ``.replay_from_start()`` on the yielded handle before
    each re-evaluation; every ``stop_gradient`` then returns the value it gave
    on the first (recording) evaluation, in call order. Numeric differentiation
    needs this to see detached quantities as constants, like the tape does.
    """
    global _freezer
    prev, _freezer = _freezer, _Freezer()
    handle = _freezer

    def replay_from_start():
        handle.replay = True
        handle.cursor = 0

    handle.replay_from_start = replay_from_start
    try:
        yield handle
    finally:
        _freezer = prev


def stop_gradient(x) -> np.ndarray:
    v = value(x)
    if _freezer is None:
        return v
    if not _freezer.replay:
        _freezer.values.append(np.array(v, copy=True))
        return v
    out = _freezer.values[_freezer.cursor]
    _freezer.cursor += 1
    return out


class _Probe:
    def __init__(self):
        self.margin = np.inf


_probe: Optional[_Probe] = None


@contextlib.contextmanager
def kink_probe():
    """Track the smallest distance of any evaluated input to a non-differentiable point."""
    global _probe
    prev, _probe = _probe, _Probe()
    try:
        yield _probe
    finally:
        _probe = prev


def note_kink(distance) -> None:
    if _probe is None:
        return
    d = np.asarray(distance)
    if d.size:
        _probe.margin = min(_probe.margin, float(d.min()))


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    va, vb = value(a), value(b)
    out = va + vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record("add", out, [
        (a, lambda g: _unbroadcast(g, va.shape)),
        (b, lambda g: _unbroadcast(g, vb.shape)),
    ])


def sub(a, b):
    va, vb = value(a), value(b)
    out = va - vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record("sub", out, [
        (a, lambda g: _unbroadcast(g, va.shape)),
        (b, lambda g: _unbroadcast(-g, vb.shape)),
    ])


def mul(a, b):
    va, vb = value(a), value(b)
    out = va * vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record("mul", out, [
        (a, lambda g: _unbroadcast(g * vb, va.shape)),
        (b, lambda g: _unbroadcast(g * va, vb.shape)),
    ])


def relu(x, op: str = "relu"):
    v = value(x)
    out = np.maximum(v, 0)
    note_kink(np.abs(v))
    if not is_var(x):
        return out
    return x.tape.record(op, out, [(x, lambda g: g * (v > 0))])


def hinge(x):
    """[x]_+ with subgradient 0 at the kink."""
    return relu(x, op="hinge")


# -- shape ---------------------------------------------------------------------

def reshape(x, shape):
    v = value(x)
    out = v.reshape(shape)
    if not is_var(x):
        return out
    return x.tape.record("reshape", out, [(x, lambda g: g.reshape(v.shape))])


def swap_last(x):
    v = value(x)
    out = np.swapaxes(v, -1, -2)
    if not is_var(x):
        return out
    return x.tape.record("swap_last", out, [(x, lambda g: np.swapaxes(g, -1, -2))])


def expand_last(x):
    return reshape(x, value(x).shape + (1,))


def gather(x, index):
    """Rows of ``x`` selected along axis 0 (indices may repeat)."""
    v = value(x)
    index = np.asarray(index, dtype=np.intp)
    out = v[index]
    if not is_var(x):
        return out

    def vjp(g):
        acc = np.zeros_like(v)
        np.add.at(acc, index, g)
        return acc

    return x.tape.record("gather", out, [(x, vjp)])


def concat(xs: Sequence, axis: int = 0):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def make(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        return lambda g: g[tuple(sl)]

    return tape.record("concat", out, [(x, make(i)) for i, x in enumerate(xs)])


# -- reductions ----------------------------------------------------------------

def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    v = value(x)
    out = np.asarray(v.sum(axis=axis))
    if not is_var(x):
        return out

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, v.shape).copy()

    return x.tape.record("sum", out, [(x, vjp)])


def mean(x, axis=None):
    v = value(x)
    n = v.size if axis is None else np.prod([v.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), np.asarray(1.0 / n, dtype=v.dtype))


# -- contraction ---------------------------------------------------------------

def matmul(a, b):
    """Batched matrix product ``a @ b`` with numpy broadcasting over batch dims."""
    va, vb = value(a), value(b)
    if va.ndim < 2 or vb.ndim < 2:
        raise AutogradError("matmul operands need at least two dimensions")
    out = va @ vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape.record("matmul", out, [
        (a, lambda g: _unbroadcast(g @ np.swapaxes(vb, -1, -2), va.shape)),
        (b, lambda g: _unbroadcast(np.swapaxes(va, -1, -2) @ g, vb.shape)),
    ])


def unfold(x, k: int, stride: int = 1, pad: int = 0):
    """Sliding k x k patches of a (B, H, W, C) map -> (B, Ho, Wo, k*k*C)."""
    v = value(x)
    if v.ndim != 4:
        raise AutogradError(f"unfold expects (B, H, W, C), got {v.shape}")
    B, H, W, C = v.shape
    xp = np.pad(v, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    cols = [xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
            for i in range(k) for j in range(k)]
    out = np.concatenate(cols, axis=-1)
    if not is_var(x):
        return out

    def vjp(g):
        gp = np.zeros_like(xp)
        for n, (i, j) in enumerate((i, j) for i in range(k) for j in range(k)):
            gp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += g[..., n * C:(n + 1) * C]
        return gp[:, pad:pad + H, pad:pad + W, :]

    return x.tape.record("unfold", out, [(x, vjp)])


# -- normalizations and nonlinear maps ----------------------------------------

def l2norm(x, axis: int = -1):
    """Euclidean norm along ``axis``; the adjoint at a zero vector is taken as 0."""
    v = value(x)
    out = np.sqrt((v * v).sum(axis=axis))
    if not is_var(x):
        return out

    def vjp(g):
        n = np.expand_dims(out, axis)
        safe = np.where(n > 0, n, 1)
        return np.where(n > 0, v / safe, 0) * np.expand_dims(g, axis)

    return x.tape.record("l2norm", out, [(x, vjp)])


def l2_normalize(x, eps: float = NORM_FLOOR):
    """x / max(||x||, eps) along the last axis."""
    v = value(x)
    n = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    big = n >= eps
    denom = np.where(big, n, eps)
    out = v / denom
    if not is_var(x):
        return out

    def vjp(g):
        radial = (out * g).sum(axis=-1, keepdims=True)
        return np.where(big, (g - out * radial) / denom, g / eps)

    return x.tape.record("l2_normalize", out, [(x, vjp)])


def softmax(x, beta: float = 1.0):
    """softmax(beta * x) along the last axis, max-subtracted before exponentiation."""
    v = value(x)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(beta * shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if not is_var(x):
        return out

    def vjp(g):
        return beta * out * (g - (g * out).sum(axis=-1, keepdims=True))

    return x.tape.record("softmax", out, [(x, vjp)])


def minmax_normalize(x, eps: float = MINMAX_EPS):
    """Per-map min-max normalization over the last two axes.

    Maps whose range is below ``eps`` are clamped to [0, 1] instead. Ties for the
    min or max send the gradient to the first attaining index.
    """
    v = value(x)
    lead = v.shape[:-2]
    flat = v.reshape(lead + (-1,))
    imin = flat.argmin(axis=-1)[..., None]
    imax = flat.argmax(axis=-1)[..., None]
    lo = np.take_along_axis(flat, imin, -1)
    hi = np.take_along_axis(flat, imax, -1)
    rng = hi - lo
    degenerate = rng < eps
    safe = np.where(degenerate, 1, rng)
    out_flat = np.where(degenerate, np.clip(flat, 0, 1), (flat - lo) / safe)
    out = out_flat.reshape(v.shape)
    if _probe is not None and flat.shape[-1] > 1:
        srt = np.sort(flat, axis=-1)
        live = ~degenerate[..., 0]
        note_kink((srt[..., 1] - srt[..., 0])[live])
        note_kink((srt[..., -1] - srt[..., -2])[live])
        note_kink(np.minimum(np.abs(flat), np.abs(flat - 1))[degenerate[..., 0]])
    if not is_var(x):
        return out

    def vjp(g):
        gf = g.reshape(flat.shape)
        direct = gf / safe
        s = (gf * out_flat).sum(axis=-1, keepdims=True) / safe
        gx = direct.copy()
        # dL/dlo = sum g (y - 1) / rng, dL/dhi = -sum g y / rng
        dlo = s - gf.sum(axis=-1, keepdims=True) / safe
        dhi = -s
        np.put_along_axis(gx, imin, np.take_along_axis(gx, imin, -1) + dlo, -1)
        np.put_along_axis(gx, imax, np.take_along_axis(gx, imax, -1) + dhi, -1)
        inside = (flat > 0) & (flat < 1)
        gx = np.where(degenerate, gf * inside, gx)
        return gx.reshape(v.shape)

    return x.tape.record("minmax_normalize", out, [(x, vjp)])


def gem(x, p: float = 3.0, floor: float = GEM_FLOOR):
    """Generalized mean over the spatial axes (-3, -2) of a (..., h, w, d) map."""
    v = value(x)
    xc = np.maximum(v, floor)
    n = v.shape[-3] * v.shape[-2]
    m = (xc ** p).sum(axis=(-3, -2)) / n
    out = m ** (1.0 / p)
    note_kink(np.abs(v - floor))
    if not is_var(x):
        return out

    def vjp(g):
        coef = (g * out ** (1 - p) / n)[..., None, None, :]
        return coef * xc ** (p - 1) * (v > floor)

    return x.tape.record("gem", out, [(x, vjp)])


def batch_norm(x, eps: float = 1e-5):
    """Standardize (N, d) rows with the batch mean and biased variance."""
    v = value(x)
    mu = v.mean(axis=0)
    var = v.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    if not is_var(x):
        return xhat

    def vjp(g):
        n = v.shape[0]
        return inv / n * (n * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0))

    return x.tape.record("batch_norm", xhat, [(x, vjp)])


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits), logits (N, K)."""
    v = value(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if v.ndim != 2 or labels.shape != (v.shape[0],):
        raise AutogradError(f"cross_entropy expects (N, K) logits and N labels, got {v.shape}, {labels.shape}")
    K = v.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise IndexError(f"label out of range for {K} classes")
    shifted = v - v.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = v.shape[0]
    out = np.asarray(-logp[np.arange(n), labels].sum() / n, dtype=v.dtype)
    if not is_var(logits):
        return out

    def vjp(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return grad * (g / n)

    return logits.tape.record("cross_entropy", out, [(logits, vjp)])
