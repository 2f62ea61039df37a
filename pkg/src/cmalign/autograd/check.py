"""Central finite differences as an independent oracle for the tape."""
from __future__ import annotations

from typing import Callable, List, Sequence

import numpy as np

from .tape import AutogradError, NumericError, Tape, backward
from . import ops


def _scalar(out) -> float:
    v = np.asarray(ops.value(out), dtype=np.float64)
    if v.size != 1:
        raise AutogradError(f"function must return a scalar, got shape {v.shape}")
    return float(v.reshape(()))


def numeric_gradient(fn: Callable, inputs: Sequence[np.ndarray], step: float = 1e-4) -> List[np.ndarray]:
    """Central-difference gradient of scalar ``fn(*inputs)`` w.r.t. each input."""
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    with ops.frozen_constants() as frozen:
        _scalar(fn(*arrays))
        return _numeric(fn, arrays, step, frozen)


def _numeric(fn, arrays, step, frozen):
    grads = []
    for k, x in enumerate(arrays):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + step
            frozen.replay_from_start()
            hi = _scalar(fn(*arrays))
            x[idx] = orig - step
            frozen.replay_from_start()
            lo = _scalar(fn(*arrays))
            x[idx] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"function is non-finite at a perturbation of input {k} index {idx}")
            g[idx] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def analytic_gradient(fn: Callable, inputs: Sequence[np.ndarray]) -> List[np.ndarray]:
    tape = Tape()
    leaves = [tape.leaf(np.array(x, dtype=np.float64), name=f"in{k}") for k, x in enumerate(inputs)]
    out = fn(*leaves)
    if not isinstance(out, ops.Var):
        # output independent of every input
        _scalar(out)
        return [np.zeros_like(leaf.value) for leaf in leaves]
    backward(tape, out)
    return [leaf.grad for leaf in leaves]


def finite_diff_check(fn: Callable, inputs: Sequence[np.ndarray], step: float = 1e-4) -> float:
    """Max relative disagreement between tape and central-difference gradients.

    ``fn`` must be written with :mod:`cmalign.autograd.ops` so it runs both on
    Vars (analytic route) and on plain float64 arrays (numeric route). The error
    per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    analytic = analytic_gradient(fn, inputs)
    numeric = numeric_gradient(fn, inputs, step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            continue
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
