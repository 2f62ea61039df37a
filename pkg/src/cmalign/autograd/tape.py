"""Reverse-mode differentiation tape.

A :class:`Tape` records every primitive evaluated on its :class:`Var` nodes in
creation order, so the record is topologically sorted by construction.
:func:`backward` walks it in reverse and accumulates vector-Jacobian products.
"""
from __future__ import annotations

import itertools
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np


class AutogradError(Exception):
    """Misuse of the tape (non-scalar root, foreign nodes, ...)."""


class NumericError(AutogradError):
    """A non-finite value appeared during the backward pass."""


Vjp = Callable[[np.ndarray], np.ndarray]


class Var:
    """A node on a tape holding a primal value."""

    # keep numpy from broadcasting over Var objects; ndarray op Var defers to Var
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", value: np.ndarray, op: str,
                 parents: Sequence[Tuple["Var", Vjp]] = (), name: Optional[str] = None):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self.index = len(tape.nodes)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def __repr__(self):
        return f"Var(op={self.op!r}, shape={self.shape}, name={self.name!r})"

    # arithmetic sugar; implemented in ops to keep all primitives in one place
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise AutogradError("division by a Var is not a supported primitive")
        from . import ops
        return ops.mul(self, 1.0 / np.asarray(other, dtype=self.dtype))


class Tape:
    """Ordered record of primitive evaluations."""

    _ids = itertools.count()

    def __init__(self):
        self.nodes: List[Var] = []
        self.id = next(Tape._ids)

    def leaf(self, value, name: Optional[str] = None) -> Var:
        value = np.array(value, copy=True)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        var = Var(self, value, "leaf", name=name if name is not None else f"x{len(self.nodes)}")
        self.nodes.append(var)
        return var

    def record(self, op: str, value: np.ndarray, parents: Sequence[Tuple[object, Vjp]]) -> Var:
        links = []
        for parent, vjp in parents:
            if not isinstance(parent, Var):
                continue
            if parent.tape is not self:
                raise AutogradError(f"{op}: input recorded on a different tape")
            links.append((parent, vjp))
        var = Var(self, value, op, links)
        self.nodes.append(var)
        return var

    def leaves(self) -> List[Var]:
        return [n for n in self.nodes if n.is_leaf]


def backward(tape: Tape, root: Var) -> Dict[str, np.ndarray]:
    """Gradients of scalar ``root`` w.r.t. every leaf of ``tape``.

    Returns a mapping leaf name -> gradient (zeros for leaves the root does not
    depend on). Each leaf's ``grad`` attribute is set as well.
    """
    if not isinstance(root, Var) or root.tape is not tape:
        raise AutogradError("root must be a Var recorded on this tape")
    if root.value.size != 1:
        raise AutogradError(f"backward needs a scalar root, got shape {root.shape}")

    grads: Dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
    for node in reversed(tape.nodes[: root.index + 1]):
        g = grads.pop(node.index, None)
        if node.is_leaf:
            node.grad = g if g is not None else np.zeros_like(node.value)
            continue
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if contrib.shape != parent.shape:
                raise AutogradError(
                    f"{node.op}: adjoint shape {contrib.shape} != input shape {parent.shape}")
            if not np.all(np.isfinite(contrib)):
                raise NumericError(f"non-finite gradient produced by primitive '{node.op}'")
            prev = grads.get(parent.index)
            grads[parent.index] = contrib if prev is None else prev + contrib

    out = {}
    for leaf in tape.leaves():
        if leaf.grad is None or leaf.index > root.index:
            leaf.grad = np.zeros_like(leaf.value)
        out[leaf.name] = leaf.grad
    return out
