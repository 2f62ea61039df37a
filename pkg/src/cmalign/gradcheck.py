"""Finite-difference checks of every primitive and of the composite objective.

Each case draws float64 inputs from a seed and redraws them while any input
sits within ``KINK_MARGIN`` of a non-differentiable point (hinge/relu at 0,
min/max ties, GeM floor, batch-hard selection ties).
"""
from __future__ import annotations

from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .autograd import finite_diff_check, ops
from .correspondence import align, co_attention, cosine_similarity, matching_probability, soft_warp
from .losses import (AlignOptions, ClassifierHead, LossWeights, batch_hard_triplet, classification_loss,
                     dense_triplet_loss, local_distance, objective)
from .tensor_field import gem_pool, person_mask

KINK_MARGIN = 1e-3
MAX_REDRAWS = 200

Case = Tuple[Callable, List[np.ndarray]]


def _project(out, rng_or_weights):
    """Scalar test function: random linear functional of the output."""
    w = rng_or_weights
    return ops.sum(ops.mul(out, w))


def _weights(rng, shape):
    return rng.normal(size=shape)


def _case_add(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    w = _weights(rng, (3, 4))
    return (lambda x, y: _project(ops.add(x, y), w)), [a, b]


def _case_sub(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 1))
    w = _weights(rng, (3, 4))
    return (lambda x, y: _project(ops.sub(x, y), w)), [a, b]


def _case_mul(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4,))
    w = _weights(rng, (2, 3, 4))
    return (lambda x, y: _project(ops.mul(x, y), w)), [a, b]


def _case_matmul(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    w = _weights(rng, (2, 3, 5))
    return (lambda x, y: _project(ops.matmul(x, y), w)), [a, b]


def _case_unfold(rng):
    x = rng.normal(size=(2, 5, 4, 2))
    w = _weights(rng, (2, 3, 2, 18))
    return (lambda v: _project(ops.unfold(v, 3, 2, 1), w)), [x]


def _case_relu(rng):
    x = rng.normal(size=(3, 4))
    w = _weights(rng, (3, 4))
    return (lambda v: _project(ops.relu(v), w)), [x]


def _case_hinge(rng):
    x = rng.normal(size=(6,))
    w = _weights(rng, (6,))
    return (lambda v: _project(ops.hinge(v), w)), [x]


def _case_shape(rng):
    a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(2, 2, 4))
    idx = np.array([0, 4, 4, 1])
    w = _weights(rng, (4, 4, 2))

    def fn(x, y):
        c = ops.concat([x, y], axis=0)
        g = ops.gather(c, idx)
        return _project(ops.swap_last(ops.reshape(g, (4, 2, 4))), w)

    return fn, [a, b]


def _case_reduce(rng):
    x = rng.normal(size=(3, 4, 2))
    w = _weights(rng, (3, 2))
    return (lambda v: ops.add(_project(ops.sum(v, axis=1), w), ops.mean(v))), [x]


def _case_l2norm(rng):
    x = rng.normal(size=(3, 4, 5))
    w = _weights(rng, (3, 4))
    return (lambda v: _project(ops.l2norm(v), w)), [x]


def _case_l2_normalize(rng):
    x = rng.normal(size=(4, 5))
    w = _weights(rng, (4, 5))
    return (lambda v: _project(ops.l2_normalize(v), w)), [x]


def _case_softmax(rng):
    x = rng.normal(size=(3, 6))
    w = _weights(rng, (3, 6))
    return (lambda v: _project(ops.softmax(v, 5.0), w)), [x]


def _case_minmax(rng):
    x = rng.normal(size=(2, 3, 4))
    w = _weights(rng, (2, 3, 4))
    return (lambda v: _project(ops.minmax_normalize(v), w)), [x]


def _case_gem(rng):
    x = rng.uniform(0.1, 2.0, size=(2, 3, 3, 4))
    w = _weights(rng, (2, 4))
    return (lambda v: _project(ops.gem(v, 3.0), w)), [x]


def _case_batch_norm(rng):
    x = rng.normal(size=(6, 4))
    w = _weights(rng, (6, 4))
    return (lambda v: _project(ops.batch_norm(v), w)), [x]


def _case_cross_entropy(rng):
    x = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    return (lambda v: ops.cross_entropy(v, labels)), [x]


def _maps(rng, n=1, h=3, w=3, d=4):
    return [rng.normal(size=(h, w, d)) for _ in range(n)]


def _case_cosine(rng):
    a, b = _maps(rng, 2)
    w = _weights(rng, (3, 3, 3, 3))
    return (lambda x, y: _project(cosine_similarity(x, y), w)), [a, b]


def _case_matching(rng):
    c = rng.uniform(-1, 1, size=(3, 3, 3, 3))
    w = _weights(rng, c.shape)
    return (lambda x: _project(matching_probability(x, 10.0), w)), [c]


def _case_soft_warp(rng):
    c = rng.uniform(-1, 1, size=(3, 3, 3, 3))
    (f,) = _maps(rng)
    w = _weights(rng, f.shape)
    return (lambda x, y: _project(soft_warp(matching_probability(x, 5.0), y), w)), [c, f]


def _case_align(rng):
    a, b = _maps(rng, 2)
    m = rng.uniform(0, 1, size=(3, 3))
    w = _weights(rng, a.shape)

    def fn(x, y, mask):
        P = matching_probability(cosine_similarity(x, y), 10.0)
        return _project(align(x, y, mask, P), w)

    return fn, [a, b, m]


def _case_co_attention(rng):
    ma, mb = rng.uniform(0, 1, size=(3, 3)), rng.uniform(0, 1, size=(3, 3))
    c = rng.uniform(-1, 1, size=(3, 3, 3, 3))
    w = _weights(rng, (3, 3))
    return (lambda x, y, s: _project(co_attention(x, y, matching_probability(s, 5.0)), w)), [ma, mb, c]


def _case_person_mask(rng):
    (f,) = _maps(rng)
    w = _weights(rng, (3, 3))
    return (lambda x: _project(person_mask(x), w)), [f]


def _case_local_distance(rng):
    a, b = _maps(rng, 2)
    w = _weights(rng, (3, 3))
    return (lambda x, y: _project(local_distance(x, y), w)), [a, b]


def _case_dense_triplet(rng):
    dp, dn = rng.uniform(0, 2, size=(3, 3)), rng.uniform(0, 2, size=(3, 3))
    att = rng.uniform(0, 1, size=(3, 3))
    return (lambda x, y, a: dense_triplet_loss(x, y, a, 0.3)), [dp, dn, att]


def _case_batch_hard(rng):
    x = rng.normal(size=(6, 3))
    labels = np.array([0, 0, 1, 1, 2, 2])
    return (lambda v: batch_hard_triplet(v, labels, 0.3)), [x]


def _case_classification(rng):
    head = ClassifierHead(4, 3, rng, dtype=np.float64)
    x = rng.normal(size=(5, 4))
    labels = rng.integers(0, 3, size=5)
    names = sorted(head.params)

    def fn(v, *ps):
        return classification_loss(v, labels, head, dict(zip(names, ps)))

    return fn, [x] + [head.params[n] + rng.normal(scale=0.1, size=head.params[n].shape) for n in names]


def _case_pipeline(rng):
    """matching probability -> soft warp -> GeM -> cross-entropy."""
    c = rng.uniform(-1, 1, size=(2, 3, 3, 3, 3))
    f = rng.uniform(0.2, 2.0, size=(2, 3, 3, 4))
    W = rng.normal(size=(4, 3))
    labels = np.array([0, 2])

    def fn(s, x, wm):
        desc = gem_pool(soft_warp(matching_probability(s, 10.0), x), 3.0)
        return ops.cross_entropy(ops.matmul(desc, wm), labels)

    return fn, [c, f, W]


def micro_batch(rng, h=3, w=3, d=4, per_id=2):
    """Two identities, ``per_id`` images each per modality; positive features."""
    labels = np.repeat([0, 1], per_id)
    fa = rng.uniform(0.1, 1.5, size=(labels.size, h, w, d))
    fb = rng.uniform(0.1, 1.5, size=(labels.size, h, w, d))
    head = ClassifierHead(d, 2, rng, dtype=np.float64)
    return fa, fb, labels, head


def _case_total_loss(rng):
    fa, fb, labels, head = micro_batch(rng)
    names = sorted(head.params)
    weights = LossWeights(1.0, 0.5, 0.3, 10.0)

    def fn(xa, xb, *ps):
        params = dict(zip(names, ps))
        return objective({5: xa}, {5: xb}, labels, labels, head, weights, AlignOptions(),
                         head_params=params)["L_total"]

    return fn, [fa, fb] + [head.params[n] + rng.normal(scale=0.1, size=head.params[n].shape) for n in names]


CASES: Dict[str, Callable] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "matmul": _case_matmul,
    "unfold": _case_unfold,
    "relu": _case_relu,
    "hinge": _case_hinge,
    "shape": _case_shape,
    "reduce": _case_reduce,
    "l2norm": _case_l2norm,
    "l2_normalize": _case_l2_normalize,
    "softmax": _case_softmax,
    "minmax_normalize": _case_minmax,
    "gem": _case_gem,
    "batch_norm": _case_batch_norm,
    "cross_entropy": _case_cross_entropy,
    "cosine_similarity": _case_cosine,
    "matching_probability": _case_matching,
    "soft_warp": _case_soft_warp,
    "align": _case_align,
    "co_attention": _case_co_attention,
    "person_mask": _case_person_mask,
    "local_distance": _case_local_distance,
    "dense_triplet_loss": _case_dense_triplet,
    "batch_hard_triplet": _case_batch_hard,
    "classification_loss": _case_classification,
    "warp_gem_xent_chain": _case_pipeline,
    "total_loss": _case_total_loss,
}


def draw_case(name: str, seed: int) -> Case:
    """Inputs for ``name`` at ``seed``, redrawn until clear of every kink."""
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    for _ in range(MAX_REDRAWS):
        fn, inputs = CASES[name](rng)
        with ops.kink_probe() as probe:
            fn(*inputs)
        if probe.margin >= KINK_MARGIN:
            return fn, inputs
    raise RuntimeError(f"{name}: could not draw inputs away from kinks")


def check_op(name: str, seeds: int = 10, step: float = 1e-4) -> float:
    """Worst relative error of ``name`` over ``seeds`` random draws."""
    worst = 0.0
    for seed in range(seeds):
        fn, inputs = draw_case(name, seed)
        worst = max(worst, finite_diff_check(fn, inputs, step))
    return worst


def run_suite(names: Sequence[str] = ("all",), seeds: int = 10, step: float = 1e-4) -> Dict[str, float]:
    if "all" in names:
        names = list(CASES)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck op(s): {', '.join(unknown)}")
    return {name: check_op(name, seeds, step) for name in names}
