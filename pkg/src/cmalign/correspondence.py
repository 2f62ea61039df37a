"""Dense cross-modal correspondence between two feature maps.

Index convention: ``C[..., pr, pc, qr, qc]`` relates target position p to
source position q. Reversing the alignment direction means swapping the
arguments; there is no separate code path.
"""
from __future__ import annotations

import csv

import numpy as np

from .autograd import ops
from .tensor_field import DimensionError, minmax_normalize

NORM_FLOOR = 1e-8
DEFAULT_BETA = 50.0


def _spatial(x, name):
    v = ops.value(x)
    if v.ndim < 2:
        raise DimensionError(f"{name} needs at least two spatial axes, got {v.shape}")
    return v.shape


def cosine_similarity(f_tgt, f_src):
    ts, ss = ops.value(f_tgt).shape, ops.value(f_src).shape
    if ts != ss or len(ts) < 3:
        raise DimensionError(f"cosine_similarity: target {ts} and source {ss} must be equal (..., h, w, d)")
    *lead, h, w, d = ts
    a = ops.reshape(ops.l2_normalize(f_tgt, NORM_FLOOR), (*lead, h * w, d))
    b = ops.reshape(ops.l2_normalize(f_src, NORM_FLOOR), (*lead, h * w, d))
    c = ops.matmul(a, ops.swap_last(b))
    return ops.reshape(c, (*lead, h, w, h, w))


def matching_probability(C, beta: float = DEFAULT_BETA):
    """Softmax of ``beta * C`` over source positions for every target position."""
    if not beta > 0:
        raise ValueError(f"temperature must be positive, got {beta}")
    shape = ops.value(C).shape
    if len(shape) < 4:
        raise DimensionError(f"similarity must be (..., h, w, h, w), got {shape}")
    *lead, h, w, hs, ws = shape
    flat = ops.reshape(C, (*lead, h, w, hs * ws))
    return ops.reshape(ops.softmax(flat, beta), shape)


def soft_warp(P, f_src):
    """Aggregate source features (or a source spatial map) with matching probabilities.

    ``f_src`` may be a feature map ``(..., h, w, d)`` or a spatial map
    ``(..., h, w)``; the latter is treated as a single channel.
    """
    ps = ops.value(P).shape
    fs = ops.value(f_src).shape
    *lead, h, w, hs, ws = ps
    spatial = len(fs) == len(ps) - 2
    if spatial:
        f_src = ops.expand_last(f_src)
        fs = fs + (1,)
    if len(fs) != len(ps) - 1 or tuple(fs[:-1]) != (*lead, hs, ws):
        raise DimensionError(f"soft_warp: probabilities {ps} incompatible with source {ops.value(f_src).shape}")
    d = fs[-1]
    out = ops.matmul(ops.reshape(P, (*lead, h * w, hs * ws)), ops.reshape(f_src, (*lead, hs * ws, d)))
    out = ops.reshape(out, (*lead, h, w, d))
    if spatial:
        out = ops.reshape(out, (*lead, h, w))
    return out


def align(f_tgt, f_src, mask_tgt, P):
    """Blend warped source features into the target where the target mask is on."""
    ts, ss = ops.value(f_tgt).shape, ops.value(f_src).shape
    ms = ops.value(mask_tgt).shape
    if ts != ss or tuple(ms) != tuple(ts[:-1]):
        raise DimensionError(f"align: target {ts}, source {ss}, mask {ms} are incompatible")
    warped = soft_warp(P, f_src)
    m = ops.expand_last(mask_tgt)
    return ops.add(ops.mul(m, warped), ops.mul(ops.sub(1.0, m), f_tgt))


def co_attention(mask_tgt, mask_src, P):
    """Min-max normalized product of the target mask and the warped source mask."""
    return minmax_normalize(ops.mul(mask_tgt, soft_warp(P, mask_src)))


def bidirectional(f_a, f_b, mask_a, mask_b, beta: float = DEFAULT_BETA):
    """Reconstructions of both maps from each other: (f_a from f_b, f_b from f_a)."""
    P_ab = matching_probability(cosine_similarity(f_a, f_b), beta)
    P_ba = matching_probability(cosine_similarity(f_b, f_a), beta)
    return align(f_a, f_b, mask_a, P_ab), align(f_b, f_a, mask_b, P_ba)


def hard_matches(P):
    """argmax over source positions for every target position -> (..., h, w, 2)."""
    p = ops.value(P)
    *lead, h, w, hs, ws = p.shape
    idx = p.reshape(*lead, h, w, hs * ws).argmax(axis=-1)
    return np.stack(np.unravel_index(idx, (hs, ws)), axis=-1)


def top_matches(P, k: int = 20):
    """Best match of every target position, keeping the ``k`` most probable.

    Each target position contributes at most one row, so the result holds
    ``min(k, h*w)`` rows ``(p_row, p_col, q_row, q_col, prob)`` sorted by
    descending probability (ties by target position).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    p = np.asarray(ops.value(P), dtype=np.float64)
    if p.ndim != 4:
        raise DimensionError(f"top_matches expects a single (h, w, h, w) tensor, got {p.shape}")
    h, w, hs, ws = p.shape
    flat = p.reshape(h * w, hs * ws)
    best = flat.argmax(axis=1)
    prob = flat[np.arange(h * w), best]
    order = np.argsort(-prob, kind="stable")[:k]
    rows = []
    for t in order:
        pr, pc = divmod(int(t), w)
        qr, qc = divmod(int(best[t]), ws)
        rows.append((pr, pc, qr, qc, float(prob[t])))
    return rows


def export_matches(path, P, k: int = 20) -> int:
    """Write :func:`top_matches` as CSV; returns the number of data rows."""
    rows = top_matches(P, k)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["p_row", "p_col", "q_row", "q_col", "prob"])
        for pr, pc, qr, qc, prob in rows:
            writer.writerow([pr, pc, qr, qc, f"{prob:.9g}"])
    return len(rows)


def read_matches(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["p_row"]), int(r["p_col"]), int(r["q_row"]), int(r["q_col"]), float(r["prob"]))
                for r in reader]
