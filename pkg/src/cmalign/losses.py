"""ID, ID-consistency and dense triplet objectives."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .autograd import ops
from .correspondence import align, co_attention, cosine_similarity, matching_probability
from .tensor_field import DimensionError, DEFAULT_GEM_P, gem_pool, person_mask


class ConfigurationError(ValueError):
    """Batch composition cannot support the requested loss."""


class PairingError(ValueError):
    """Reconstruction built from a pair of different identities."""


@dataclass
class LossWeights:
    lambda_ic: float = 1.0
    lambda_dt: float = 0.5
    alpha: float = 0.3
    beta: float = 50.0

    def __post_init__(self):
        vals = (self.lambda_ic, self.lambda_dt, self.alpha, self.beta)
        if not all(np.isfinite(vals)):
            raise ValueError("loss weights must be finite")
        if self.alpha < 0:
            raise ValueError("margin alpha must be >= 0")
        if self.beta <= 0:
            raise ValueError("temperature beta must be > 0")


class ClassifierHead:
    """Batch normalization followed by a bias-free linear layer to identity logits.

    One instance scores original and reconstructed descriptors alike. In
    training mode the batch statistics of the scored descriptors are used;
    otherwise the running estimates.
    """

    def __init__(self, dim: int, num_classes: int, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.num_classes = dim, num_classes
        self.momentum, self.eps = momentum, eps
        bound = 1.0 / np.sqrt(dim)
        self.params: Dict[str, np.ndarray] = {
            "head.bn.scale": np.ones(dim, dtype=dtype),
            "head.bn.shift": np.zeros(dim, dtype=dtype),
            "head.fc.weight": rng.uniform(-bound, bound, size=(dim, num_classes)).astype(dtype),
        }
        self.buffers: Dict[str, np.ndarray] = {
            "head.bn.running_mean": np.zeros(dim, dtype=dtype),
            "head.bn.running_var": np.ones(dim, dtype=dtype),
        }

    def logits(self, desc, params=None, training: bool = True):
        p = self.params if params is None else params
        desc_shape = ops.value(desc).shape
        if len(desc_shape) != 2 or desc_shape[1] != self.dim:
            raise DimensionError(f"head expects (N, {self.dim}) descriptors, got {desc_shape}")
        if training:
            xhat = ops.batch_norm(desc, self.eps)
        else:
            mu = self.buffers["head.bn.running_mean"]
            inv = 1.0 / np.sqrt(self.buffers["head.bn.running_var"] + self.eps)
            xhat = ops.mul(ops.sub(desc, mu), inv.astype(ops.value(desc).dtype))
        y = ops.add(ops.mul(xhat, p["head.bn.scale"]), p["head.bn.shift"])
        return ops.matmul(y, p["head.fc.weight"])

    def update_running_stats(self, desc) -> None:
        v = np.asarray(ops.value(desc))
        n = v.shape[0]
        m = self.momentum
        rm, rv = self.buffers["head.bn.running_mean"], self.buffers["head.bn.running_var"]
        var = v.var(axis=0) * (n / max(n - 1, 1))
        rm[...] = (1 - m) * rm + m * v.mean(axis=0)
        rv[...] = (1 - m) * rv + m * var


# -- image-level terms ----------------------------------------------------------

def classification_loss(desc, labels, head: ClassifierHead, params=None, training: bool = True):
    """Mean cross-entropy of the head's identity prediction."""
    v = ops.value(desc)
    if v.ndim == 1:
        desc = ops.reshape(desc, (1, v.shape[0]))
        labels = [labels]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if labels.size and (labels.min() < 0 or labels.max() >= head.num_classes):
        raise IndexError(f"label out of range for {head.num_classes} identities")
    return ops.cross_entropy(head.logits(desc, params, training), labels)


def pairwise_distances(desc):
    """Euclidean distance matrix of (N, d) descriptors."""
    v = ops.value(desc)
    n, d = v.shape
    diff = ops.sub(ops.reshape(desc, (n, 1, d)), ops.reshape(desc, (1, n, d)))
    return ops.l2norm(diff, axis=-1)


def hardest_indices(dist: np.ndarray, labels_row, labels_col, exclude_self: bool = False):
    """Per row: column of the farthest same-label and nearest other-label entry."""
    labels_row = np.asarray(labels_row)
    labels_col = np.asarray(labels_col)
    same = labels_row[:, None] == labels_col[None, :]
    if exclude_self:
        same &= ~np.eye(len(labels_row), len(labels_col), dtype=bool)
    if not (~same).any(axis=1).all():
        raise ConfigurationError("batch-hard mining needs a negative for every anchor")
    if not same.any(axis=1).all():
        raise ConfigurationError("batch-hard mining needs a positive for every anchor")
    pos_d = np.where(same, dist, -np.inf)
    neg_d = np.where(same, np.inf, dist)
    pos, neg = pos_d.argmax(axis=1), neg_d.argmin(axis=1)
    if dist.shape[1] > 1:
        top = -np.sort(-pos_d, axis=1)
        low = np.sort(neg_d, axis=1)
        gaps = np.concatenate([top[:, 0] - top[:, 1], low[:, 1] - low[:, 0]])
        ops.note_kink(gaps[np.isfinite(gaps)])
    return pos, neg


def batch_hard_triplet(desc, labels, margin: float):
    """Mean over anchors of [max_pos d - min_neg d + margin]_+.

    The anchor counts as its own positive (distance 0), so anchors whose
    identity appears once still contribute through their nearest negative.
    """
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ConfigurationError("batch-hard triplet loss needs at least two identities in the batch")
    dist = pairwise_distances(desc)
    n = labels.size
    pos, neg = hardest_indices(ops.value(dist), labels, labels)
    flat = ops.reshape(dist, (n * n,))
    rows = np.arange(n)
    d_pos = ops.gather(flat, rows * n + pos)
    d_neg = ops.gather(flat, rows * n + neg)
    return ops.mean(ops.hinge(ops.add(ops.sub(d_pos, d_neg), margin)))


def id_loss(desc, labels, head: ClassifierHead, margin: float, params=None, training: bool = True):
    """Classification plus batch-hard triplet over a mixed-modality batch."""
    return ops.add(classification_loss(desc, labels, head, params, training),
                   batch_hard_triplet(desc, labels, margin))


def id_consistency_loss(recon_desc, labels, head: ClassifierHead, source_labels=None,
                        params=None, training: bool = True):
    """Cross-entropy of reconstructed descriptors against the shared identity."""
    if source_labels is not None and np.any(np.asarray(source_labels) != np.asarray(labels)):
        raise PairingError("reconstruction source and target identities differ")
    return classification_loss(recon_desc, labels, head, params, training)


# -- dense terms -------------------------------------------------------------------

def local_distance(f_anchor, f_recon):
    if ops.value(f_anchor).shape != ops.value(f_recon).shape:
        raise DimensionError("local_distance: feature maps differ in shape")
    return ops.l2norm(ops.sub(f_anchor, f_recon), axis=-1)


def dense_triplet_loss(d_pos, d_neg, attention, alpha: float, normalize: bool = False):
    """Sum over positions (and any batch axes) of A * [d+ - d- + alpha]_+.

    ``normalize`` divides each map's sum by the sum of its attention.
    """
    shapes = {ops.value(x).shape for x in (d_pos, d_neg, attention)}
    if len(shapes) != 1:
        raise DimensionError(f"dense_triplet_loss: shape mismatch {sorted(shapes)}")
    weighted = ops.mul(attention, ops.hinge(ops.add(ops.sub(d_pos, d_neg), alpha)))
    if not normalize:
        return ops.sum(weighted)
    a = ops.value(attention)
    mass = a.sum(axis=(-2, -1))
    mass = np.where(mass > 0, mass, 1).astype(a.dtype)
    return ops.sum(ops.mul(ops.sum(weighted, axis=(-2, -1)), 1.0 / mass))


def total_loss(l_id, l_ic, l_dt, weights: LossWeights):
    return ops.add(ops.add(l_id, ops.mul(l_ic, weights.lambda_ic)), ops.mul(l_dt, weights.lambda_dt))


# -- assembly ------------------------------------------------------------------------

def mine_cross_modal(desc_a, desc_b, labels_a, labels_b):
    """Hardest cross-modal positive / negative for every anchor in both halves.

    Returns ``(pos_a, neg_a, pos_b, neg_b)``: indices into the other half.
    """
    a = np.asarray(ops.value(desc_a), dtype=np.float64)
    b = np.asarray(ops.value(desc_b), dtype=np.float64)
    dist = np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), 0))
    pos_a, neg_a = hardest_indices(dist, labels_a, labels_b)
    pos_b, neg_b = hardest_indices(dist.T, labels_b, labels_a)
    return pos_a, neg_a, pos_b, neg_b


@dataclass
class AlignOptions:
    co_attention: bool = True
    normalize_dt: bool = False
    mask_stop_gradient: bool = False
    gem_p: float = DEFAULT_GEM_P


def directional_terms(f_anchor, f_other, pos, neg, weights: LossWeights, opts: AlignOptions):
    """Reconstructions of the anchors from their positives and the dense triplet sum.

    Returns ``(recon_pos, dt_sum)``. The co-attention weight is a constant.
    """
    f_pos = ops.gather(f_other, pos)
    f_neg = ops.gather(f_other, neg)
    mask_anchor = person_mask(f_anchor)
    mask_pos = person_mask(f_pos)
    if opts.mask_stop_gradient:
        mask_anchor = ops.stop_gradient(mask_anchor)
    P_pos = matching_probability(cosine_similarity(f_anchor, f_pos), weights.beta)
    P_neg = matching_probability(cosine_similarity(f_anchor, f_neg), weights.beta)
    recon_pos = align(f_anchor, f_pos, mask_anchor, P_pos)
    recon_neg = align(f_anchor, f_neg, mask_anchor, P_neg)
    if opts.co_attention:
        att = ops.stop_gradient(co_attention(ops.value(mask_anchor), ops.value(mask_pos), ops.value(P_pos)))
    else:
        att = np.ones(ops.value(mask_anchor).shape, dtype=ops.value(mask_anchor).dtype)
    dt = dense_triplet_loss(local_distance(f_anchor, recon_pos), local_distance(f_anchor, recon_neg),
                            att, weights.alpha, opts.normalize_dt)
    return recon_pos, dt


def objective(feats_a: Dict[int, object], feats_b: Dict[int, object], labels_a, labels_b,
              head: ClassifierHead, weights: LossWeights, opts: Optional[AlignOptions] = None,
              head_params=None, final_layer: Optional[int] = None,
              lift: Optional[Callable[[int, object], object]] = None,
              layers: Optional[Sequence[int]] = None, training: bool = True):
    """Full objective on one cross-modal batch.

    ``feats_a`` / ``feats_b`` map a layer id to the batch feature maps of each
    modality half. Descriptors come from ``final_layer`` (default: the
    deepest). ``lift(layer, fmap)`` carries a reconstruction from an earlier
    layer to the final one so the same head can score it. Returns a dict with
    the terms ``L_ID``, ``L_IC``, ``L_DT``, ``L_total`` and the descriptors.
    """
    opts = opts or AlignOptions()
    final_layer = max(feats_a) if final_layer is None else final_layer
    layers = list(layers) if layers is not None else sorted(feats_a)
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    desc_a = gem_pool(feats_a[final_layer], opts.gem_p)
    desc_b = gem_pool(feats_b[final_layer], opts.gem_p)
    desc = ops.concat([desc_a, desc_b], axis=0)
    labels = np.concatenate([labels_a, labels_b])
    l_id = id_loss(desc, labels, head, weights.alpha, head_params, training)

    zero = np.zeros((), dtype=ops.value(desc).dtype)
    l_ic, l_dt = zero, zero
    if weights.lambda_ic != 0 or weights.lambda_dt != 0:
        pos_a, neg_a, pos_b, neg_b = mine_cross_modal(desc_a, desc_b, labels_a, labels_b)
        n_anchor = labels_a.size + labels_b.size
        for layer in layers:
            recon_a, dt_a = directional_terms(feats_a[layer], feats_b[layer], pos_a, neg_a, weights, opts)
            recon_b, dt_b = directional_terms(feats_b[layer], feats_a[layer], pos_b, neg_b, weights, opts)
            if layer != final_layer:
                recon_a, recon_b = lift(layer, recon_a), lift(layer, recon_b)
            rdesc = ops.concat([gem_pool(recon_a, opts.gem_p), gem_pool(recon_b, opts.gem_p)], axis=0)
            src = np.concatenate([labels_b[pos_a], labels_a[pos_b]])
            l_ic = ops.add(l_ic, id_consistency_loss(rdesc, labels, head, src, head_params, training))
            # both directions of one anchor pair form one triplet instance
            l_dt = ops.add(l_dt, ops.mul(ops.add(dt_a, dt_b), 2.0 / n_anchor))
    total = total_loss(l_id, l_ic, l_dt, weights)
    return {"L_ID": l_id, "L_IC": l_ic, "L_DT": l_dt, "L_total": total, "desc": desc}
