"""Spatial feature fields, person masks and pooling.

Conventions: a feature map is an array of shape ``(..., h, w, d)``, a spatial
map ``(..., h, w)`` and a descriptor ``(..., d)``. Leading axes are batch axes.
All functions accept ndarrays or tape variables.
"""
from __future__ import annotations

import numpy as np

from .autograd import ops

DEFAULT_GEM_P = 3.0


class DimensionError(ValueError):
    """Incompatible tensor shapes."""


def check_feature_map(f) -> None:
    v = ops.value(f)
    if v.ndim < 3 or min(v.shape[-3:]) < 1:
        raise DimensionError(f"feature map must be (..., h, w, d) with positive sizes, got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("feature map has non-finite values")


def activation_map(f):
    """Per-position L2 norm of the feature vectors."""
    return ops.l2norm(f, axis=-1)


def minmax_normalize(g):
    """Rescale each map to [0, 1]; nearly constant maps are clamped to [0, 1] instead."""
    return ops.minmax_normalize(g)


def person_mask(f):
    return minmax_normalize(activation_map(f))


def gem_pool(f, p_gem: float = DEFAULT_GEM_P):
    """Generalized-mean pooling over positions; activations are floored at 1e-6."""
    if p_gem < 1:
        raise ValueError(f"GeM power must be >= 1, got {p_gem}")
    return ops.gem(f, p_gem)
