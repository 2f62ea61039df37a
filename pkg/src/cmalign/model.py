"""Toy two-stream feature extractor.

Each modality has its own shallow stage; the deeper stages exist once and are
reached from both streams. Convolutions are patch extraction followed by a
shared linear map, so they run on the tape like every other primitive.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .autograd import ops
from .tensor_field import DimensionError

MODALITIES = ("A", "B")


@dataclass(frozen=True)
class ConvSpec:
    name: str
    c_in: int
    c_out: int
    k: int = 3
    stride: int = 1
    pad: int = 1


@dataclass(frozen=True)
class ExtractorShape:
    height: int = 36
    width: int = 18
    channels: int = 3
    c_shallow: int = 16
    c_layer4: int = 32
    c_layer5: int = 64

    def out_hw(self):
        h = (self.height + 1) // 2
        w = (self.width + 1) // 2
        return (h + 1) // 2, (w + 1) // 2


def conv(x, weight, bias, spec: ConvSpec):
    cols = ops.unfold(x, spec.k, spec.stride, spec.pad)
    return ops.add(ops.matmul(cols, weight), bias)


class TwoStreamExtractor:
    """Modality-specific stem, shared layer-4 and layer-5 stages.

    ``forward`` returns ``{4: f4, 5: f5}`` with shapes (B, 9, 5, 32) and
    (B, 9, 5, 64) for the default 36 x 18 input.
    """

    def __init__(self, shape: ExtractorShape = ExtractorShape(), rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        self.shape = shape
        self.dtype = dtype
        rng = rng if rng is not None else np.random.default_rng(0)
        self.specs = {
            "stem.A": ConvSpec("stem.A", shape.channels, shape.c_shallow, stride=2),
            "stem.B": ConvSpec("stem.B", shape.channels, shape.c_shallow, stride=2),
            "layer4": ConvSpec("layer4", shape.c_shallow, shape.c_layer4, stride=2),
            "layer5": ConvSpec("layer5", shape.c_layer4, shape.c_layer5, stride=1),
        }
        self.params: Dict[str, np.ndarray] = {}
        for name, spec in self.specs.items():
            fan_in = spec.k * spec.k * spec.c_in
            bound = np.sqrt(6.0 / fan_in)
            self.params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fan_in, spec.c_out)).astype(dtype)
            self.params[f"{name}.bias"] = np.zeros(spec.c_out, dtype=dtype)

    @property
    def feature_dims(self) -> Dict[int, int]:
        return {4: self.shape.c_layer4, 5: self.shape.c_layer5}

    def _stage(self, name, x, params):
        p = self.params if params is None else params
        return ops.relu(conv(x, p[f"{name}.weight"], p[f"{name}.bias"], self.specs[name]))

    def stem(self, images, modality: str, params=None):
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
        v = ops.value(images)
        s = self.shape
        if v.ndim != 4 or v.shape[1:] != (s.height, s.width, s.channels):
            raise DimensionError(
                f"images must be (B, {s.height}, {s.width}, {s.channels}), got {v.shape}")
        return self._stage(f"stem.{modality}", images, params)

    def layer4(self, x, params=None):
        return self._stage("layer4", x, params)

    def layer5(self, x, params=None):
        return self._stage("layer5", x, params)

    def forward(self, images, modality: str, params=None) -> Dict[int, object]:
        f4 = self.layer4(self.stem(images, modality, params), params)
        return {4: f4, 5: self.layer5(f4, params)}

    def parameter_names(self) -> List[str]:
        return list(self.params)


def forward(extractor: TwoStreamExtractor, images, modality: str, params=None) -> List[object]:
    """Feature maps at the layer-4 and layer-5 analogues, in that order."""
    out = extractor.forward(images, modality, params)
    return [out[4], out[5]]
