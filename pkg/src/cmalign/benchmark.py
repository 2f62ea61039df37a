"""Desk-scale ablation: full objective against ID-only and co-attention-off training.

Each seed gets its own synthetic train split (64 identities) and a disjoint
held-out split (16 identities); every variant trains from the same
initialization and batch sequence on that seed.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .data import SyntheticConfig, generate_synthetic_dataset, load_directory_dataset
from .evaluate import cross_modal_eval
from .losses import AlignOptions, LossWeights
from .train import TrainConfig, fit

log = logging.getLogger(__name__)

TRAIN_IDENTITIES = 64
TEST_IDENTITIES = 16
IMAGES_PER_IDENTITY = 8
EPOCHS = 30


def benchmark_config(seed: int, epochs: int = EPOCHS) -> TrainConfig:
    """Shared settings of every variant; dense triplet sums are averaged over positions."""
    return TrainConfig(epochs=epochs, seed=seed, align=AlignOptions(normalize_dt=True), checkpoint_every=0)


VARIANTS = {
    "full": lambda c: c,
    "id_only": lambda c: replace(c, weights=LossWeights(lambda_ic=0.0, lambda_dt=0.0)),
    "no_coattention": lambda c: replace(c, align=replace(c.align, co_attention=False)),
}


@dataclass
class AblationResult:
    # variant -> per-seed mAP (mean of the B->A and A->B directions)
    mAP: Dict[str, List[float]] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, variant: str) -> float:
        return float(np.mean(self.mAP[variant]))


def make_splits(root, seed: int):
    root = Path(root)
    common = dict(images_per_identity=IMAGES_PER_IDENTITY)
    train_cfg = SyntheticConfig(n_identities=TRAIN_IDENTITIES, seed=1000 + seed, **common)
    test_cfg = SyntheticConfig(n_identities=TEST_IDENTITIES, seed=2000 + seed,
                               identity_offset=TRAIN_IDENTITIES, **common)
    generate_synthetic_dataset(root / f"train{seed}", train_cfg, overwrite=True)
    generate_synthetic_dataset(root / f"test{seed}", test_cfg, overwrite=True)
    return load_directory_dataset(root / f"train{seed}"), load_directory_dataset(root / f"test{seed}")


def run_ablation(root, seeds: Sequence[int] = (0, 1, 2), variants: Sequence[str] = tuple(VARIANTS),
                 epochs: int = EPOCHS, trials: int = 10) -> AblationResult:
    start = time.perf_counter()
    result = AblationResult({v: [] for v in variants})
    for seed in seeds:
        train, test = make_splits(root, seed)
        for name in variants:
            model, _ = fit(train, VARIANTS[name](benchmark_config(seed, epochs)))
            both = [cross_modal_eval(model.extractor, test, q, trials=trials).mAP for q in ("B", "A")]
            result.mAP[name].append(float(np.mean(both)))
            log.info("seed %d %s: mAP %.4f", seed, name, result.mAP[name][-1])
    result.seconds = time.perf_counter() - start
    return result
