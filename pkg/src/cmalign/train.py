"""Batch sampling, learning-rate schedule, SGD step and the training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import cmft
from .autograd import Tape, backward, ops
from .config import Config
from .data import Dataset, DatasetError
from .losses import AlignOptions, ClassifierHead, LossWeights, objective
from .model import ExtractorShape, TwoStreamExtractor

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, term: str, epoch: int = -1, step: int = -1):
        super().__init__(f"non-finite {term} at epoch {epoch}, step {step}")
        self.term, self.epoch, self.step = term, epoch, step


@dataclass
class TrainConfig:
    identities_per_modality: int = 8
    images_per_identity: int = 4
    epochs: int = 80
    steps_per_epoch: int = 0  # 0: one pass over the images of a modality
    base_lr_backbone: float = 1e-2
    base_lr_head: float = 1e-1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 10
    decay_epochs: Tuple[int, ...] = (20, 50)
    decay_factor: float = 10.0
    weights: LossWeights = field(default_factory=LossWeights)
    align: AlignOptions = field(default_factory=AlignOptions)
    cmalign_layers: Tuple[int, ...] = (4, 5)
    model: ExtractorShape = field(default_factory=ExtractorShape)
    seed: int = 0
    checkpoint_every: int = 1

    def __post_init__(self):
        self.decay_epochs = tuple(self.decay_epochs)
        self.cmalign_layers = tuple(sorted(set(self.cmalign_layers)))
        if min(self.identities_per_modality, self.images_per_identity) < 1:
            raise ValueError("batch counts must be positive")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.steps_per_epoch < 0:
            raise ValueError("epoch counts must be non-negative")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ValueError("decay_epochs must be sorted ascending")
        if not self.cmalign_layers or not set(self.cmalign_layers) <= {4, 5}:
            raise ValueError("cmalign_layers must be a non-empty subset of {4, 5}")
        if self.decay_factor <= 0:
            raise ValueError("decay_factor must be positive")

    @property
    def batch_size(self) -> int:
        return 2 * self.identities_per_modality * self.images_per_identity

    @classmethod
    def from_config(cls, cfg: Config) -> "TrainConfig":
        t, loss, m, d = cfg.section("train"), cfg.section("loss"), cfg.section("model"), cfg.section("data")
        return cls(
            identities_per_modality=t["identities_per_modality"],
            images_per_identity=t["images_per_identity"],
            epochs=t["epochs"],
            steps_per_epoch=t["steps_per_epoch"],
            base_lr_backbone=t["base_lr_backbone"],
            base_lr_head=t["base_lr_head"],
            momentum=t["momentum"],
            weight_decay=t["weight_decay"],
            warmup_epochs=t["warmup_epochs"],
            decay_epochs=tuple(t["decay_epochs"]),
            decay_factor=t["decay_factor"],
            weights=LossWeights(loss["lambda_ic"], loss["lambda_dt"], loss["alpha"], loss["beta"]),
            align=AlignOptions(loss["co_attention"], loss["normalize_dt"], loss["mask_stop_gradient"],
                               loss["gem_p"]),
            cmalign_layers=tuple(t["cmalign_layers"]),
            model=ExtractorShape(d["height"], d["width"], 3, m["c_shallow"], m["c_layer4"], m["c_layer5"]),
            seed=t["seed"],
            checkpoint_every=t["checkpoint_every"],
        )


def lr_schedule(epoch: int, config: TrainConfig) -> Tuple[float, float]:
    """(backbone lr, head lr): linear warmup, then step decay at each listed epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    decays = sum(1 for threshold in config.decay_epochs if epoch >= threshold)
    divisor = config.decay_factor ** decays

    def rate(base):
        if epoch < config.warmup_epochs:
            base = base * (epoch + 1) / config.warmup_epochs
        return base / divisor

    return rate(config.base_lr_backbone), rate(config.base_lr_head)


# -- sampling -------------------------------------------------------------------------

@dataclass
class Batch:
    images_a: np.ndarray
    images_b: np.ndarray
    labels_a: np.ndarray
    labels_b: np.ndarray

    @property
    def size(self) -> int:
        return len(self.labels_a) + len(self.labels_b)


class IdentitySampler:
    """Identity-balanced cross-modal batches.

    Identities and, per identity and modality, images are drawn from shuffled
    pools that are refilled only once exhausted, so nothing repeats within an
    epoch unless the pools are too small.
    """

    def __init__(self, dataset: Dataset, config: TrainConfig, rng: np.random.Generator):
        self.dataset, self.config, self.rng = dataset, config, rng
        P, K = config.identities_per_modality, config.images_per_identity
        if len(dataset.identities) < P:
            raise DatasetError(f"need {P} identities per batch, dataset has {len(dataset.identities)}")
        self.pools: Dict[Tuple[str, str], list] = {}
        self.entries = {}
        for ident in dataset.identities:
            for modality in ("A", "B"):
                items = dataset.select(modality, ident)
                if len(items) < K:
                    raise DatasetError(
                        f"identity {ident}: {len(items)} image(s) in modality {modality}, need {K}")
                self.entries[modality, ident] = items
        self.id_pool: list = []

    def _draw(self, pool: list, population: Sequence, n: int) -> list:
        out = []
        while len(out) < n:
            if not pool:
                pool.extend(self.rng.permutation(len(population)).tolist())
            pick = pool.pop(0)
            if pick in out and len(population) >= n:
                pool.append(pick)
                continue
            out.append(pick)
        return out

    def next_batch(self) -> Batch:
        P, K = self.config.identities_per_modality, self.config.images_per_identity
        ids = [self.dataset.identities[i] for i in self._draw(self.id_pool, self.dataset.identities, P)]
        halves = {}
        for modality in ("A", "B"):
            chosen, labels = [], []
            for ident in ids:
                items = self.entries[modality, ident]
                pool = self.pools.setdefault((modality, ident), [])
                for j in self._draw(pool, items, K):
                    chosen.append(items[j])
                    labels.append(self.dataset.label_of(ident))
            halves[modality] = (self.dataset.stack(chosen), np.array(labels, dtype=np.intp))
        return Batch(halves["A"][0], halves["B"][0], halves["A"][1], halves["B"][1])


def sample_batch(dataset: Dataset, config: TrainConfig, rng: np.random.Generator) -> Batch:
    return IdentitySampler(dataset, config, rng).next_batch()


def steps_per_epoch(dataset: Dataset, config: TrainConfig) -> int:
    if config.steps_per_epoch:
        return config.steps_per_epoch
    per_modality = len(dataset.select("A"))
    return max(1, per_modality // (config.identities_per_modality * config.images_per_identity))


# -- model state ----------------------------------------------------------------------

class Model:
    """Extractor, classifier head and optimizer state."""

    def __init__(self, num_classes: int, config: TrainConfig):
        rng = np.random.default_rng(config.seed)
        self.extractor = TwoStreamExtractor(config.model, rng)
        self.head = ClassifierHead(config.model.c_layer5, num_classes, rng)
        self.velocity = {k: np.zeros_like(v) for k, v in self.parameters().items()}

    def parameters(self) -> Dict[str, np.ndarray]:
        return {**self.extractor.params, **self.head.params}

    def state(self) -> Dict[str, np.ndarray]:
        return {**self.parameters(), **self.head.buffers}


def batch_objective(model: Model, batch: Batch, config: TrainConfig, params=None):
    ext, head = model.extractor, model.head
    fa = ext.forward(batch.images_a, "A", params)
    fb = ext.forward(batch.images_b, "B", params)
    return objective(
        fa, fb, batch.labels_a, batch.labels_b, head, config.weights, config.align,
        head_params=params, final_layer=5, lift=lambda layer, f: ext.layer5(f, params),
        layers=config.cmalign_layers)


def train_step(model: Model, batch: Batch, config: TrainConfig, lr: Tuple[float, float],
               tape: Optional[Tape] = None) -> Dict[str, float]:
    """One momentum-SGD update of every parameter on ``batch``."""
    tape = tape or Tape()
    params = {name: tape.leaf(value, name) for name, value in model.parameters().items()}
    terms = batch_objective(model, batch, config, params)
    record = {}
    for key in ("L_ID", "L_IC", "L_DT", "L_total"):
        val = float(np.asarray(ops.value(terms[key])))
        if not np.isfinite(val):
            raise NonFiniteLossError(key)
        record[key] = val
    grads = backward(tape, terms["L_total"])
    lr_backbone, lr_head = lr
    gnorm_backbone = gnorm_head = 0.0
    for name, p in model.parameters().items():
        g = grads[name]
        is_head = name.startswith("head.")
        sq = float(np.sum(g.astype(np.float64) ** 2))
        if is_head:
            gnorm_head += sq
        else:
            gnorm_backbone += sq
        buf = model.velocity[name]
        buf *= config.momentum
        buf += g + config.weight_decay * p
        p -= (lr_head if is_head else lr_backbone) * buf
    model.head.update_running_stats(ops.value(terms["desc"]))
    record["grad_norm_backbone"] = float(np.sqrt(gnorm_backbone))
    record["grad_norm_head"] = float(np.sqrt(gnorm_head))
    return record


def evaluate_objective(model: Model, batch: Batch, config: TrainConfig) -> Dict[str, float]:
    terms = batch_objective(model, batch, config)
    return {k: float(np.asarray(ops.value(terms[k]))) for k in ("L_ID", "L_IC", "L_DT", "L_total")}


# -- checkpoints ------------------------------------------------------------------------

CHECKPOINT_MANIFEST = "manifest.txt"


def save_checkpoint(path, model: Model) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.state()
    s = model.extractor.shape
    state["meta.input_shape"] = np.array([s.height, s.width, s.channels], dtype=np.float32)
    lines = []
    for name in sorted(state):
        fname = f"{name}.cmft"
        cmft.save(path / fname, state[name])
        lines.append(f"{name}\t{fname}\t{','.join(str(n) for n in state[name].shape)}\n")
    with open(path / CHECKPOINT_MANIFEST, "w") as fh:
        fh.writelines(lines)


def load_checkpoint(path) -> Model:
    path = Path(path)
    manifest = path / CHECKPOINT_MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest}: checkpoint manifest not found")
    state = {}
    with open(manifest) as fh:
        for line in fh:
            if not line.strip():
                continue
            name, fname, shape = line.rstrip("\n").split("\t")
            arr = cmft.load(path / fname)
            expect = tuple(int(n) for n in shape.split(",") if n)
            if arr.shape != expect:
                raise ValueError(f"{path / fname}: shape {arr.shape} differs from manifest {expect}")
            state[name] = arr
    try:
        h, w, c = (int(x) for x in state.pop("meta.input_shape"))
        wa = state["stem.A.weight"]
        shape = ExtractorShape(h, w, c, wa.shape[1], state["layer4.weight"].shape[1],
                               state["layer5.weight"].shape[1])
        num_classes = state["head.fc.weight"].shape[1]
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint lacks {exc.args[0]}") from exc
    model = Model(num_classes, TrainConfig(model=shape, epochs=0))
    for store in (model.extractor.params, model.head.params, model.head.buffers):
        for name in store:
            if name not in state:
                raise ValueError(f"{path}: checkpoint lacks {name}")
            if state[name].shape != store[name].shape:
                raise ValueError(f"{path}: {name} has shape {state[name].shape}, expected {store[name].shape}")
            store[name] = state[name].copy()
    model.velocity = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    return model


# -- loop -------------------------------------------------------------------------------

def fit(dataset: Dataset, config: TrainConfig, out_dir=None) -> Tuple[Model, List[dict]]:
    """Train from scratch; returns the model and the per-step log records.

    With ``out_dir``, writes ``train.jsonl`` and ``checkpoints/epoch-XXXX``
    every ``checkpoint_every`` epochs plus ``checkpoint`` for the final state.
    """
    model = Model(len(dataset.identities), config)
    if config.epochs:
        sampler = IdentitySampler(dataset, config, np.random.default_rng([config.seed, 1]))
        n_steps = steps_per_epoch(dataset, config)
    records: List[dict] = []
    logf = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        logf = open(out_dir / "train.jsonl", "w")
    try:
        step = 0
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config)
            for _ in range(n_steps):
                batch = sampler.next_batch()
                try:
                    rec = train_step(model, batch, config, lr)
                except NonFiniteLossError as exc:
                    raise NonFiniteLossError(exc.term, epoch, step) from None
                entry = {"epoch": epoch, "step": step, "L_ID": rec["L_ID"], "L_IC": rec["L_IC"],
                         "L_DT": rec["L_DT"], "L_total": rec["L_total"],
                         "lr_backbone": lr[0], "lr_head": lr[1]}
                records.append(entry)
                if logf is not None:
                    logf.write(json.dumps(entry) + "\n")
                step += 1
            log.info("epoch %d: L_total %.4f", epoch, records[-1]["L_total"])
            if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(out_dir / "checkpoints" / f"epoch-{epoch + 1:04d}", model)
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint", model)
    finally:
        if logf is not None:
            logf.close()
    return model, records
