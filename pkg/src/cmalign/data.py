"""Synthetic paired two-modality person images and the on-disk dataset format.

Layout::

    root/manifest.txt                  modality<TAB>identity<TAB>path<TAB>h<TAB>w<TAB>c
    root/<modality>/<identity>/<index>.cmft

Modality ``A`` is a full-colour rendering; modality ``B`` collapses the same
pixels to one intensity channel (replicated to keep the input shape) and
remaps its contrast.
"""
from __future__ import annotations

import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import cmft
from .model import MODALITIES

MANIFEST = "manifest.txt"
COLLAPSE_WEIGHTS = np.array([0.55, 0.15, 0.30])


class DatasetError(Exception):
    pass


@dataclass
class SyntheticConfig:
    n_identities: int = 80
    images_per_identity: int = 8
    height: int = 36
    width: int = 18
    seed: int = 0
    max_shift: float = 3.0
    scale_jitter: float = 0.15
    occlusion: float = 0.5
    occlusion_prob: float = 0.5
    clutter: float = 0.6
    noise: float = 0.03
    identity_offset: int = 0

    def __post_init__(self):
        if self.n_identities < 1 or self.images_per_identity < 1:
            raise ValueError("identity and image counts must be >= 1")
        if self.height < 8 or self.width < 4:
            raise ValueError("images must be at least 8 x 4")


@dataclass
class IdentitySpec:
    identity: int
    colors: np.ndarray          # (3 parts, 3 channels): head, torso, legs
    pattern: int                # 0 plain, 1 horizontal stripes, 2 vertical stripes, 3 checker
    period: float
    pattern_contrast: float
    build: float                # body width factor
    waist: float                # torso/legs split, fraction of body height
    bag: int                    # -1 none, 0 left, 1 right


@dataclass
class Nuisance:
    shift: Tuple[float, float]
    scale: float
    occlusion: Optional[Tuple[int, int, int, int]]  # top, left, bottom, right (exclusive)
    background_seed: int
    illumination: float = 1.0


def identity_spec(rng: np.random.Generator, identity: int) -> IdentitySpec:
    return IdentitySpec(
        identity=identity,
        colors=rng.uniform(0.05, 0.95, size=(3, 3)),
        pattern=int(rng.integers(0, 4)),
        period=float(rng.uniform(2.5, 5.0)),
        pattern_contrast=float(rng.uniform(0.25, 0.6)),
        build=float(rng.uniform(0.8, 1.2)),
        waist=float(rng.uniform(0.45, 0.6)),
        bag=int(rng.integers(-1, 2)),
    )


def sample_nuisance(rng: np.random.Generator, cfg: SyntheticConfig) -> Nuisance:
    s = cfg.max_shift
    shift = (float(rng.uniform(-s, s)), float(rng.uniform(-s / 2, s / 2)))
    scale = float(1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))
    occ = None
    if cfg.occlusion > 0 and rng.random() < cfg.occlusion_prob:
        # a horizontal band over part of the lower body; bounded so >= 40% stays visible
        frac = float(rng.uniform(0.2, 1.0)) * min(cfg.occlusion, 0.6)
        rows = max(1, int(round(frac * cfg.height)))
        bottom = cfg.height - int(rng.integers(0, max(1, cfg.height // 6)))
        top = max(0, bottom - rows)
        width = int(rng.integers(cfg.width // 2, cfg.width + 1))
        left = int(rng.integers(0, cfg.width - width + 1))
        occ = (top, left, bottom, left + width)
    return Nuisance(shift=shift, scale=scale, occlusion=occ,
                    background_seed=int(rng.integers(0, 2**31 - 1)),
                    illumination=float(rng.uniform(0.8, 1.2)))


def _background(seed: int, h: int, w: int, clutter: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 0.8, size=3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.broadcast_to(base, (h, w, 3)).copy()
    for _ in range(4):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(2.0, 6.0)
        color = rng.uniform(0, 1, size=3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))[..., None]
        img = img * (1 - clutter * blob) + clutter * blob * color
    return img


def render(spec: IdentitySpec, nuis: Nuisance, cfg: SyntheticConfig) -> np.ndarray:
    """Full-colour (h, w, 3) rendering in [0, 1] before any modality transform."""
    h, w = cfg.height, cfg.width
    img = _background(nuis.background_seed, h, w, cfg.clutter)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # body coordinates: v in [0, 1] from head top to feet, u centred on the body axis
    body_h = 0.9 * h * nuis.scale
    top = (h - body_h) / 2 + nuis.shift[0]
    cx = (w - 1) / 2 + nuis.shift[1]
    v = (yy - top) / body_h
    u = (xx - cx) / (0.5 * w * nuis.scale * spec.build)

    head = ((v - 0.08) / 0.08) ** 2 + (u / 0.28) ** 2 <= 1
    torso = (v > 0.16) & (v <= spec.waist) & (np.abs(u) <= 0.62)
    legs = (v > spec.waist) & (v <= 1.0) & (np.abs(u) <= 0.5) & (np.abs(u) >= 0.06)
    parts = [head, torso, legs]

    if spec.pattern == 1:
        pat = np.sin(2 * np.pi * v * body_h / spec.period)
    elif spec.pattern == 2:
        pat = np.sin(2 * np.pi * u * 0.5 * w / spec.period)
    elif spec.pattern == 3:
        pat = np.sign(np.sin(2 * np.pi * v * body_h / spec.period)) * np.sign(
            np.sin(2 * np.pi * u * 0.5 * w / spec.period))
    else:
        pat = np.zeros_like(v)

    for k, mask in enumerate(parts):
        color = np.broadcast_to(spec.colors[k], (h, w, 3))
        if k == 1:
            color = np.clip(color + spec.pattern_contrast * pat[..., None] * 0.5, 0, 1)
        img = np.where(mask[..., None], color, img)
    if spec.bag >= 0:
        side = 1 if spec.bag else -1
        bag = (v > 0.35) & (v < 0.55) & (np.abs(u - side * 0.72) < 0.16)
        img = np.where(bag[..., None], 1.0 - spec.colors[1], img)

    img = np.clip(img * nuis.illumination, 0, 1)
    if nuis.occlusion is not None:
        t, l, b, r = nuis.occlusion
        occ_color = np.random.default_rng(nuis.background_seed + 1).uniform(0, 1, size=3)
        img[t:b, l:r] = occ_color
    return img


def modality_transform(rgb: np.ndarray, modality: str) -> np.ndarray:
    """Map a pre-transform rendering to the given modality."""
    if modality == "A":
        return rgb
    if modality == "B":
        gray = np.tensordot(rgb, COLLAPSE_WEIGHTS, axes=([-1], [0]))
        remapped = 1.0 - np.sqrt(np.clip(gray, 0, 1))
        return np.repeat(remapped[..., None], rgb.shape[-1], axis=-1)
    raise ValueError(f"unknown modality {modality!r}")


def generate_images(cfg: SyntheticConfig):
    """Yield ``(identity, index, rgb, nuisance)`` deterministically from ``cfg.seed``."""
    root = np.random.default_rng(cfg.seed)
    id_seeds = root.integers(0, 2**31 - 1, size=cfg.n_identities)
    for i, s in enumerate(id_seeds):
        rng = np.random.default_rng(int(s))
        spec = identity_spec(rng, cfg.identity_offset + i)
        for k in range(cfg.images_per_identity):
            nuis = sample_nuisance(rng, cfg)
            yield spec.identity, k, render(spec, nuis, cfg), nuis


def _add_noise(img: np.ndarray, seed: int, modality: str, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    rng = np.random.default_rng([seed, MODALITIES.index(modality)])
    # modality B keeps its channels identical
    shape = img.shape if modality == "A" else img.shape[:-1] + (1,)
    return np.clip(img + rng.normal(0, sigma, size=shape), 0, 1)


def generate_synthetic_dataset(root, cfg: SyntheticConfig, overwrite: bool = False) -> Dict[str, int]:
    """Render the dataset under ``root`` and write its manifest."""
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise DatasetError(f"{root} is not empty; pass overwrite to replace it")
        for name in (MANIFEST, *MODALITIES):
            target = root / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for identity, k, rgb, nuis in generate_images(cfg):
        for modality in MODALITIES:
            img = _add_noise(modality_transform(rgb, modality), nuis.background_seed, modality, cfg.noise)
            rel = f"{modality}/{identity:04d}/{k:04d}.cmft"
            (root / rel).parent.mkdir(parents=True, exist_ok=True)
            cmft.save(root / rel, img)
            h, w, c = img.shape
            lines.append(f"{modality}\t{identity:04d}\t{rel}\t{h}\t{w}\t{c}\n")
    lines.sort()
    with open(root / MANIFEST, "w") as fh:
        fh.writelines(lines)
    return {"images": len(lines), "identities": cfg.n_identities,
            "images_per_identity": cfg.images_per_identity, "modalities": len(MODALITIES)}


@dataclass
class Entry:
    modality: str
    identity: str
    path: Path
    shape: Tuple[int, int, int]


@dataclass
class Dataset:
    root: Path
    entries: List[Entry]
    identities: List[str] = field(default_factory=list)
    _cache: Dict[Path, np.ndarray] = field(default_factory=dict, repr=False)

    def label_of(self, identity: str) -> int:
        return self.identities.index(identity)

    def select(self, modality: str, identity: Optional[str] = None) -> List[Entry]:
        return [e for e in self.entries
                if e.modality == modality and (identity is None or e.identity == identity)]

    def image(self, entry: Entry) -> np.ndarray:
        arr = self._cache.get(entry.path)
        if arr is None:
            arr = cmft.load(entry.path)
            if arr.shape != entry.shape:
                raise DatasetError(f"{entry.path}: shape {arr.shape} differs from manifest {entry.shape}")
            self._cache[entry.path] = arr
        return arr

    def stack(self, entries: List[Entry]) -> np.ndarray:
        return np.stack([self.image(e) for e in entries])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.entries[0].shape

    def counts(self) -> Dict[str, Dict[str, int]]:
        out: Dict[str, Dict[str, int]] = {}
        for e in self.entries:
            out.setdefault(e.modality, {}).setdefault(e.identity, 0)
            out[e.modality][e.identity] += 1
        return out


def load_directory_dataset(root, cross_modal: bool = True, min_images: int = 1) -> Dataset:
    """Read and validate a dataset directory.

    Every manifest entry must exist with the listed shape. With
    ``cross_modal`` each identity needs at least ``min_images`` images in every
    modality.
    """
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise DatasetError(f"{manifest}: manifest not found")
    entries = []
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise DatasetError(f"{manifest}:{lineno}: expected 6 tab-separated fields")
            modality, identity, rel, h, w, c = parts
            if modality not in MODALITIES:
                raise DatasetError(f"{manifest}:{lineno}: unknown modality {modality!r}")
            path = root / rel
            if not path.is_file():
                raise DatasetError(f"{path}: listed in manifest but missing")
            shape = (int(h), int(w), int(c))
            try:
                on_disk = cmft.peek_shape(path)
            except cmft.CMFTError as exc:
                raise DatasetError(str(exc)) from exc
            if tuple(on_disk) != shape:
                raise DatasetError(f"{path}: shape {tuple(on_disk)} differs from manifest {shape}")
            entries.append(Entry(modality, identity, path, shape))
    if not entries:
        raise DatasetError(f"{manifest}: no entries")
    if len({e.shape for e in entries}) != 1:
        raise DatasetError(f"{manifest}: images have differing shapes")
    identities = sorted({e.identity for e in entries})
    ds = Dataset(root, entries, identities)
    counts = ds.counts()
    if cross_modal:
        for ident in identities:
            for modality in MODALITIES:
                n = counts.get(modality, {}).get(ident, 0)
                if n < min_images:
                    raise DatasetError(
                        f"identity {ident}: {n} image(s) in modality {modality}, need {min_images}")
    return ds


def write_pgm(path, spatial_map: np.ndarray) -> None:
    """8-bit binary PGM of a map already scaled to [0, 1]."""
    m = np.clip(np.asarray(spatial_map, dtype=np.float64), 0, 1)
    pix = np.round(m * 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P5":
        raise DatasetError(f"{path}: not a binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=w * h).reshape(h, w)
