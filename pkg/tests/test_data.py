import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmalign import cmft
from cmalign.data import (MANIFEST, DatasetError, SyntheticConfig, generate_images, generate_synthetic_dataset,
                          load_directory_dataset, modality_transform, read_pgm, sample_nuisance, write_pgm)


def digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def test_two_ids_one_image_layout_and_replay(tmp_path):
    cfg = SyntheticConfig(n_identities=2, images_per_identity=1, seed=3)
    summary = generate_synthetic_dataset(tmp_path / "a", cfg)
    generate_synthetic_dataset(tmp_path / "b", cfg)
    files = sorted(p.relative_to(tmp_path / "a").as_posix() for p in (tmp_path / "a").rglob("*.cmft"))
    assert files == ["A/0000/0000.cmft", "A/0001/0000.cmft", "B/0000/0000.cmft", "B/0001/0000.cmft"]
    assert (tmp_path / "a" / MANIFEST).is_file()
    assert summary["images"] == 4
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_different_seed_changes_data(tmp_path):
    generate_synthetic_dataset(tmp_path / "a", SyntheticConfig(n_identities=2, images_per_identity=1, seed=3))
    generate_synthetic_dataset(tmp_path / "b", SyntheticConfig(n_identities=2, images_per_identity=1, seed=4))
    assert digest(tmp_path / "a") != digest(tmp_path / "b")


def test_refuses_non_empty_directory(tmp_path):
    cfg = SyntheticConfig(n_identities=1, images_per_identity=1)
    (tmp_path / "keep.txt").write_text("x")
    with pytest.raises(DatasetError):
        generate_synthetic_dataset(tmp_path, cfg)
    generate_synthetic_dataset(tmp_path, cfg, overwrite=True)
    assert (tmp_path / "keep.txt").read_text() == "x"
    assert load_directory_dataset(tmp_path).counts() == {"A": {"0000": 1}, "B": {"0000": 1}}


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(n_identities=0)


def test_manifest_format(tiny_dataset):
    lines = (tiny_dataset.root / MANIFEST).read_text().splitlines()
    assert len(lines) == 24
    mod, ident, rel, h, w, c = lines[0].split("\t")
    assert (mod, ident, rel, h, w, c) == ("A", "0000", "A/0000/0000.cmft", "36", "18", "3")


def test_load_counts(tiny_dataset):
    counts = tiny_dataset.counts()
    assert counts == {m: {f"{i:04d}": 3 for i in range(4)} for m in "AB"}
    assert tiny_dataset.image_shape == (36, 18, 3)


def test_images_in_unit_range(tiny_dataset):
    for e in tiny_dataset.entries:
        img = tiny_dataset.image(e)
        assert img.dtype == np.float32 and img.min() >= 0 and img.max() <= 1


def test_modality_b_channels_identical(tiny_dataset):
    for e in tiny_dataset.select("B"):
        img = tiny_dataset.image(e)
        assert np.array_equal(img[..., 0], img[..., 1]) and np.array_equal(img[..., 0], img[..., 2])


def test_zero_noise_pair_differs_only_by_transform(tmp_path):
    cfg = SyntheticConfig(n_identities=2, images_per_identity=2, seed=9, noise=0.0, max_shift=0.0,
                          scale_jitter=0.0, occlusion=0.0)
    generate_synthetic_dataset(tmp_path, cfg)
    for identity, k, rgb, _ in generate_images(cfg):
        a = cmft.load(tmp_path / "A" / f"{identity:04d}" / f"{k:04d}.cmft")
        b = cmft.load(tmp_path / "B" / f"{identity:04d}" / f"{k:04d}.cmft")
        assert np.array_equal(a, modality_transform(rgb, "A").astype(np.float32))
        assert np.array_equal(b, modality_transform(rgb, "B").astype(np.float32))


def test_zero_occlusion_disables_rectangles():
    cfg = SyntheticConfig(occlusion=0.0, occlusion_prob=1.0)
    rng = np.random.default_rng(0)
    assert all(sample_nuisance(rng, cfg).occlusion is None for _ in range(200))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_occlusion_leaves_most_of_frame(seed):
    cfg = SyntheticConfig(occlusion=1.0, occlusion_prob=1.0)
    occ = sample_nuisance(np.random.default_rng(seed), cfg).occlusion
    top, left, bottom, right = occ
    assert 0 <= top < bottom <= cfg.height and 0 <= left < right <= cfg.width
    assert (bottom - top) <= 0.6 * cfg.height + 1


def test_modality_transform_unknown():
    with pytest.raises(ValueError):
        modality_transform(np.zeros((2, 2, 3)), "C")


def _copy_dataset(src, dst):
    import shutil

    shutil.copytree(src, dst)
    return dst


def test_missing_file_named(tiny_dataset, tmp_path):
    root = _copy_dataset(tiny_dataset.root, tmp_path / "d")
    (root / "B" / "0002" / "0001.cmft").unlink()
    with pytest.raises(DatasetError, match="B/0002/0001.cmft"):
        load_directory_dataset(root)


def test_shape_mismatch_named(tiny_dataset, tmp_path):
    root = _copy_dataset(tiny_dataset.root, tmp_path / "d")
    cmft.save(root / "A" / "0001" / "0000.cmft", np.zeros((36, 18, 1)))
    with pytest.raises(DatasetError, match="A/0001/0000.cmft"):
        load_directory_dataset(root)


def test_single_modality_identity(tiny_dataset, tmp_path):
    root = _copy_dataset(tiny_dataset.root, tmp_path / "d")
    manifest = root / MANIFEST
    kept = [l for l in manifest.read_text().splitlines(True) if not l.startswith("B\t0003")]
    manifest.write_text("".join(kept))
    with pytest.raises(DatasetError, match="0003"):
        load_directory_dataset(root)
    ds = load_directory_dataset(root, cross_modal=False)
    assert "0003" not in ds.counts()["B"]


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        load_directory_dataset(tmp_path)


def test_pgm_round_trip(tmp_path):
    m = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "m.pgm", m)
    back = read_pgm(tmp_path / "m.pgm")
    assert back.shape == (3, 4)
    assert np.array_equal(back, np.round(m * 255).astype(np.uint8))
    assert (tmp_path / "m.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")


def test_cmft_layout(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    cmft.save(tmp_path / "x.cmft", a)
    raw = (tmp_path / "x.cmft").read_bytes()
    assert raw[:4] == b"CMFT"
    assert raw[4:16] == np.array([2, 2, 3], dtype="<u4").tobytes()
    assert raw[16:] == a.astype("<f4").tobytes()
    assert np.array_equal(cmft.load(tmp_path / "x.cmft"), a)
