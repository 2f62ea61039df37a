"""Acceptance criteria. Each test prints one PASS/FAIL line for its criterion."""
import json
import subprocess
import sys
import time

import numpy as np
import pytest

import oracles
from cmalign.benchmark import run_ablation
from cmalign.correspondence import align, co_attention, cosine_similarity, matching_probability, soft_warp
from cmalign.evaluate import evaluate_retrieval
from cmalign.gradcheck import CASES, run_suite
from cmalign.losses import dense_triplet_loss, local_distance
from cmalign.train import TrainConfig, lr_schedule


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def test_closed_form_oracles(report):
    rng = np.random.default_rng(100)
    worst = {name: 0.0 for name in ("cosine_similarity", "matching_probability", "soft_warp", "align",
                                    "co_attention", "local_distance", "dense_triplet_loss")}
    start = time.perf_counter()
    for _ in range(12):
        h, w, d = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 9)
        ft, fs = rng.normal(size=(h, w, d)), rng.normal(size=(h, w, d))
        beta = rng.choice([1.0, 10.0, 50.0])
        C = cosine_similarity(ft, fs)
        worst["cosine_similarity"] = max(worst["cosine_similarity"], np.abs(C - oracles.cosine(ft, fs)).max())
        P = matching_probability(C, beta)
        Pb = oracles.matching(C, beta)
        worst["matching_probability"] = max(worst["matching_probability"], np.abs(P - Pb).max())
        worst["soft_warp"] = max(worst["soft_warp"], np.abs(soft_warp(P, fs) - oracles.warp(P, fs)).max())
        m_t, m_s = rng.uniform(size=(h, w)), rng.uniform(size=(h, w))
        worst["align"] = max(worst["align"], np.abs(align(ft, fs, m_t, P) - oracles.blend(ft, fs, m_t, P)).max())
        worst["co_attention"] = max(worst["co_attention"],
                                    np.abs(co_attention(m_t, m_s, P) - oracles.coatt(m_t, m_s, P)).max())
        worst["local_distance"] = max(worst["local_distance"],
                                      np.abs(local_distance(ft, fs) - oracles.local_dist(ft, fs)).max())
        dp, dn, att = rng.uniform(0, 2, (h, w)), rng.uniform(0, 2, (h, w)), rng.uniform(size=(h, w))
        worst["dense_triplet_loss"] = max(worst["dense_triplet_loss"], abs(
            float(dense_triplet_loss(dp, dn, att, 0.3)) - oracles.dense_triplet(dp, dn, att, 0.3)))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-6 and elapsed < 10
    report(1, ok, f"12 instances per op, worst abs error {max(worst.values()):.2e} "
                  f"({max(worst, key=worst.get)}), {elapsed:.2f}s")


def test_stochasticity(report):
    rng = np.random.default_rng(101)
    worst, negatives = 0.0, 0
    for beta in (1.0, 10.0, 50.0):
        for _ in range(100):
            h, w = rng.integers(1, 6, size=2)
            P = matching_probability(rng.uniform(-1, 1, size=(h, w, h, w)), beta)
            worst = max(worst, np.abs(P.reshape(h * w, -1).sum(axis=1) - 1).max())
            negatives += int((P < 0).sum())
    report(2, worst <= 1e-6 and negatives == 0,
           f"300 tensors, max |row sum - 1| = {worst:.2e}, negative entries {negatives}")


def test_gradient_suite(report):
    start = time.perf_counter()
    errors = run_suite(("all",), seeds=10, step=1e-4)
    elapsed = time.perf_counter() - start
    failing = [k for k, v in errors.items() if not v < 1e-4]
    ok = not failing and elapsed < 120 and set(errors) == set(CASES) and "total_loss" in errors
    report(3, ok, f"{len(errors)} ops x 10 seeds, worst {max(errors.values()):.2e} "
                  f"({max(errors, key=errors.get)}), failing {failing or 'none'}, {elapsed:.1f}s")


def test_alignment_identities(report):
    rng = np.random.default_rng(102)
    exact_zero = exact_one = True
    mismatches = 0
    for _ in range(100):
        h, w, d = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 9)
        ft, fs = rng.normal(size=(h, w, d)), rng.normal(size=(h, w, d))
        C = cosine_similarity(ft, fs)
        P = matching_probability(C, 50.0)
        exact_zero &= np.array_equal(align(ft, fs, np.zeros((h, w)), P), ft)
        exact_one &= np.array_equal(align(ft, fs, np.ones((h, w)), P), soft_warp(P, fs))
        flat_c, flat_p = C.reshape(h * w, -1), P.reshape(h * w, -1)
        srt = np.sort(flat_c, axis=1)
        unique = srt[:, -1] > srt[:, -2] if flat_c.shape[1] > 1 else np.ones(h * w, bool)
        mismatches += int((flat_c.argmax(1) != flat_p.argmax(1))[unique].sum())
    report(4, exact_zero and exact_one and mismatches == 0,
           f"M=0 bit-exact {exact_zero}, M=1 bit-exact {exact_one}, argmax mismatches {mismatches}/100 trials")


def test_ablation_trend(report, tmp_path):
    res = run_ablation(tmp_path)
    full, id_only, no_co = res.mean("full"), res.mean("id_only"), res.mean("no_coattention")
    gain = 100 * (full - id_only)
    ok = full > id_only and gain >= 2.0 and not no_co > full
    per_seed = ", ".join(f"{k}={[round(100 * v, 2) for v in vals]}" for k, vals in res.mAP.items())
    report(5, ok, f"mean mAP full {100 * full:.2f}, id-only {100 * id_only:.2f}, "
                  f"co-attention off {100 * no_co:.2f}; gain {gain:.2f} points; {per_seed}; {res.seconds / 60:.1f} min")


def test_retrieval_evaluator(report):
    rng = np.random.default_rng(103)
    exact, monotone = 0, 0
    for _ in range(50):
        n_g, n_q = int(rng.integers(1, 11)), int(rng.integers(1, 6))
        gl, ql = rng.integers(0, 3, n_g), rng.integers(0, 3, n_q)
        g, q = rng.normal(size=(n_g, 4)), rng.normal(size=(n_q, 4))
        res = evaluate_retrieval(q, ql, g, gl)
        aps = []
        for i in range(n_q):
            sims = [float(q[i] @ g[j] / (np.linalg.norm(q[i]) * np.linalg.norm(g[j]))) for j in range(n_g)]
            order = sorted(range(n_g), key=lambda j: (-sims[j], j))
            ranked = [gl[j] == ql[i] for j in order]
            if any(ranked):
                aps.append(oracles.average_precision(ranked))
        exact += res.ap == aps
        monotone += all(a <= b for a, b in zip(res.cmc, res.cmc[1:]))
    report(6, exact == 50 and monotone == 50, f"AP exact on {exact}/50 instances, CMC monotone on {monotone}/50")


def _pipeline(base):
    cli = [sys.executable, "-m", "cmalign"]
    steps = [
        ["gen", "--set", "data.n_identities=4", "--set", "data.images_per_identity=3", "--seed", "5",
         "--out", str(base / "ds")],
        ["train", "--set", f"data.root={base / 'ds'}", "--set", "train.epochs=2", "--set", "train.warmup_epochs=1",
         "--set", "train.identities_per_modality=2", "--set", "train.images_per_identity=2", "--seed", "5",
         "--out", str(base / "run")],
        ["eval", "--checkpoint", str(base / "run" / "checkpoint"), "--set", f"data.root={base / 'ds'}",
         "--seed", "5", "--out", str(base / "eval")],
    ]
    out = b""
    for argv in steps:
        proc = subprocess.run(cli + argv, capture_output=True)
        if proc.returncode != 0:
            raise RuntimeError(f"{argv[0]} exited {proc.returncode}: {proc.stderr.decode()}")
        out = proc.stdout
    return out


def test_determinism(report, tmp_path):
    first = _pipeline(tmp_path / "one")
    second = _pipeline(tmp_path / "two")
    json.loads(first)
    report(7, first == second and len(first) > 0, f"metrics JSON identical across runs: {first == second} "
                                                   f"({first.decode().strip()})")


def test_schedule(report):
    cfg = TrainConfig()
    at_warmup_end = lr_schedule(cfg.warmup_epochs, cfg)
    late = [lr_schedule(e, cfg) for e in range(50, 80)]
    ok = at_warmup_end == (1e-2, 1e-1) and all(v == (1e-4, 1e-3) for v in late)
    report(8, ok, f"epoch {cfg.warmup_epochs}: {at_warmup_end}; epochs 50-79: {sorted(set(late))}")
