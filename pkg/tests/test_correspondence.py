import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from cmalign.correspondence import (align, bidirectional, co_attention, cosine_similarity, export_matches,
                                    hard_matches, matching_probability, read_matches, soft_warp, top_matches)
from cmalign.tensor_field import DimensionError


def random_stochastic(rng, h, w):
    return matching_probability(rng.uniform(-1, 1, size=(h, w, h, w)), rng.uniform(1, 20))


def test_cosine_self_similarity_diagonal(rng):
    f = rng.normal(size=(2, 3, 4))
    C = cosine_similarity(f, f)
    for p in oracles.positions(2, 3):
        assert C[p + p] == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal():
    f = np.zeros((1, 2, 2))
    f[0, 0] = (1, 0)
    f[0, 1] = (0, 3)
    assert cosine_similarity(f, f)[0, 0, 0, 1] == 0.0


def test_cosine_forty_five_degrees():
    t = np.array([[[1.0, 0.0]]])
    s = np.array([[[1.0, 1.0]]])
    assert cosine_similarity(t, s)[0, 0, 0, 0] == pytest.approx(0.70711, abs=1e-5)


def test_cosine_zero_vector_is_finite():
    f = np.zeros((2, 2, 3))
    assert np.array_equal(cosine_similarity(f, f), np.zeros((2, 2, 2, 2)))


def test_cosine_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 2, 3\).*\(2, 2, 4\)"):
        cosine_similarity(np.ones((2, 2, 3)), np.ones((2, 2, 4)))


@pytest.mark.parametrize("seed", range(5))
def test_cosine_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
    np.testing.assert_allclose(cosine_similarity(a, b), oracles.cosine(a, b), atol=1e-12)


def test_cosine_batched_equals_per_item(rng):
    a, b = rng.normal(size=(3, 2, 2, 4)), rng.normal(size=(3, 2, 2, 4))
    C = cosine_similarity(a, b)
    for i in range(3):
        np.testing.assert_allclose(C[i], cosine_similarity(a[i], b[i]), atol=1e-15)


def test_matching_single_candidate():
    assert matching_probability(np.array([[[[0.3]]]]), 50.0)[0, 0, 0, 0] == 1.0


def test_matching_uniform_row():
    P = matching_probability(np.full((2, 2, 2, 2), 0.4), 50.0)
    np.testing.assert_allclose(P, 0.25, atol=1e-15)


def test_matching_two_entries_beta_50():
    C = np.array([1.0, 0.0]).reshape(1, 1, 1, 2)
    P = matching_probability(C, 50.0).ravel()
    tail = math.exp(-50) / (1 + math.exp(-50))
    assert tail == pytest.approx(1.93e-22, rel=1e-3)
    assert P[1] == pytest.approx(tail, rel=1e-12)
    assert P[0] == 1.0 - tail


def test_matching_rejects_non_positive_beta():
    with pytest.raises(ValueError):
        matching_probability(np.zeros((1, 1, 1, 1)), 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_matching_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    C = rng.uniform(-1, 1, size=(2, 3, 2, 3))
    np.testing.assert_allclose(matching_probability(C, 10.0), oracles.matching(C, 10.0), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), beta=st.sampled_from([1.0, 10.0, 50.0]),
       h=st.integers(1, 4), w=st.integers(1, 4))
def test_matching_rows_are_distributions(seed, beta, h, w):
    C = np.random.default_rng(seed).uniform(-1, 1, size=(h, w, h, w))
    P = matching_probability(C, beta)
    assert (P >= 0).all() and (P <= 1).all()
    np.testing.assert_allclose(P.reshape(h * w, -1).sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.integers(-16, 16), beta=st.sampled_from([1.0, 10.0, 50.0]))
def test_matching_row_shift_invariance_bitwise(seed, shift, beta):
    # values on a dyadic grid keep the shift and max-subtraction exact in float64
    rng = np.random.default_rng(seed)
    C = rng.integers(-8, 9, size=(2, 3, 2, 3)) / 8.0
    row_shift = np.zeros((2, 3, 1, 1))
    row_shift[1, 2] = shift / 4.0
    assert np.array_equal(matching_probability(C + row_shift, beta), matching_probability(C, beta))


def test_argmax_consistency_unique_max(rng):
    for _ in range(100):
        C = rng.uniform(-1, 1, size=(3, 3, 3, 3))
        flat = C.reshape(9, 9)
        top2 = np.sort(flat, axis=1)[:, -2:]
        assert (top2[:, 1] > top2[:, 0]).all()
        P = matching_probability(C, 50.0)
        assert np.array_equal(P.reshape(9, 9).argmax(axis=1), flat.argmax(axis=1))


def test_soft_warp_one_hot_gathers(rng):
    f = rng.normal(size=(2, 2, 3))
    perm = [(1, 1), (0, 0), (1, 0), (0, 1)]
    P = np.zeros((2, 2, 2, 2))
    for p, q in zip(oracles.positions(2, 2), perm):
        P[p + q] = 1.0
    out = soft_warp(P, f)
    for p, q in zip(oracles.positions(2, 2), perm):
        assert np.array_equal(out[p], f[q])


def test_soft_warp_uniform_averages(rng):
    f = rng.normal(size=(3, 2, 4))
    out = soft_warp(np.full((3, 2, 3, 2), 1 / 6), f)
    np.testing.assert_allclose(out, np.broadcast_to(f.mean(axis=(0, 1)), out.shape), atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_soft_warp_matches_oracle_two_by_one(seed):
    rng = np.random.default_rng(seed)
    P = random_stochastic(rng, 2, 1)
    f = rng.normal(size=(2, 1, 3))
    np.testing.assert_allclose(soft_warp(P, f), oracles.warp(P, f), atol=1e-12)


def test_soft_warp_spatial_map(rng):
    P = random_stochastic(rng, 3, 2)
    m = rng.uniform(size=(3, 2))
    np.testing.assert_allclose(soft_warp(P, m), oracles.warp(P, m), atol=1e-12)


def test_soft_warp_shape_error(rng):
    with pytest.raises(DimensionError):
        soft_warp(random_stochastic(rng, 2, 2), np.ones((3, 2, 4)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_soft_warp_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    P = random_stochastic(rng, 3, 3)
    f, g = rng.normal(size=(3, 3, 4)), rng.normal(size=(3, 3, 4))
    np.testing.assert_allclose(soft_warp(P, a * f + b * g), a * soft_warp(P, f) + b * soft_warp(P, g), atol=1e-6)


def test_align_mask_zero_is_target_bitwise(rng):
    ft, fs = rng.normal(size=(3, 3, 4)), rng.normal(size=(3, 3, 4))
    P = matching_probability(cosine_similarity(ft, fs), 50.0)
    assert np.array_equal(align(ft, fs, np.zeros((3, 3)), P), ft)


def test_align_mask_one_is_warp_bitwise(rng):
    ft, fs = rng.normal(size=(3, 3, 4)), rng.normal(size=(3, 3, 4))
    P = matching_probability(cosine_similarity(ft, fs), 50.0)
    assert np.array_equal(align(ft, fs, np.ones((3, 3)), P), soft_warp(P, fs))


def test_align_half_mask_uniform_p(rng):
    ft, fs = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    out = align(ft, fs, np.full((2, 3), 0.5), np.full((2, 3, 2, 3), 1 / 6))
    np.testing.assert_allclose(out, (fs.mean(axis=(0, 1)) + ft) / 2, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_align_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    ft, fs = rng.normal(size=(3, 2, 4)), rng.normal(size=(3, 2, 4))
    m = rng.uniform(size=(3, 2))
    P = random_stochastic(rng, 3, 2)
    np.testing.assert_allclose(align(ft, fs, m, P), oracles.blend(ft, fs, m, P), atol=1e-12)


def test_align_shape_error(rng):
    with pytest.raises(DimensionError):
        align(np.ones((2, 2, 3)), np.ones((2, 2, 3)), np.ones((3, 2)), np.full((2, 2, 2, 2), 0.25))


def test_bidirectional_is_argument_swap(rng):
    fa, fb = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    ma, mb = rng.uniform(size=(2, 3)), rng.uniform(size=(2, 3))
    ra, rb = bidirectional(fa, fb, ma, mb, 10.0)
    assert np.array_equal(ra, align(fa, fb, ma, matching_probability(cosine_similarity(fa, fb), 10.0)))
    assert np.array_equal(rb, align(fb, fa, mb, matching_probability(cosine_similarity(fb, fa), 10.0)))


def test_co_attention_all_ones_masks(rng):
    P = random_stochastic(rng, 3, 3)
    # rows sum to one up to rounding, so the product is constant to ~1 ulp
    np.testing.assert_allclose(co_attention(np.ones((3, 3)), np.ones((3, 3)), P), 1.0, atol=1e-12)


def test_co_attention_zero_target(rng):
    P = random_stochastic(rng, 3, 3)
    assert np.array_equal(co_attention(np.zeros((3, 3)), rng.uniform(size=(3, 3)), P), np.zeros((3, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_co_attention_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    mt, ms = rng.uniform(size=(3, 3)), rng.uniform(size=(3, 3))
    P = random_stochastic(rng, 3, 3)
    np.testing.assert_allclose(co_attention(mt, ms, P), oracles.coatt(mt, ms, P), atol=1e-12)


def test_hard_matches_is_row_argmax(rng):
    P = random_stochastic(rng, 2, 3)
    hm = hard_matches(P)
    for p in oracles.positions(2, 3):
        q = np.unravel_index(P[p].argmax(), (2, 3))
        assert tuple(hm[p]) == q


def test_top_matches_identical_image_self_match(rng):
    f = rng.normal(size=(3, 3, 4))
    P = matching_probability(cosine_similarity(f, f), 50.0)
    rows = top_matches(P, 20)
    assert len(rows) == 9
    for pr, pc, qr, qc, _ in rows:
        assert (pr, pc) == (qr, qc)


def test_top_matches_sorted_and_capped(rng):
    P = random_stochastic(rng, 3, 2)
    rows = top_matches(P, 4)
    assert len(rows) == 4
    probs = [r[4] for r in rows]
    assert probs == sorted(probs, reverse=True)
    assert len({(r[0], r[1]) for r in rows}) == 4


def test_export_matches_round_trip(tmp_path, rng):
    P = random_stochastic(rng, 3, 3)
    path = tmp_path / "m.csv"
    n = export_matches(path, P, 100)
    assert n == 9
    assert path.read_text().splitlines()[0] == "p_row,p_col,q_row,q_col,prob"
    back = read_matches(path)
    for (a, b) in zip(back, top_matches(P, 100)):
        assert a[:4] == b[:4]
        assert a[4] == pytest.approx(b[4], rel=1e-8)
