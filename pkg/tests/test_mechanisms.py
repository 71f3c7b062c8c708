import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dpaf import mechanisms as M


def maps(*rows):
    return np.asarray(rows, dtype=np.float64)[None, None]


# -- SIN --------------------------------------------------------------------------


def test_sin_examples():
    t = maps([1, -1], [1, -1])
    np.testing.assert_allclose(M.sin_normalize(t), t / math.sqrt(1 + 1e-5), rtol=1e-15)
    assert np.all(M.sin_normalize(maps([2.5, 2.5], [2.5, 2.5])) == 0)
    # hand-computed: mean 3, population variance 5
    want = np.array([[-3, -1], [1, 3]]) / math.sqrt(5 + 1e-5)
    np.testing.assert_allclose(M.sin_normalize(maps([0, 2], [4, 6]))[0, 0], want, rtol=1e-14)


def test_sin_norms():
    rng = np.random.default_rng(0)
    t = rng.normal(0, rng.uniform(0.04, 10, (50, 6, 1, 1)), (50, 6, 5, 5))
    out = M.sin_normalize(t)
    norms = np.linalg.norm(out.reshape(50, 6, -1), axis=2)
    var = t.reshape(50, 6, -1).var(axis=2)
    # the stabilizer shrinks every norm by exactly sqrt(var / (var + eps))
    np.testing.assert_allclose(norms, 5.0 * np.sqrt(var / (var + M.SIN_EPS)), rtol=1e-12)
    big = var >= 0.05
    assert big.sum() > 250
    np.testing.assert_allclose(norms[big], 5.0, rtol=1e-4)
    tiny = M.sin_normalize(rng.normal(0, 1e-4, (20, 3, 4, 4)))
    assert np.all(np.linalg.norm(tiny.reshape(20, 3, -1), axis=2) <= 4.0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (2, 3, 4, 4), elements=st.floats(-1e3, 1e3)))
def test_sin_norm_never_exceeds_sqrt_hw(t):
    out = M.sin_normalize(t)
    assert np.all(np.linalg.norm(out.reshape(2, 3, -1), axis=2) <= 4.0 * (1 + 1e-12))


def test_sin_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(2, 2, 3, 3))
    w = rng.normal(size=t.shape)
    g = M.sin_backward(t, w)
    h = 1e-6
    for idx in [(0, 0, 0, 0), (1, 1, 2, 1), (0, 1, 1, 2)]:
        tp, tm = t.copy(), t.copy()
        tp[idx] += h
        tm[idx] -= h
        fd = ((M.sin_normalize(tp) * w).sum() - (M.sin_normalize(tm) * w).sum()) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-6)


# -- aggregation --------------------------------------------------------------------


def test_aggregate_examples():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(1, 3, 2, 2))
    np.testing.assert_array_equal(M.aggregate(v), v.ravel())
    np.testing.assert_array_equal(M.aggregate(np.concatenate([v, -v])), 0)
    np.testing.assert_allclose(M.aggregate(np.repeat(v, 5, axis=0)), 5 * v.ravel(), rtol=1e-15)
    with pytest.raises(ValueError):
        M.aggregate(np.zeros((0, 3, 2, 2)))


def test_dp_aggregate_requires_matching_sensitivity():
    t = np.zeros((4, 2, 3, 3))
    with pytest.raises(M.SensitivityMismatchError):
        M.dp_aggregate(t, M.NoiseSpec(1.0, 3.0, np.random.default_rng(0)))
    with pytest.raises(M.SensitivityMismatchError):
        M.dp_aggregate(np.zeros((4, 2, 3, 2)), M.NoiseSpec(1.0, math.sqrt(2) * 3, np.random.default_rng(0)))


def test_dp_aggregate_noise_scale_and_determinism():
    m, p = 4, 8
    t = M.sin_normalize(np.random.default_rng(3).normal(size=(2, m, p, p)))
    delta = math.sqrt(m) * p
    sigma = 0.7
    draws = []
    for b in range(400):  # 400 * 256 > 1e5 coordinates
        out = M.dp_aggregate(t, M.NoiseSpec(sigma, delta, M.stream(9, "dpagg", 0, b)))
        draws.append(out - M.aggregate(t))
    z = np.concatenate(draws)
    assert z.size >= 100_000
    assert z.std() == pytest.approx(sigma * delta, rel=0.02)
    again = M.dp_aggregate(t, M.NoiseSpec(sigma, delta, M.stream(9, "dpagg", 0, 0)))
    np.testing.assert_array_equal(again - M.aggregate(t), draws[0])
    tiny = M.dp_aggregate(t, M.NoiseSpec(1e-300, delta, M.stream(9, "dpagg", 0, 0)))
    np.testing.assert_allclose(tiny, M.aggregate(t), rtol=0, atol=1e-280)


def test_aggregate_sensitivity_on_neighbouring_batches():
    rng = np.random.default_rng(4)
    worst = 0.0
    for m in (2, 4, 8):
        for p in (4, 8):
            bound = math.sqrt(m) * p
            for _ in range(170):
                n = int(rng.integers(2, 12))
                d = rng.normal(0, rng.uniform(0.1, 5), (n, m, p, p))
                k = int(rng.integers(n))
                diff = M.aggregate(M.sin_normalize(d)) - M.aggregate(M.sin_normalize(np.delete(d, k, 0)))
                r = np.linalg.norm(diff) / bound
                assert r <= 1 + 1e-9 / bound
                worst = max(worst, r)
    assert worst >= 0.999


# -- clipping and top-k -------------------------------------------------------------


def test_clip_examples():
    v = np.array([1.2, -1.6])  # norm 2
    np.testing.assert_allclose(M.clip_gradient(v, M.ClipSpec(1.0)), v / 2, rtol=1e-15)
    w = np.array([0.3, 0.4])
    np.testing.assert_array_equal(M.clip_gradient(w, M.ClipSpec(1.0)), w)
    np.testing.assert_array_equal(M.clip_gradient(np.zeros(3), M.ClipSpec(1.0)), 0)
    with pytest.raises(ValueError):
        M.ClipSpec(0.0)


@given(hnp.arrays(np.float64, 7, elements=st.floats(-1e6, 1e6)), st.floats(1e-3, 1e3))
def test_clip_bounded_and_idempotent(v, u):
    spec = M.ClipSpec(u)
    once = M.clip_gradient(v, spec)
    assert np.linalg.norm(once) <= u * (1 + 1e-12)
    np.testing.assert_allclose(M.clip_gradient(once, spec), once, rtol=1e-12)
    rows = M.clip_rows(np.stack([v, 2 * v]), u)
    np.testing.assert_allclose(rows[0], once, rtol=1e-12)


def test_top_k_examples():
    v = np.array([3.0, -5.0, 1.0, 0.0])
    np.testing.assert_array_equal(M.top_k_compress(v, 1.0), v)
    np.testing.assert_array_equal(M.top_k_compress(v, 0.5), [3.0, -5.0, 0.0, 0.0])
    np.testing.assert_array_equal(M.top_k_compress(np.array([1.0, -1, 1, -1]), 0.5), [1.0, -1, 0, 0])
    with pytest.raises(ValueError):
        M.top_k_compress(v, 0.0)


@given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-100, 100)), st.floats(0.01, 1.0))
def test_top_k_keeps_exact_values(v, keep):
    out = M.top_k_compress(v, keep)
    k = math.ceil(keep * v.size)
    kept = out != 0
    assert kept.sum() <= k
    np.testing.assert_array_equal(out[kept], v[kept])
    # nothing dropped is larger than anything kept
    if kept.any() and (~kept).any():
        assert np.abs(v[~kept]).max() <= np.abs(v[kept]).min()
    rows = M.top_k_rows(np.stack([v, v]), keep)
    np.testing.assert_array_equal(rows[1], out)


# -- DPSGD ----------------------------------------------------------------------------


def test_dpsgd_reduces_to_sgd():
    w = np.array([1.0, 2.0])
    g = np.array([[0.3, -0.2]])
    out = M.dpsgd_step(g, M.ClipSpec(1.0), 0.0, 1, 0.1, w, None)
    np.testing.assert_allclose(out, w - 0.1 * g[0], rtol=1e-15)
    rng = np.random.default_rng(5)
    gs = rng.normal(0, 10, (6, 4))
    w = rng.normal(size=4)
    out = M.dpsgd_step(gs, M.ClipSpec(math.inf), 0.0, 6, 0.05, w, None)
    np.testing.assert_allclose(out, w - 0.05 * gs.mean(0), rtol=1e-15, atol=1e-15)


def test_dpsgd_clips_identical_gradients():
    g = np.array([2.0, 0.0])  # norm 2u with u = 1
    out = M.dpsgd_step(np.stack([g, g]), M.ClipSpec(1.0), 0.0, 2, 1.0, np.zeros(2), None)
    np.testing.assert_allclose(out, [-1.0, 0.0], rtol=1e-15)


def test_dpsgd_noise_is_seeded_and_scaled():
    gs = np.zeros((4, 50_000))
    w = np.zeros(50_000)
    a = M.dpsgd_step(gs, M.ClipSpec(0.5), 2.0, 4, 1.0, w, M.stream(1, "conv1", 0, 0))
    b = M.dpsgd_step(gs, M.ClipSpec(0.5), 2.0, 4, 1.0, w, M.stream(1, "conv1", 0, 0))
    np.testing.assert_array_equal(a, b)
    assert a.std() == pytest.approx(2.0 * 0.5 / 4, rel=0.02)


def test_dpsgd_shape_errors():
    with pytest.raises(ValueError):
        M.dpsgd_step(np.zeros((3, 2)), M.ClipSpec(1.0), 0.0, 2, 0.1, np.zeros(2), None)
    with pytest.raises(ValueError):
        M.dpsgd_step(np.zeros((2, 3)), M.ClipSpec(1.0), 0.0, 2, 0.1, np.zeros(2), None)
    with pytest.raises(ValueError):
        M.dpsgd_step(np.zeros((2, 2)), M.ClipSpec(math.inf), 1.0, 2, 0.1, np.zeros(2), None)


def test_topk_is_applied_before_clipping():
    g = np.array([[3.0, 4.0, 0.1, 0.1]])
    out = M.noisy_clipped_mean(g, 1.0, None, keep_fraction=0.5)
    np.testing.assert_allclose(out, [0.6, 0.8, 0.0, 0.0], rtol=1e-15)


def test_noise_spec_counts_releases():
    ns = M.NoiseSpec(1.0, 2.0, np.random.default_rng(0), "dpagg")
    ns.draw(3)
    ns.draw((2, 2))
    assert ns.releases == 2
    with pytest.raises(M.SensitivityMismatchError):
        M.noisy_clipped_mean(np.ones((2, 3)), 1.0, ns)
    with pytest.raises(ValueError):
        M.NoiseSpec(-1.0, 1.0, None)
    with pytest.raises(ValueError):
        M.NoiseSpec(1e-9, math.inf, None)
    assert M.NoiseSpec(0.0, math.inf, None).sigma == 0.0


def test_streams_are_independent_and_reproducible():
    a = M.stream(0, "conv1", 1, 2).standard_normal(4)
    np.testing.assert_array_equal(a, M.stream(0, "conv1", 1, 2).standard_normal(4))
    for other in (M.stream(0, "conv2", 1, 2), M.stream(0, "conv1", 2, 1), M.stream(1, "conv1", 1, 2)):
        assert not np.array_equal(a, other.standard_normal(4))
