import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpaf import accountant as acc
from oracles import subsampled_rdp_oracle, total_epsilon_oracle


def mech(t, gamma, sigma=1.0, u=1.0):
    return acc.MechanismConfig(u, sigma, gamma, t)


def spec(eps, t=(100, 10, 100), gammas=(0.01, 0.08, 0.01), sigmas=(1.0, 1.0, 1.0), delta=1e-5,
         allocation=(0.1, None, 0.1), mode="absolute", u3=1.0):
    return acc.PrivacySpec(
        eps, delta,
        mech(t[0], gammas[0], sigmas[0]),
        mech(t[1], gammas[1], sigmas[1]),
        mech(t[2], gammas[2], sigmas[2], u3),
        allocation, mode,
    )


# -- gaussian_rdp -----------------------------------------------------------


def test_gaussian_rdp_examples():
    assert acc.gaussian_rdp(2, 1, 1) == 1.0
    assert acc.gaussian_rdp(2, 1, math.inf) == 0.0
    assert acc.gaussian_rdp(16, 4, 8) == 2.0


@pytest.mark.parametrize("args", [(1, 1, 1), (2, 0, 1), (2, 1, 0), (2, -1, 1)])
def test_gaussian_rdp_domain(args):
    with pytest.raises(acc.AccountantError):
        acc.gaussian_rdp(*args)


@given(st.integers(2, 300), st.floats(0.1, 10), st.floats(0.1, 50), st.floats(1.001, 3))
def test_gaussian_rdp_linear_in_alpha_decreasing_in_sigma(a, u, s, k):
    assert acc.gaussian_rdp(a, u, s * k) < acc.gaussian_rdp(a, u, s)
    assert acc.gaussian_rdp(2 * a, u, s) == pytest.approx(2 * acc.gaussian_rdp(a, u, s), rel=1e-15)


# -- compose_rdp ----------------------------------------------------------------


def test_compose_examples():
    o = (2, 3, 4)
    one = acc.RdpCurve(o, (1.0, 1.0, 1.0))
    two = acc.RdpCurve(o, (2.0, 2.0, 2.0))
    assert acc.compose_rdp([one, two]).epsilons == (3.0, 3.0, 3.0)
    assert acc.compose_rdp([one]) == one
    c = acc.RdpCurve(o, (0.1, 0.2, 0.3))
    assert acc.compose_rdp([c] * 7).epsilons == pytest.approx(c.scaled(7).epsilons, rel=1e-15)


def test_compose_rejects_mismatched_grids():
    with pytest.raises(acc.AccountantError):
        acc.compose_rdp([acc.RdpCurve((2, 3), (0, 0)), acc.RdpCurve((2, 4), (0, 0))])
    with pytest.raises(acc.AccountantError):
        acc.compose_rdp([])


def test_rdp_curve_validation():
    with pytest.raises(acc.AccountantError):
        acc.RdpCurve((3, 2), (0.0, 0.0))
    with pytest.raises(acc.AccountantError):
        acc.RdpCurve((1,), (0.0,))
    with pytest.raises(acc.AccountantError):
        acc.RdpCurve((2,), (-1.0,))


# -- subsampled_rdp ---------------------------------------------------------------


def test_subsampled_full_batch_order_two():
    # only the j=2 term: log(1 + min{4(e-1), 2e}) = log(1 + 2e)
    got = acc.subsampled_rdp(2, 1.0, 1.0, 1.0)
    assert got == pytest.approx(math.log(1 + 2 * math.e), rel=1e-12)
    assert got == pytest.approx(float(subsampled_rdp_oracle(2, 1, 1, 1)), rel=1e-12)


def test_subsampled_small_rate_below_unsampled():
    got = acc.subsampled_rdp(8, 0.01, 1.0, 2.0)
    assert 0 < got < acc.gaussian_rdp(8, 1.0, 2.0)
    assert got == pytest.approx(float(subsampled_rdp_oracle(8, 0.01, 1, 2)), rel=1e-9)


def test_subsampled_vanishing_rate():
    assert acc.subsampled_rdp(2, 1e-200, 3.0, 0.5) == pytest.approx(0.0, abs=1e-300)


def _oracle_grid():
    rng = random.Random(7)
    grid = []
    for a in (2, 3, 4, 5, 8, 16, 32, 64, 128, 256):
        for g in (1e-4, 0.008, 0.064, 0.3, 1.0):
            for s in (0.5, 1.0, 3.0):
                grid.append((a, g, 1.0, s))
    for _ in range(40):
        grid.append((rng.randint(2, 256), 10 ** rng.uniform(-4, 0), rng.uniform(0.2, 20),
                     rng.uniform(0.3, 100)))
    return grid


ORACLE_GRID = _oracle_grid()


def test_oracle_grid_is_large_enough():
    assert len(ORACLE_GRID) >= 100


@pytest.mark.parametrize("a,g,u,s", ORACLE_GRID)
def test_subsampled_matches_oracle(a, g, u, s):
    want = subsampled_rdp_oracle(a, g, u, s)
    got = acc.subsampled_rdp(a, g, u, s)
    assert math.isfinite(got)
    assert got == pytest.approx(float(want), rel=1e-9, abs=0)


def test_subsampled_no_overflow_at_extremes():
    # the sum's largest terms are ~e^{alpha^2/(2 sigma^2)}, far past float range
    v = acc.subsampled_rdp(256, 1.0, 1.0, 0.5)
    assert math.isfinite(v)
    assert v == pytest.approx(float(subsampled_rdp_oracle(256, 1.0, 1.0, 0.5)), rel=1e-9)


@pytest.mark.parametrize("bad", [1, 2.5, 0, True])
def test_subsampled_rejects_bad_orders(bad):
    with pytest.raises(acc.AccountantError):
        acc.subsampled_rdp(bad, 0.1, 1.0, 1.0)


@pytest.mark.parametrize("g", [0.0, -0.1, 1.5])
def test_subsampled_rejects_bad_rate(g):
    with pytest.raises(acc.AccountantError):
        acc.subsampled_rdp(4, g, 1.0, 1.0)


def test_monotonicity_sweeps():
    rng = np.random.default_rng(3)
    violations = 0
    for _ in range(200):
        a = int(rng.integers(2, 257))
        g = float(10 ** rng.uniform(-3, 0))
        s = float(10 ** rng.uniform(-0.5, 1.5))
        base = acc.subsampled_rdp(a, g, 1.0, s)
        if acc.subsampled_rdp(a, min(1.0, g * 1.5), 1.0, s) < base:
            violations += 1
        if acc.subsampled_rdp(a, g, 1.0, s * 1.5) > base:
            violations += 1
        t = int(rng.integers(1, 1000))
        m = mech(t, g, s)
        if m.rdp([a]).epsilons[0] > mech(t + 1, g, s).rdp([a]).epsilons[0]:
            violations += 1
    assert violations == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 128), st.floats(1e-4, 1.0), st.floats(0.3, 50.0))
def test_subsampled_bounded_by_unsampled_log_term(a, g, s):
    v = acc.subsampled_rdp(a, g, 1.0, s)
    assert v >= 0
    assert acc.subsampled_rdp(a, g, 1.0, s * 2) <= v


# -- rdp_to_dp and totals ----------------------------------------------------------


def test_rdp_to_dp_examples():
    assert acc.rdp_to_dp(2, 1.0, 1 / math.e) == pytest.approx(2.0, rel=1e-15)
    assert acc.rdp_to_dp(101, 0.0, 1 / math.e) == pytest.approx(0.01, rel=1e-15)
    assert acc.rdp_to_dp(5, 0.7, 1 - 1e-15) == pytest.approx(0.7, abs=1e-12)
    assert acc.rdp_to_dp(11, 0.0, 1e-5) == math.log(1e5) / 10
    for d in (0.0, 1.0, 2.0):
        with pytest.raises(acc.AccountantError):
            acc.rdp_to_dp(2, 1.0, d)


def test_total_epsilon_without_releases():
    s = spec(1.0, t=(0, 0, 0))
    eps, a = acc.dpaf_total_epsilon(s)
    assert a == 256
    assert eps == pytest.approx(math.log(1e5) / 255, rel=1e-15)


def test_total_epsilon_single_release_full_batch():
    s = acc.PrivacySpec(5.0, 1e-5, mech(1, 1.0, 2.0), mech(0, 1.0), mech(0, 1.0))
    eps, a = acc.dpaf_total_epsilon(s)
    want = min(acc.rdp_to_dp(o, acc.subsampled_rdp(o, 1.0, 1.0, 2.0), 1e-5) for o in acc.DEFAULT_ORDERS)
    assert eps == want


def test_total_epsilon_matches_oracle_sweep():
    s = spec(10.0, t=(100, 100, 100), gammas=(0.01,) * 3, sigmas=(5.0,) * 3)
    orders = range(2, 65)
    eps, a = acc.dpaf_total_epsilon(s, orders)
    want, wa = total_epsilon_oracle([(100, 0.01, 1, 5.0)] * 3, 1e-5, orders)
    assert a == wa
    assert eps == pytest.approx(float(want), rel=1e-9)


def test_total_epsilon_single_component_path_is_exact():
    s = spec(10.0, t=(0, 40, 0), sigmas=(1.0, 1.3, 1.0))
    eps, a = acc.dpaf_total_epsilon(s)
    alone = min(
        (acc.rdp_to_dp(o, s.conv2.rdp([o]).epsilons[0], 1e-5), o) for o in acc.DEFAULT_ORDERS
    )
    assert (eps, a) == alone


def test_sensitivity_is_scaled_into_sigma():
    # u = sqrt(m) p with noise sigma * u is the same mechanism as u = 1
    s_big = spec(10.0, sigmas=(1, 1, 2.0), u3=11.3)
    s_unit = spec(10.0, sigmas=(1, 1, 2.0), u3=1.0)
    assert acc.dpaf_total_epsilon(s_big)[0] == pytest.approx(acc.dpaf_total_epsilon(s_unit)[0], rel=1e-12)


def test_total_epsilon_rejects_empty_grid():
    with pytest.raises(acc.AccountantError):
        acc.dpaf_total_epsilon(spec(1.0), [])


# -- allocation and calibration ---------------------------------------------------


def test_absolute_allocation_shares():
    s = spec(10.0)
    e1, e2, e3 = s.component_epsilons()
    assert (e1, e3) == pytest.approx((0.1, 0.1), rel=1e-12)
    assert e2 == pytest.approx(9.8, rel=1e-12)


def test_percent_allocation_and_errors():
    s = spec(10.0, allocation=(10, 80, 10), mode="percent")
    assert s.shares() == pytest.approx((0.1, 0.8, 0.1))
    with pytest.raises(acc.AccountantError):
        spec(10.0, allocation=(10, 80, 20), mode="percent")
    with pytest.raises(acc.AccountantError):
        spec(1.0, allocation=(0.5, None, 0.5))
    with pytest.raises(acc.AccountantError):
        spec(1.0, allocation=(0.1, 0.8, 0.1))
    with pytest.raises(acc.AccountantError):
        spec(0.0)


def test_calibrate_single_component_full_batch():
    s = acc.PrivacySpec(3.0, 1e-5, mech(1, 1.0), mech(0, 1.0), mech(0, 1.0), (100, 0, 0), "percent")
    cal = acc.calibrate_sigma(s)
    eps, _ = acc.dpaf_total_epsilon(s.with_sigmas(cal.sigmas))
    assert 0.99 * 3.0 <= eps <= 3.0
    assert eps == cal.achieved_epsilon


def test_calibrate_roundtrip_and_report():
    s = spec(10.0, t=(125, 15, 125), gammas=(0.008, 0.064, 0.008), u3=11.3)
    cal = acc.calibrate_sigma(s)
    eps, a = acc.dpaf_total_epsilon(cal.spec)
    assert 0.99 * 10 <= eps <= 10
    assert (eps, a) == (cal.achieved_epsilon, cal.order)
    recs = acc.calibration_from_text(cal.to_text())
    assert [r["component"] for r in recs] == list(acc.COMPONENTS)
    assert [r["allocated_epsilon"] for r in recs] == pytest.approx([0.1, 9.8, 0.1])
    assert [r["sigma"] for r in recs] == list(cal.sigmas)
    assert cal.to_text() == acc.calibrate_sigma(s).to_text()


def test_calibrate_doubling_iterations_increases_every_sigma():
    base = spec(8.0, t=(100, 20, 100), gammas=(0.01, 0.05, 0.01))
    dbl = spec(8.0, t=(200, 40, 200), gammas=(0.01, 0.05, 0.01))
    s1 = acc.calibrate_sigma(base).sigmas
    s2 = acc.calibrate_sigma(dbl).sigmas
    assert all(b > a for a, b in zip(s1, s2))


def test_calibrate_infeasible_budget():
    # log(1/delta)/(alpha-1) exceeds the target on the whole grid
    with pytest.raises(acc.InfeasibleBudgetError):
        acc.calibrate_sigma(spec(0.01, allocation=(0.001, None, 0.001)), orders=range(2, 20))
    with pytest.raises(acc.AccountantError):
        acc.calibrate_sigma(spec(1.0), tolerance=0)


def test_calibrate_infeasible_from_subsampling_floor():
    # with a factor 2 on every j >= 3 term the bound stays positive as sigma grows,
    # so many high-rate releases cannot fit a small budget at any sigma
    s = spec(1.0, t=(10, 2000, 10), gammas=(0.01, 0.3, 0.01))
    with pytest.raises(acc.InfeasibleBudgetError):
        acc.calibrate_sigma(s)


def test_bisection_parameters():
    assert (acc.SIGMA_MIN, acc.SIGMA_MAX) == (1e-2, 1e6)
    assert acc.BISECTION_MAX_ITER == 200
    assert acc.DEFAULT_ORDERS == tuple(range(2, 257))


# -- sensitivities -----------------------------------------------------------------


def test_agg_sensitivity_examples():
    assert acc.agg_sensitivity(1, 1) == 1
    assert acc.agg_sensitivity(4, 8) == 16
    assert acc.agg_sensitivity(128, 16) == pytest.approx(181.019, abs=1e-3)
    with pytest.raises(acc.AccountantError):
        acc.agg_sensitivity(0, 4)


def test_agg_sensitivity_at_layer_examples():
    assert acc.agg_sensitivity_at_layer(64, 3, [64], 1) == pytest.approx(math.sqrt(192) * 32)
    assert acc.agg_sensitivity_at_layer(64, 3, [64], 1) == pytest.approx(443.4, abs=0.05)
    assert acc.agg_sensitivity_at_layer(32, 3, [4, 8], 0) == pytest.approx(math.sqrt(3) * 32)
    r = acc.agg_sensitivity_at_layer(32, 1, [8, 4], 2) / acc.agg_sensitivity_at_layer(32, 1, [8, 4], 1)
    assert r == pytest.approx(1.0)
    with pytest.raises(acc.AccountantError):
        acc.agg_sensitivity_at_layer(32, 1, [8], 2)


@given(st.integers(1, 64), st.integers(1, 5))
def test_layer_ratio_is_sqrt_k_over_two(k, c):
    r = acc.agg_sensitivity_at_layer(64, c, [8, k], 2) / acc.agg_sensitivity_at_layer(64, c, [8, k], 1)
    assert r == pytest.approx(math.sqrt(k) / 2, rel=1e-12)
