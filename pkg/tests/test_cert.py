import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcbf.cert import (
    BudgetError,
    HorizonBudget,
    InsufficientSamplesError,
    conformal_level,
    conformal_min_samples,
    delta_for_horizon,
    hoeffding_epsilon,
    hoeffding_min_samples,
    horizon_guarantee,
    safety_probability_bound,
    scenario_beta,
    scenario_min_samples,
    scenario_sufficient_samples,
)
from pcbf.moments import quantile_rank

mp.mp.dps = 50


def mp_tail(N, delta, dim):
    d = mp.mpf(delta)
    return sum(mp.binomial(N, i) * d**i * (1 - d) ** (N - i) for i in range(dim))


def test_delta_for_horizon_examples():
    assert delta_for_horizon(0.3, 1) == pytest.approx(0.3, rel=1e-15)
    oracle = 1 - (1 - mp.mpf("0.1")) ** (mp.mpf(1) / 20)
    assert delta_for_horizon(0.1, 20) == pytest.approx(float(oracle), rel=1e-14)
    assert abs(delta_for_horizon(0.1, 20) - 0.0052540) < 5e-7
    assert delta_for_horizon(1e-300, 5) < 1e-299


@given(st.floats(1e-6, 0.999), st.integers(1, 10_000))
def test_delta_for_horizon_tight(eps, H):
    d = delta_for_horizon(eps, H)
    assert safety_probability_bound(d, H) == pytest.approx(1 - eps, rel=1e-12)


def test_safety_probability_bound_examples():
    assert safety_probability_bound(0.1, 20) == pytest.approx(0.1216, abs=5e-5)
    assert safety_probability_bound(0.4, 0) == 1.0
    assert safety_probability_bound(0.0, 7) == 1.0
    with pytest.raises(ValueError):
        safety_probability_bound(1.0, 3)


def test_hoeffding_examples():
    beta = 2 * math.exp(-2)
    eps = hoeffding_epsilon(1, beta, 0.0, 1.0)
    assert eps == pytest.approx(1.0, rel=1e-14)
    # plug back into the inequality: beta >= 2 exp(-2 N eps^2 / (b-a)^2), tight
    assert 2 * math.exp(-2 * 1 * eps**2) == pytest.approx(beta, rel=1e-14)
    assert hoeffding_epsilon(10**12, 0.01, 0, 1) < 1e-5
    with pytest.raises(ValueError):
        hoeffding_epsilon(5, 0.01, 1.0, 1.0)


@given(st.integers(1, 10**6), st.floats(1e-6, 0.99), st.floats(-5, 5), st.floats(1e-3, 10))
def test_hoeffding_roundtrip(N, beta, a, width):
    eps = hoeffding_epsilon(N, beta, a, a + width)
    n = hoeffding_min_samples(eps, beta, a, a + width)
    assert n <= N
    # and n is minimal: one fewer sample would need a larger slack
    if n > 1:
        assert hoeffding_epsilon(n - 1, beta, a, a + width) > eps * (1 - 1e-12)


def test_scenario_examples():
    assert scenario_sufficient_samples(0.1, 0.01, 3) == 153
    assert int(mp.ceil(20 * (mp.log(100) + 3))) == 153
    exact, suff = scenario_min_samples(0.1, 0.01, 3)
    assert suff == 153 and exact <= suff
    assert mp_tail(exact, 0.1, 3) <= 0.01 < mp_tail(exact - 1, 0.1, 3)
    # single-term tail
    for delta, beta in [(0.1, 0.01), (0.05, 0.2), (0.3, 1e-6)]:
        assert scenario_beta(17, delta, 1) == pytest.approx((1 - delta) ** 17, rel=1e-12)
        expected = math.ceil(math.log(beta) / math.log(1 - delta))
        assert scenario_min_samples(delta, beta, 1)[0] == expected


def test_scenario_beta_large_n():
    val = scenario_beta(10**6, 1e-5, 4)
    assert val == pytest.approx(float(mp_tail(10**6, 1e-5, 4)), rel=1e-9)
    assert scenario_beta(2, 0.1, 3) == 1.0


@given(st.floats(0.005, 0.5), st.floats(1e-8, 0.5), st.integers(1, 12))
def test_scenario_min_samples_oracle(delta, beta, dim):
    exact, suff = scenario_min_samples(delta, beta, dim)
    assert exact <= suff
    assert scenario_beta(suff, delta, dim) <= beta
    assert mp_tail(exact, delta, dim) <= beta * (1 + 1e-9)
    if exact > dim:
        assert mp_tail(exact - 1, delta, dim) > beta * (1 - 1e-9)


@given(st.integers(1, 2000), st.floats(0.01, 0.5), st.integers(1, 6))
def test_scenario_beta_monotone(N, delta, dim):
    assert scenario_beta(N + 1, delta, dim) <= scenario_beta(N, delta, dim) * (1 + 1e-12)
    assert scenario_beta(N, delta, dim + 1) >= scenario_beta(N, delta, dim) * (1 - 1e-12)


def test_conformal_examples():
    oracle = mp.mpf("0.9") + mp.sqrt(mp.log(100) / 600)
    assert conformal_level(0.1, 0.01, 300) == pytest.approx(float(oracle), rel=1e-14)
    assert abs(conformal_level(0.1, 0.01, 300) - 0.98762) < 2e-5
    with pytest.raises(InsufficientSamplesError):
        conformal_level(0.01, 0.01, 10)
    assert conformal_level(0.2, 1 - 1e-15, 5) == pytest.approx(0.8, abs=1e-7)


@given(st.floats(0.01, 0.5), st.floats(1e-6, 0.5), st.integers(1, 10**5))
def test_conformal_level_decreasing(delta, beta, N):
    try:
        big = conformal_level(delta, beta, N)
    except InsufficientSamplesError:
        return
    assert conformal_level(delta, beta, N + 1) <= big


def test_conformal_min_samples():
    N = conformal_min_samples(0.1, 0.01)
    level = conformal_level(0.1, 0.01, N)
    assert quantile_rank(N, level) <= N
    for n in range(1, N):
        try:
            lv = conformal_level(0.1, 0.01, n)
        except InsufficientSamplesError:
            continue
        assert quantile_rank(n, lv) > n


def test_horizon_guarantee_examples():
    rep = horizon_guarantee(HorizonBudget(0.1, 20))
    assert rep.delta_step == pytest.approx(0.00525, abs=5e-6)
    assert rep.safety_bound == pytest.approx(0.9, rel=1e-12)
    assert any("delta_step" in line for line in rep.lines())
    rep = horizon_guarantee(HorizonBudget(0.1, 1, beta_total=0.05), mode="data")
    assert rep.beta_step == 0.05
    assert rep.confidence == pytest.approx(0.95)
    bad = 2 * delta_for_horizon(0.1, 20)
    with pytest.raises(BudgetError, match="exceeds"):
        horizon_guarantee(HorizonBudget(0.1, 20, delta_step=bad))
    with pytest.raises(BudgetError):
        horizon_guarantee(HorizonBudget(0.1, 20, beta_total=0.1, beta_step=0.01), mode="data")
    with pytest.raises(BudgetError):
        horizon_guarantee(HorizonBudget(0.1, 20), mode="data")


def test_input_validation():
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            delta_for_horizon(bad, 3)
    with pytest.raises(ValueError):
        delta_for_horizon(0.1, 0)
    with pytest.raises(ValueError):
        HorizonBudget(0.1, 0)
