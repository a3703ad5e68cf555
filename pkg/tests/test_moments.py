import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcbf.core import DimensionError, QuadraticBarrier, delta_h
from pcbf.moments import (
    DisturbanceDataset,
    GaussianDisturbance,
    UnsupportedModelError,
    corridor_disturbance,
    delta_h_moments,
    empirical_quantile,
    load_dataset,
    next_state_moments,
    quantile_rank,
    rng_stream,
    sample,
    save_dataset,
)


def frac_quantile(values, delta):
    """Exact-arithmetic oracle on the decimal value of delta."""
    vals = sorted(values) + [math.inf]
    k = len(values)
    pos = (k + 1) * (1 - Fraction(str(delta)))
    p = pos.numerator // pos.denominator + (pos.numerator % pos.denominator != 0)
    p = max(p, 1)
    return vals[p - 1]


def test_corridor_moment_example(dyn, corridor):
    m = delta_h_moments(dyn, corridor, 0.01, np.zeros(3), np.zeros(3), corridor_disturbance(0.06))
    assert m.mean_dh == pytest.approx(0.25 - 0.0036 - 0.0025, abs=1e-15)
    assert m.var_dh == pytest.approx(2 * 0.06**4, rel=1e-12)


def test_moments_monte_carlo(dyn, rng):
    A = rng.normal(size=(3, 3))
    h = QuadraticBarrier(0.4, rng.normal(size=3), -(A @ A.T) / 3)
    L = rng.normal(size=(3, 3)) * 0.1
    dist = GaussianDisturbance(rng.normal(size=3) * 0.05, L @ L.T)
    x, u = rng.normal(size=3), rng.normal(size=3)
    m = delta_h_moments(dyn, h, 0.3, x, u, dist)
    D = sample(dist, 200_000, seed=7).samples
    a, B = dyn.parts(x)
    vals = h.values(a + B @ u + D) - 0.3 * h(x)
    se = vals.std() / math.sqrt(vals.size)
    assert abs(vals.mean() - m.mean_dh) < 4 * se
    # variance of the sample variance ~ (mu4 - var^2) / n
    se_var = math.sqrt(np.mean((vals - vals.mean()) ** 4) - vals.var() ** 2) / math.sqrt(vals.size)
    assert abs(vals.var() - m.var_dh) < 4 * se_var


def test_moments_point_mass_equals_delta_h(dyn, corridor):
    dist = GaussianDisturbance([0.0, 0.05, 0.0], np.zeros((3, 3)))
    m = delta_h_moments(dyn, corridor, 0.2, [0, 0.1, 0.3], [0.2, -0.1, 0], dist)
    assert m.var_dh == 0.0
    assert m.mean_dh == pytest.approx(delta_h(dyn, corridor, 0.2, [0, 0.1, 0.3], [0.2, -0.1, 0], [0, 0.05, 0]))


def test_unsupported_model(dyn, corridor):
    with pytest.raises(UnsupportedModelError):
        delta_h_moments(dyn, corridor, 0.1, np.zeros(3), np.zeros(3), DisturbanceDataset(np.zeros((3, 3))))


def test_disturbance_validation():
    with pytest.raises(ValueError):
        GaussianDisturbance([0, 0], [[1, 0], [0, -1]])
    with pytest.raises(DimensionError):
        GaussianDisturbance([0, 0], np.eye(3))
    with pytest.raises(ValueError):
        corridor_disturbance(-0.1)


def test_next_state_moments(dyn):
    dist = GaussianDisturbance([0.1, 0, 0], np.diag([1.0, 2.0, 3.0]))
    mean, cov = next_state_moments(dyn, np.zeros(3), [1.0, 0, 0], dist)
    np.testing.assert_allclose(mean, [0.2, 0, 0])
    np.testing.assert_allclose(cov, np.diag([1.0, 2.0, 3.0]))


def test_sampling_reproducible_and_degenerate():
    dist = corridor_disturbance(0.3)
    a, b = sample(dist, 100, seed=3), sample(dist, 100, seed=3)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, sample(dist, 100, seed=4).samples)
    point = GaussianDisturbance([1.0, 2.0], np.zeros((2, 2)))
    assert np.all(sample(point, 10, seed=0).samples == [1.0, 2.0])


def test_sample_mean_clt():
    dist = GaussianDisturbance([0.5, -1.0], [[1.0, 0.3], [0.3, 0.5]])
    D = sample(dist, 100_000, seed=11).samples
    se = np.sqrt(np.diag(dist.cov) / D.shape[0])
    assert np.all(np.abs(D.mean(axis=0) - dist.mean) < 4 * se)
    np.testing.assert_allclose(np.cov(D.T), dist.cov, atol=0.02)


def test_rng_streams_independent_of_order():
    first = rng_stream(5, 0, 3).standard_normal(4)
    _ = rng_stream(5, 0, 1).standard_normal(100)
    again = rng_stream(5, 0, 3).standard_normal(4)
    assert np.array_equal(first, again)
    assert not np.array_equal(first, rng_stream(5, 0, 4).standard_normal(4))


def test_quantile_examples():
    assert empirical_quantile([-3, -1, 2, 5], 0.5) == 2
    assert empirical_quantile([-3, -1, 2, 5], 0.1) == math.inf
    assert empirical_quantile([7.0], 0.5) == 7.0
    with pytest.raises(ValueError):
        empirical_quantile([], 0.1)
    with pytest.raises(ValueError):
        empirical_quantile([1.0], 0.0)


def test_quantile_round_off_case():
    # (k+1)(1 - 0.7) is 3.0000000000000004 in binary floating point
    vals = list(range(9))
    assert empirical_quantile(vals, 0.7) == frac_quantile(vals, 0.7) == 2


@given(st.lists(st.integers(-50, 50), min_size=1, max_size=12), st.integers(1, 99))
def test_quantile_matches_fraction_oracle(values, pct):
    delta = pct / 100
    assert empirical_quantile(values, delta) == frac_quantile(values, delta)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(0.01, 0.99))
def test_quantile_monotone_in_delta(values, delta):
    lo = empirical_quantile(values, delta)
    hi = empirical_quantile(values, max(0.005, delta / 2))
    assert hi >= lo


def test_quantile_rank_clamped():
    assert quantile_rank(4, 1.0) == 5
    assert quantile_rank(4, 0.0) == 1
    with pytest.raises(ValueError):
        quantile_rank(0, 0.5)


def test_dataset_roundtrip(tmp_path):
    D = sample(corridor_disturbance(0.06), 25, seed=1)
    path = tmp_path / "d.txt"
    save_dataset(path, D)
    E = load_dataset(path)
    assert np.array_equal(D.samples, E.samples)
    bad = tmp_path / "bad.txt"
    bad.write_text("# d=3 n=2\n1 2 3\n4 5\n")
    with pytest.raises(ValueError):
        load_dataset(bad)
    bad.write_text("# d=3 n=5\n1 2 3\n")
    with pytest.raises(ValueError):
        load_dataset(bad)
