import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcbf.core import (
    DimensionError,
    QuadraticBarrier,
    barrier_eval,
    barrier_grad,
    barrier_hess,
    corridor_barrier,
    corridor_nominal,
    delta_h,
    in_safe_set,
    step,
    unicycle,
)

finite = st.floats(-3, 3, allow_nan=False)


def test_unicycle_step_nominal(dyn):
    x = np.zeros(3)
    np.testing.assert_allclose(step(dyn, x, corridor_nominal(x), np.zeros(3)), [0.02, 0.0, 0.0])


def test_unicycle_rotation_oracle(dyn):
    # body-frame forward velocity at heading pi/2 moves the robot along +y
    x = np.array([1.0, 2.0, math.pi / 2])
    nxt = step(dyn, x, [1.0, 0.0, 0.5], np.zeros(3))
    np.testing.assert_allclose(nxt, [1.0, 2.1, math.pi / 2 + 0.05], atol=1e-15)


def test_step_shape_errors(dyn):
    with pytest.raises(DimensionError):
        step(dyn, np.zeros(2), np.zeros(3), np.zeros(3))
    with pytest.raises(DimensionError):
        step(dyn, np.zeros(3), np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        step(dyn, [0, np.nan, 0], np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        unicycle(0.0)


def test_corridor_barrier_attributes(corridor):
    assert corridor.lam == 2.0
    assert corridor.sup_h == 0.25
    assert corridor.convexity == "concave"
    assert corridor.is_concave and not corridor.is_convex


def test_delta_h_example(dyn, corridor):
    # h(next) = 0.25 - 0.01 and alpha h(x) = 0.01 * 0.25
    val = delta_h(dyn, corridor, 0.01, [0, 0, 0], [0, 0, 0], [0, 0.1, 0])
    assert val == pytest.approx(0.24 - 0.0025, abs=1e-15)
    # oracle: compose step and barrier_eval by hand
    nxt = step(dyn, [0, 0, 0], [0, 0, 0], [0, 0.1, 0])
    assert val == pytest.approx(barrier_eval(corridor, nxt) - 0.01 * barrier_eval(corridor, [0, 0, 0]))


def test_delta_h_alpha_range(dyn, corridor):
    with pytest.raises(ValueError):
        delta_h(dyn, corridor, 1.5, np.zeros(3), np.zeros(3), np.zeros(3))


def test_safe_set_membership(corridor):
    assert in_safe_set(corridor, [0, 0, 0])
    assert in_safe_set(corridor, [0, 0.5, 0])
    assert not in_safe_set(corridor, [0, 0.51, 0])
    assert barrier_eval(corridor, [0, 0.51, 0]) == pytest.approx(-0.0101)


def test_barrier_classification():
    assert QuadraticBarrier(1.0, [1, 2], np.zeros((2, 2))).convexity == "affine"
    assert QuadraticBarrier(0.0, [0, 0], np.eye(2)).convexity == "convex"
    assert QuadraticBarrier(0.0, [0, 0], np.diag([1.0, -1.0])).convexity == "indefinite"
    assert math.isinf(QuadraticBarrier(0.0, [0, 0], np.eye(2)).sup_h)
    # concave with g outside the range of Q is unbounded above
    assert math.isinf(QuadraticBarrier(0.0, [1, 0], np.diag([0.0, -1.0])).sup_h)
    with pytest.raises(ValueError):
        QuadraticBarrier(0.0, [0, 0], [[0, 1], [0, 0]])
    with pytest.raises(DimensionError):
        QuadraticBarrier(0.0, [0, 0, 0], np.eye(2))


@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3))
def test_gradient_matches_finite_difference(x, direction):
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    h = QuadraticBarrier(0.3, rng.normal(size=3), A + A.T)
    x, v = np.array(x), np.array(direction)
    eps = 1e-6
    fd = (barrier_eval(h, x + eps * v) - barrier_eval(h, x - eps * v)) / (2 * eps)
    assert barrier_grad(h, x) @ v == pytest.approx(fd, rel=1e-6, abs=1e-7)
    np.testing.assert_allclose(barrier_hess(h), 2 * (A + A.T))


@given(st.floats(0.01, 10), st.floats(-5, 5))
def test_sup_h_is_global_max(width, probe):
    h = corridor_barrier(width)
    assert h.sup_h == pytest.approx(width**2)
    assert barrier_eval(h, [0, probe, 0]) <= h.sup_h


def test_scalar_structure(corridor):
    st_ = corridor.scalar_structure()
    np.testing.assert_allclose(st_.v, [0, 1, 0])
    assert (st_.c0, st_.gamma, st_.kappa) == (0.25, 0.0, -1.0)
    assert QuadraticBarrier(0.0, [0, 0], -np.eye(2)).scalar_structure() is None
    assert QuadraticBarrier(1.0, [0, 0], np.zeros((2, 2))).scalar_structure() is None


def test_values_vectorised_matches_scalar(corridor, rng):
    Z = rng.normal(size=(50, 3))
    np.testing.assert_allclose(corridor.values(Z), [barrier_eval(corridor, z) for z in Z], atol=1e-14)
