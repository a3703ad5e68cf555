"""Dynamics, quadratic barriers and the barrier increment.

States, controls and disturbances are plain 1-D float arrays.  The only
dynamics class is control-affine with an additive disturbance,

    F(x, u, d) = a(x) + B(x) u + d,

and barriers are quadratics ``h(x) = c0 + g'x + x'Qx`` so that curvature
bounds, global maxima and moments are available in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels

__all__ = [
    "DimensionError",
    "ControlAffineDynamics",
    "QuadraticBarrier",
    "ScalarStructure",
    "as_vector",
    "unicycle",
    "corridor_barrier",
    "corridor_nominal",
    "step",
    "barrier_eval",
    "barrier_grad",
    "barrier_hess",
    "delta_h",
    "in_safe_set",
]

_EIG_TOL = 1e-12


class DimensionError(ValueError):
    """Raised when vector or matrix shapes do not match."""


def as_vector(v, size: int | None = None, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-D, got shape {arr.shape}")
    if size is not None and arr.size != size:
        raise DimensionError(f"{name} must have length {size}, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True)
class ControlAffineDynamics:
    """One-step map ``x+ = a(x) + B(x) u + d``."""

    drift: Callable[[np.ndarray], np.ndarray]
    input_map: Callable[[np.ndarray], np.ndarray]
    n: int
    m: int
    name: str = "control-affine"

    @property
    def d(self) -> int:
        return self.n

    def parts(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(a(x), B(x))`` with shape checks."""
        x = as_vector(x, self.n, "state")
        a = np.asarray(self.drift(x), dtype=np.float64)
        B = np.asarray(self.input_map(x), dtype=np.float64)
        if a.shape != (self.n,) or B.shape != (self.n, self.m):
            raise DimensionError("drift/input_map returned wrong shapes")
        return a, B


def unicycle(dt: float = 0.1) -> ControlAffineDynamics:
    """Planar body-velocity kinematics: ``x+ = x + dt R(theta) u + d``.

    State ``[x, y, theta]``, input ``[v_x, v_y, omega]`` in the body frame.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")

    def drift(x):
        return x.copy()

    def input_map(x):
        c, s = math.cos(x[2]), math.sin(x[2])
        return dt * np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    return ControlAffineDynamics(drift, input_map, n=3, m=3, name=f"unicycle(dt={dt})")


@dataclass(frozen=True)
class ScalarStructure:
    """``h(z) = c0 + gamma * t + kappa * t**2`` with ``t = v'z``, ``|v| = 1``."""

    v: np.ndarray
    c0: float
    gamma: float
    kappa: float

    def value(self, t):
        return self.c0 + self.gamma * t + self.kappa * t * t


@dataclass(frozen=True)
class QuadraticBarrier:
    """Safety function ``h(x) = c0 + g'x + x'Qx`` with safe set ``h >= 0``.

    Derived attributes: ``lam`` bounds the spectral norm of the Hessian
    ``2Q``; ``sup_h`` is the global maximum (``inf`` when unbounded);
    ``convexity`` is one of ``affine``, ``convex``, ``concave``,
    ``indefinite``.
    """

    c0: float
    g: np.ndarray
    Q: np.ndarray
    lam: float = field(init=False)
    sup_h: float = field(init=False)
    convexity: str = field(init=False)

    def __post_init__(self):
        g = as_vector(self.g, name="g")
        Q = np.asarray(self.Q, dtype=np.float64)
        if Q.shape != (g.size, g.size):
            raise DimensionError("Q must be n x n with n = len(g)")
        if not np.allclose(Q, Q.T, atol=1e-12, rtol=0):
            raise ValueError("Q must be symmetric")
        Q = 0.5 * (Q + Q.T)
        g.setflags(write=False)
        Q.setflags(write=False)
        object.__setattr__(self, "c0", float(self.c0))
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "Q", Q)

        eig = np.linalg.eigvalsh(Q) if g.size else np.zeros(0)
        scale = max(1.0, float(np.max(np.abs(eig), initial=0.0)))
        tol = _EIG_TOL * scale
        if np.all(np.abs(eig) <= tol):
            kind = "affine"
        elif np.all(eig <= tol):
            kind = "concave"
        elif np.all(eig >= -tol):
            kind = "convex"
        else:
            kind = "indefinite"
        object.__setattr__(self, "convexity", kind)
        object.__setattr__(self, "lam", 2.0 * float(np.max(np.abs(eig), initial=0.0)))
        object.__setattr__(self, "sup_h", _sup_quadratic(self.c0, g, Q, kind))

    @property
    def n(self) -> int:
        return self.g.size

    @property
    def is_concave(self) -> bool:
        return self.convexity in ("affine", "concave")

    @property
    def is_convex(self) -> bool:
        return self.convexity in ("affine", "convex")

    def __call__(self, x) -> float:
        return barrier_eval(self, x)

    def values(self, Z) -> np.ndarray:
        """Vectorised ``h`` over the rows of ``Z``."""
        return kernels.quadratic_values(Z, self.c0, self.g, self.Q)

    def scalar_structure(self) -> ScalarStructure | None:
        """Detect ``h(z) = c0 + gamma t + kappa t^2`` with ``t = v'z``.

        Holds when ``Q`` has rank <= 1 and ``g`` is parallel to its range.
        Constant barriers return ``None``.
        """
        w, V = np.linalg.eigh(self.Q)
        scale = max(1.0, float(np.max(np.abs(w), initial=0.0)))
        nz = np.abs(w) > _EIG_TOL * scale
        if nz.sum() > 1:
            return None
        gnorm = float(np.linalg.norm(self.g))
        if nz.sum() == 1:
            v = V[:, np.argmax(nz)]
            kappa = float(w[nz][0])
            gamma = float(v @ self.g)
            if np.linalg.norm(self.g - gamma * v) > 1e-12 * max(1.0, gnorm):
                return None
        else:
            if gnorm == 0.0:
                return None
            v = self.g / gnorm
            kappa, gamma = 0.0, gnorm
        # fix sign so the first nonzero entry is positive
        lead = v[np.argmax(np.abs(v) > 1e-12)]
        if lead < 0:
            v, gamma = -v, -gamma
        v = v.copy()
        v.setflags(write=False)
        return ScalarStructure(v=v, c0=self.c0, gamma=gamma, kappa=kappa)


def _sup_quadratic(c0, g, Q, kind) -> float:
    if kind == "affine":
        return c0 if not np.any(g) else math.inf
    if kind != "concave":
        return math.inf
    # maximiser solves 2Qx = -g; bounded iff g lies in range(Q)
    x, *_ = np.linalg.lstsq(2.0 * Q, -g, rcond=None)
    if np.linalg.norm(2.0 * Q @ x + g) > 1e-9 * max(1.0, np.linalg.norm(g)):
        return math.inf
    return float(c0 + g @ x + x @ Q @ x)


def corridor_barrier(half_width: float = 0.5) -> QuadraticBarrier:
    """``h(x) = half_width^2 - y^2`` on the unicycle state ``[x, y, theta]``."""
    return QuadraticBarrier(
        c0=half_width**2, g=np.zeros(3), Q=np.diag([0.0, -1.0, 0.0])
    )


def corridor_nominal(x) -> np.ndarray:
    """Nominal corridor controller ``[0.2, 0, -theta]``."""
    return np.array([0.2, 0.0, 0.0 - float(x[2])])  # 0.0 - 0.0 is +0.0


def step(dyn: ControlAffineDynamics, x, u, d) -> np.ndarray:
    a, B = dyn.parts(x)
    u = as_vector(u, dyn.m, "control")
    d = as_vector(d, dyn.n, "disturbance")
    return a + B @ u + d


def barrier_eval(h: QuadraticBarrier, x) -> float:
    x = as_vector(x, h.n, "state")
    return float(h.c0 + h.g @ x + x @ h.Q @ x)


def barrier_grad(h: QuadraticBarrier, x) -> np.ndarray:
    x = as_vector(x, h.n, "state")
    return h.g + 2.0 * h.Q @ x


def barrier_hess(h: QuadraticBarrier, x=None) -> np.ndarray:
    if x is not None:
        as_vector(x, h.n, "state")
    return 2.0 * np.array(h.Q)


def delta_h(dyn: ControlAffineDynamics, h: QuadraticBarrier, alpha: float, x, u, d) -> float:
    """Barrier increment ``h(F(x, u, d)) - alpha h(x)``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if h.n != dyn.n:
        raise DimensionError("barrier and dynamics dimensions differ")
    return barrier_eval(h, step(dyn, x, u, d)) - alpha * barrier_eval(h, x)


def in_safe_set(h: QuadraticBarrier, x) -> bool:
    return barrier_eval(h, x) >= 0.0
