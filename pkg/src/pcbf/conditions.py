"""Sufficient conditions for the probabilistic CBF inequality, expressed as
constraints on the control input at a fixed state.

Every builder returns a :class:`FilterConstraint` whose ``margin(u) >= 0``
is the condition.  Quadratic conditions carry their coefficients so the
solvers can exploit concavity; when the barrier depends on the state
through a single direction (the corridor), the constraint also carries
an exact one-dimensional reduction.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import kernels
from .cert import conformal_level, hoeffding_epsilon
from .core import ControlAffineDynamics, QuadraticBarrier, as_vector, barrier_eval
from .moments import (
    DisturbanceDataset,
    GaussianDisturbance,
    UnsupportedModelError,
    quantile_rank,
)

log = logging.getLogger(__name__)

__all__ = [
    "ParameterError",
    "PreconditionError",
    "ConditionParams",
    "QuadraticSet",
    "ScalarForm",
    "FilterConstraint",
    "ConditionModel",
    "quadratic_constraint",
    "affine_constraint",
    "detect_scalar_form",
    "build_markov_expectation",
    "build_markov_jensen_convex",
    "build_markov_jensen_gap",
    "build_cantelli",
    "build_cantelli_jensen",
    "build_hoeffding",
    "build_scenario",
    "build_conformal",
    "hoeffding_range",
]

KINDS = ("affine", "concave-quadratic", "general-smooth", "quantile-of-set")


class ParameterError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class ConditionParams:
    """Tuning constants shared by the condition builders.

    ``b`` is the almost-sure upper bound on the barrier increment; when it
    is ``None`` the builders use ``sup_h`` of the barrier (or the per-state
    ``sup_h - alpha h(x)`` when ``per_state_b`` is set).  ``a`` and
    ``epsilon_h`` are the Hoeffding range floor and slack; ``None`` means
    "derive" (see :func:`hoeffding_range`).
    """

    alpha: float = 0.01
    delta: float = 0.1
    beta: float = 0.01
    b: float | None = None
    a: float | None = None
    lam: float | None = None
    epsilon_h: float | None = None
    per_state_b: bool = False
    truncation: float = 6.0
    u_bound: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError("alpha must lie in [0, 1]")
        if not 0.0 < self.delta < 1.0:
            raise ParameterError("delta must lie in the open interval (0, 1)")
        if not 0.0 < self.beta < 1.0:
            raise ParameterError("beta must lie in the open interval (0, 1)")
        if self.b is not None and not self.b > 0:
            raise ParameterError("b must be positive")
        if self.a is not None and self.b is not None and not self.a < self.b:
            raise ParameterError("need a < b")
        if self.lam is not None and self.lam < 0:
            raise ParameterError("lambda must be non-negative")
        if self.epsilon_h is not None and self.epsilon_h < 0:
            raise ParameterError("epsilon_h must be non-negative")

    @property
    def cantelli_factor(self) -> float:
        return math.sqrt((1.0 - self.delta) / self.delta)


@dataclass(frozen=True)
class QuadraticSet:
    """Stack of margins ``u'P_i u + q_i'u + r_i``."""

    P: np.ndarray  # (k, m, m)
    q: np.ndarray  # (k, m)
    r: np.ndarray  # (k,)

    def __post_init__(self):
        P = np.ascontiguousarray(self.P, dtype=np.float64)
        q = np.ascontiguousarray(self.q, dtype=np.float64)
        r = np.ascontiguousarray(self.r, dtype=np.float64)
        if P.ndim == 2:
            P = np.ascontiguousarray(np.broadcast_to(P, (q.shape[0],) + P.shape))
        k, m = q.shape
        if P.shape != (k, m, m) or r.shape != (k,):
            raise ValueError("inconsistent quadratic set shapes")
        P = 0.5 * (P + P.transpose(0, 2, 1))
        for arr in (P, q, r):
            arr.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)

    @property
    def k(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.q.shape[1]

    def values(self, u) -> np.ndarray:
        return kernels.quadratic_margins(self.P, self.q, self.r, u)

    def gradients(self, u) -> np.ndarray:
        return 2.0 * (self.P @ np.asarray(u, dtype=float)) + self.q

    def subset(self, idx) -> "QuadraticSet":
        idx = np.asarray(idx, dtype=np.int64)
        return QuadraticSet(self.P[idx], self.q[idx], self.r[idx])

    def shifted(self, t: float) -> "QuadraticSet":
        return QuadraticSet(self.P, self.q, self.r - t)

    @staticmethod
    def concat(sets) -> "QuadraticSet":
        sets = list(sets)
        return QuadraticSet(
            np.concatenate([s.P for s in sets]),
            np.concatenate([s.q for s in sets]),
            np.concatenate([s.r for s in sets]),
        )

    def is_affine(self, tol=1e-14) -> bool:
        return bool(np.all(np.abs(self.P) <= tol))

    def is_concave(self, tol=1e-12) -> bool:
        if self.is_affine():
            return True
        w = np.linalg.eigvalsh(self.P)
        return bool(np.all(w <= tol * max(1.0, np.abs(w).max())))


@dataclass(frozen=True)
class ScalarForm:
    """Margins that depend on ``u`` only through ``s = w'u`` (``|w| = 1``).

    Quadratic components: ``A_i s^2 + b_i s + c_i``.  A smooth component
    is a concave callable ``phi(s)``.
    """

    w: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    c: np.ndarray | None = None
    phi: Callable[[float], float] | None = None

    def values(self, s: float) -> np.ndarray:
        if self.phi is not None:
            return np.array([self.phi(s)])
        return (self.A * s + self.b) * s + self.c


@dataclass(frozen=True)
class FilterConstraint:
    """``margin(u) >= 0`` encodes one sufficient condition at a fixed state.

    ``kind`` is one of ``affine``, ``concave-quadratic``, ``general-smooth``
    or ``quantile-of-set``.  Quadratic kinds hold their component margins
    in ``quad``; the constraint holds when every component is
    non-negative, except for ``quantile-of-set`` where at least
    ``required`` components must be (residuals are ``-margin_i``).
    """

    kind: str
    m: int
    quad: QuadraticSet | None = None
    func: Callable[[np.ndarray], float] | None = None
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    required: int | None = None
    scalar: ScalarForm | None = None
    label: str = ""
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == "general-smooth":
            if self.func is None:
                raise ValueError("general-smooth constraint needs func")
        elif self.quad is None:
            raise ValueError(f"{self.kind} constraint needs quadratic data")
        if self.kind == "quantile-of-set":
            if self.required is None or not 1 <= self.required <= self.quad.k:
                raise ValueError("quantile-of-set needs 1 <= required <= N")

    @property
    def count(self) -> int:
        return 1 if self.quad is None else self.quad.k

    def margins(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "general-smooth":
            return np.array([float(self.func(u))])
        return self.quad.values(u)

    def residuals(self, u) -> np.ndarray:
        return -self.margins(u)

    def margin(self, u) -> float:
        vals = self.margins(u)
        if self.kind == "quantile-of-set":
            # p-th largest margin == -(p-th smallest residual)
            return float(-np.partition(-vals, self.required - 1)[self.required - 1])
        return float(vals.min())

    def satisfied(self, u, tol: float = 0.0) -> bool:
        return self.margin(u) >= -tol


ConditionModel = GaussianDisturbance


def quadratic_constraint(P, q, r, label="quadratic") -> FilterConstraint:
    """Single margin ``u'Pu + q'u + r`` (kind chosen from the curvature)."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    qs = QuadraticSet(np.asarray(P, dtype=float)[None], q[None], np.array([float(r)]))
    return _quad_constraint(qs, label)


def affine_constraint(a, c, label="affine") -> FilterConstraint:
    """``a'u - c >= 0``."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    return quadratic_constraint(np.zeros((a.size, a.size)), a, -float(c), label)


def _quad_constraint(qs: QuadraticSet, label, scalar=None, info=None) -> FilterConstraint:
    if qs.is_affine():
        kind = "affine"
    elif qs.is_concave():
        kind = "concave-quadratic"
    else:
        raise PreconditionError(f"{label}: margin is not concave in u")
    return FilterConstraint(kind, qs.m, quad=qs, scalar=scalar, label=label, info=info or {})


def detect_scalar_form(qs: QuadraticSet, rtol: float = 1e-10) -> ScalarForm | None:
    """Numerically detect a common direction ``w`` with every ``P_i`` a
    multiple of ``ww'`` and every ``q_i`` a multiple of ``w``."""
    m = qs.m
    M = np.concatenate([qs.P.reshape(-1, m), qs.q])
    scale = np.abs(M).max(initial=0.0)
    if scale == 0.0:
        w = np.zeros(m)
        w[0] = 1.0
    else:
        _, sv, Vt = np.linalg.svd(M, full_matrices=False)
        if sv.size > 1 and sv[1] > rtol * sv[0]:
            return None
        w = Vt[0]
    return _scalar_from_direction(qs, w)


def _scalar_from_direction(qs: QuadraticSet, w) -> ScalarForm:
    w = np.asarray(w, dtype=float)
    w = w / np.linalg.norm(w)
    lead = w[np.argmax(np.abs(w) > 1e-12)]
    if lead < 0:
        w = -w
    w.setflags(write=False)
    A = np.einsum("i,kij,j->k", w, qs.P, w)
    b = qs.q @ w
    return ScalarForm(w=w, A=A, b=b, c=np.array(qs.r))


# ---------------------------------------------------------------------------
# shared pieces


def _state_parts(dyn, h, x):
    x = as_vector(x, dyn.n, "state")
    a, B = dyn.parts(x)
    return x, a, B, barrier_eval(h, x)


def _b_value(h: QuadraticBarrier, params: ConditionParams, hx: float) -> float:
    if params.b is not None:
        return params.b
    if not math.isfinite(h.sup_h):
        raise ParameterError("barrier is unbounded above; supply b explicitly")
    b = h.sup_h - params.alpha * max(hx, 0.0) if params.per_state_b else h.sup_h
    if not b > 0:
        raise ParameterError(f"derived b={b!r} is not positive")
    return b


def _quad_in_u(h: QuadraticBarrier, B, y0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Coefficients of ``u -> h(y0 + B u)`` for each row of ``y0``.

    Returns ``(P, q, h(y0))`` with ``P = B'QB`` shared by every row.
    """
    y0 = np.atleast_2d(y0)
    P = B.T @ h.Q @ B
    q = (h.g + 2.0 * y0 @ h.Q) @ B
    return P, q, h.values(y0)


def _scalar_direction(h: QuadraticBarrier, B):
    st = h.scalar_structure()
    if st is None:
        return None, None
    w = B.T @ st.v
    return st, w


def _attach_scalar(qs: QuadraticSet, h, B) -> ScalarForm | None:
    st, w = _scalar_direction(h, B)
    if st is None:
        return None
    if np.linalg.norm(w) == 0.0:
        w = np.eye(qs.m)[0]
    return _scalar_from_direction(qs, w)


def _gaussian(model) -> GaussianDisturbance:
    if not isinstance(model, GaussianDisturbance):
        raise UnsupportedModelError(
            f"moment-based conditions need a Gaussian model, got {type(model).__name__}"
        )
    return model


# ---------------------------------------------------------------------------
# moment-based conditions


def build_markov_expectation(
    dyn: ControlAffineDynamics, h: QuadraticBarrier, x, params: ConditionParams, model
) -> FilterConstraint:
    """``E[dh(x,u,d)] - b(1 - delta) >= 0`` with the exact Gaussian mean."""
    dist = _gaussian(model)
    x, a, B, hx = _state_parts(dyn, h, x)
    b = _b_value(h, params, hx)
    P, q, hm = _quad_in_u(h, B, a + dist.mean)
    r = hm[0] + float(np.trace(h.Q @ dist.cov)) - params.alpha * hx - b * (1.0 - params.delta)
    qs = QuadraticSet(P, q, np.array([r]))
    kind_ok = qs.is_concave()
    if not kind_ok:
        # exact expectation is a non-concave quadratic when h is not concave
        return FilterConstraint(
            "general-smooth", dyn.m,
            func=lambda u, qs=qs: float(qs.values(u)[0]),
            grad=lambda u, qs=qs: qs.gradients(u)[0],
            label="markov-expectation", info={"b": b, "quad": qs},
        )
    return _quad_constraint(qs, "markov-expectation", _attach_scalar(qs, h, B), {"b": b})


def build_markov_jensen_convex(
    dyn: ControlAffineDynamics, h: QuadraticBarrier, x, params: ConditionParams, model
) -> FilterConstraint:
    """``h(E[F]) - alpha h(x) - b(1 - delta) >= 0`` for convex ``h``.

    The margin is a convex quadratic in ``u``; it is returned as a
    general-smooth constraint.
    """
    if not h.is_convex:
        raise PreconditionError("Jensen (convex) form needs a convex barrier")
    dist = _gaussian(model)
    x, a, B, hx = _state_parts(dyn, h, x)
    b = _b_value(h, params, hx)
    P, q, hm = _quad_in_u(h, B, a + dist.mean)
    qs = QuadraticSet(P, q, np.array([hm[0] - params.alpha * hx - b * (1.0 - params.delta)]))
    if qs.is_affine():
        return _quad_constraint(qs, "markov-jensen-convex", _attach_scalar(qs, h, B), {"b": b})
    return FilterConstraint(
        "general-smooth", dyn.m,
        func=lambda u: float(qs.values(u)[0]),
        grad=lambda u: qs.gradients(u)[0],
        label="markov-jensen-convex", info={"b": b, "quad": qs},
    )


def build_markov_jensen_gap(
    dyn: ControlAffineDynamics, h: QuadraticBarrier, x, params: ConditionParams, model
) -> FilterConstraint:
    """``h(E[F]) - alpha h(x) - (lam/2) tr Cov(F) - b(1 - delta) >= 0``.

    Needs a concave barrier; concave-quadratic in ``u`` for control-affine
    dynamics with additive noise.
    """
    if not h.is_concave:
        raise PreconditionError("Jensen-gap form needs a concave barrier")
    dist = _gaussian(model)
    lam = h.lam if params.lam is None else params.lam
    if lam < h.lam - 1e-12:
        raise PreconditionError(f"lambda={lam} is below the Hessian norm bound {h.lam}")
    x, a, B, hx = _state_parts(dyn, h, x)
    b = _b_value(h, params, hx)
    P, q, hm = _quad_in_u(h, B, a + dist.mean)
    r = hm[0] - params.alpha * hx - 0.5 * lam * float(np.trace(dist.cov)) - b * (1.0 - params.delta)
    qs = QuadraticSet(P, q, np.array([r]))
    return _quad_constraint(qs, "markov-jensen-gap", _attach_scalar(qs, h, B), {"b": b, "lam": lam})


class _CantelliMargin:
    """``mean(u) - k sqrt(var(u))`` with closed-form Gaussian moments.

    ``surrogate`` replaces the exact mean: ``"exact"``, ``"convex"``
    (``h(E[F]) - alpha h(x)``) or ``"concave-gap"`` (additionally minus
    ``(lam/2) tr Cov``).
    """

    def __init__(self, h, a, B, hx, dist, params, surrogate="exact", lam=None):
        self.Q, self.g, self.c0 = h.Q, h.g, h.c0
        self.a0 = a + dist.mean
        self.B = B
        self.S = dist.cov
        self.k = params.cantelli_factor
        QS = self.Q @ self.S
        self.var_const = 2.0 * float(np.trace(QS @ QS))
        if surrogate == "exact":
            self.mean_shift = float(np.trace(QS)) - params.alpha * hx
        elif surrogate == "convex":
            self.mean_shift = -params.alpha * hx
        elif surrogate == "concave-gap":
            self.mean_shift = -params.alpha * hx - 0.5 * lam * float(np.trace(self.S))
        else:
            raise ValueError(surrogate)

    def parts(self, u):
        m = self.a0 + self.B @ u
        gm = self.g + 2.0 * self.Q @ m
        mean = self.c0 + self.g @ m + m @ self.Q @ m + self.mean_shift
        var = float(gm @ self.S @ gm) + self.var_const
        if var < 0.0:
            warnings.warn(f"negative variance {var:.3g} clamped to zero", RuntimeWarning, stacklevel=3)
            var = 0.0
        return m, gm, float(mean), var

    def __call__(self, u) -> float:
        _, _, mean, var = self.parts(np.asarray(u, dtype=float))
        return mean - self.k * math.sqrt(var)

    def gradient(self, u) -> np.ndarray:
        _, gm, _, var = self.parts(np.asarray(u, dtype=float))
        dmean = self.B.T @ gm
        if var <= 1e-300:
            return dmean
        dvar = 4.0 * self.B.T @ (self.Q @ (self.S @ gm))
        return dmean - self.k * dvar / (2.0 * math.sqrt(var))

    def mean_var(self, u):
        _, _, mean, var = self.parts(np.asarray(u, dtype=float))
        return mean, var


def _cantelli_scalar(h, a, B, hx, dist, params, mean_shift) -> ScalarForm | None:
    st, w = _scalar_direction(h, B)
    if st is None or st.kappa > 0:
        return None
    wn = float(np.linalg.norm(w))
    w_unit = w / wn if wn > 0 else np.eye(B.shape[1])[0]
    lead = w_unit[np.argmax(np.abs(w_unit) > 1e-12)]
    if lead < 0:
        w_unit, wn_signed = -w_unit, -wn
    else:
        wn_signed = wn
    tau0 = float(st.v @ (a + dist.mean))
    nu2 = float(st.v @ dist.cov @ st.v)
    gamma, kappa, c0, k = st.gamma, st.kappa, st.c0, params.cantelli_factor

    def phi(s):
        tau = tau0 + wn_signed * s
        mean = c0 + gamma * tau + kappa * tau * tau + mean_shift
        var = (gamma + 2.0 * kappa * tau) ** 2 * nu2 + 2.0 * kappa * kappa * nu2 * nu2
        return mean - k * math.sqrt(max(var, 0.0))

    w_unit = np.array(w_unit)
    w_unit.setflags(write=False)
    return ScalarForm(w=w_unit, phi=phi)


def build_cantelli(
    dyn: ControlAffineDynamics, h: QuadraticBarrier, x, params: ConditionParams, model
) -> FilterConstraint:
    """``E[dh] - sqrt(Var(dh) (1 - delta)/delta) >= 0`` (exact Gaussian moments)."""
    dist = _gaussian(model)
    x, a, B, hx = _state_parts(dyn, h, x)
    fn = _CantelliMargin(h, a, B, hx, dist, params, "exact")
    scalar = None
    if h.is_concave:
        scalar = _cantelli_scalar(h, a, B, hx, dist, params, fn.mean_shift)
    return FilterConstraint(
        "general-smooth", dyn.m, func=fn, grad=fn.gradient, scalar=scalar,
        label="cantelli", info={"moments": fn},
    )


def build_cantelli_jensen(
    dyn: ControlAffineDynamics,
    h: QuadraticBarrier,
    x,
    params: ConditionParams,
    model,
    variant: str = "concave-gap",
) -> FilterConstraint:
    """Cantelli condition with the mean replaced by a Jensen surrogate.

    ``variant="convex"`` (convex ``h``) uses ``h(E[F]) - alpha h(x)``;
    ``variant="concave-gap"`` (concave ``h``) subtracts ``(lam/2) tr Cov``
    as well.  The variance term stays exact.
    """
    dist = _gaussian(model)
    if variant == "convex":
        if not h.is_convex:
            raise PreconditionError("convex variant needs a convex barrier")
        lam = None
    elif variant == "concave-gap":
        if not h.is_concave:
            raise PreconditionError("concave-gap variant needs a concave barrier")
        lam = h.lam if params.lam is None else params.lam
        if lam < h.lam - 1e-12:
            raise PreconditionError(f"lambda={lam} is below the Hessian norm bound {h.lam}")
    else:
        raise ValueError("variant must be 'convex' or 'concave-gap'")
    x, a, B, hx = _state_parts(dyn, h, x)
    fn = _CantelliMargin(h, a, B, hx, dist, params, variant, lam)
    scalar = None
    if h.is_concave:
        scalar = _cantelli_scalar(h, a, B, hx, dist, params, fn.mean_shift)
    return FilterConstraint(
        "general-smooth", dyn.m, func=fn, grad=fn.gradient, scalar=scalar,
        label=f"cantelli-jensen-{variant}", info={"moments": fn},
    )


# ---------------------------------------------------------------------------
# data-based conditions


def _dataset_rows(dataset, n):
    if isinstance(dataset, DisturbanceDataset):
        D = dataset.samples
    else:
        D = np.atleast_2d(np.asarray(dataset, dtype=float))
    if D.shape[0] == 0:
        raise ValueError("empty dataset")
    if D.shape[1] != n:
        raise ValueError(f"dataset rows must have length {n}")
    return D


def hoeffding_range(
    dyn: ControlAffineDynamics,
    h: QuadraticBarrier,
    x,
    params: ConditionParams,
    spread,
    center=None,
) -> tuple[float, float]:
    """Range ``[a, b]`` for the barrier increment used by the Hoeffding slack.

    A Gaussian increment is unbounded below, so ``a`` is the minimum of the
    increment over ``|u_j| <= u_bound`` and ``|d_j - center_j| <=
    truncation * spread_j``.  For a concave barrier the minimum is attained
    at a vertex of that box, so all vertices are enumerated.  ``b`` follows
    the same rule as the Markov bound.
    """
    if not h.is_concave:
        raise PreconditionError("automatic Hoeffding range needs a concave barrier")
    x, a0, B, hx = _state_parts(dyn, h, x)
    b = _b_value(h, params, hx)
    spread = np.asarray(spread, dtype=float)
    center = np.zeros(dyn.n) if center is None else np.asarray(center, dtype=float)
    half = np.concatenate([np.full(dyn.m, params.u_bound), params.truncation * spread])
    M = np.hstack([B, np.eye(dyn.n)])
    active = np.flatnonzero(half > 0)
    base = a0 + center
    if active.size == 0:
        zs = base[None]
    else:
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=active.size)))
        zs = base + (signs * half[active]) @ M[:, active].T
    a = float(h.values(zs).min()) - params.alpha * hx
    if not a < b:
        a = b - 1e-12
    return a, b


def build_hoeffding(
    dyn: ControlAffineDynamics,
    h: QuadraticBarrier,
    x,
    params: ConditionParams,
    dataset,
    spread=None,
) -> FilterConstraint:
    """``(1/N) sum_i dh(x,u,d_i) - epsilon_h - b(1 - delta) >= 0``.

    ``epsilon_h`` comes from ``params.epsilon_h`` or, when that is unset,
    from the Hoeffding bound with range ``[a, b]``.  If ``params.a`` is
    unset the range is derived by :func:`hoeffding_range` with ``spread``
    (per-coordinate scale of the disturbance; defaults to the sample
    standard deviation).
    """
    x, a0, B, hx = _state_parts(dyn, h, x)
    D = _dataset_rows(dataset, dyn.n)
    N = D.shape[0]
    b = _b_value(h, params, hx)
    if params.epsilon_h is not None:
        eps, a = params.epsilon_h, params.a
    else:
        if params.a is not None:
            a = params.a
        else:
            if spread is None:
                spread = D.std(axis=0)
            a, b = hoeffding_range(dyn, h, x, params, spread, D.mean(axis=0))
            log.debug("Hoeffding range derived at x=%s: a=%.6g b=%.6g", x, a, b)
        eps = hoeffding_epsilon(N, params.beta, a, b)
    P, q_rows, hvals = _quad_in_u(h, B, a0 + D)
    q = q_rows.mean(axis=0)
    r = float(hvals.mean()) - params.alpha * hx - eps - b * (1.0 - params.delta)
    qs = QuadraticSet(P, q[None], np.array([r]))
    return _quad_constraint(
        qs, "hoeffding", _attach_scalar(qs, h, B), {"a": a, "b": b, "epsilon_h": eps, "N": N}
    )


def build_scenario(
    dyn: ControlAffineDynamics, h: QuadraticBarrier, x, params: ConditionParams, dataset
) -> FilterConstraint:
    """``dh(x, u, d_i) >= 0`` for every sample ``d_i``."""
    x, a0, B, hx = _state_parts(dyn, h, x)
    D = _dataset_rows(dataset, dyn.n)
    P, q, hvals = _quad_in_u(h, B, a0 + D)
    qs = QuadraticSet(P, q, hvals - params.alpha * hx)
    if not qs.is_concave():
        raise PreconditionError("scenario condition needs u -> -dh convex")
    return _quad_constraint(qs, "scenario", _attach_scalar(qs, h, B), {"N": D.shape[0]})


def build_conformal(
    dyn: ControlAffineDynamics, h: QuadraticBarrier, x, params: ConditionParams, dataset
) -> FilterConstraint:
    """Adjusted-level quantile of the residuals ``-dh(x, u, d_i)`` and
    ``+inf`` must be non-positive: at least ``p = ceil((N+1) level)`` of
    the ``N`` residuals are ``<= 0``."""
    from .cert import InsufficientSamplesError

    x, a0, B, hx = _state_parts(dyn, h, x)
    D = _dataset_rows(dataset, dyn.n)
    N = D.shape[0]
    level = conformal_level(params.delta, params.beta, N)
    p = quantile_rank(N, level)
    if p > N:
        raise InsufficientSamplesError(
            f"quantile rank {p} exceeds N={N}: the quantile is always +inf"
        )
    P, q, hvals = _quad_in_u(h, B, a0 + D)
    qs = QuadraticSet(P, q, hvals - params.alpha * hx)
    if not qs.is_concave():
        raise PreconditionError("conformal reformulation needs u -> -dh convex")
    return FilterConstraint(
        "quantile-of-set", dyn.m, quad=qs, required=p,
        scalar=_attach_scalar(qs, h, B), label="conformal",
        info={"level": level, "p": p, "N": N},
    )
