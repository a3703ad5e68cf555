"""Exact backends for affine / concave-quadratic margins.

``project_single`` handles one constraint through its scalar dual.
``solve_convex`` is a small dense primal log-barrier method: a phase-I
problem maximises the smallest margin, then centering Newton steps follow
the barrier path down to a duality-gap bound, and a final active-set KKT
solve removes the remaining barrier bias.
"""

from __future__ import annotations

import math
import time

import numpy as np
from scipy.optimize import brentq

from .. import kernels
from ..conditions import QuadraticSet
from .common import (
    DUAL_TOL,
    GAP_TOL,
    TOL_FEAS,
    FilterProblem,
    FilterResult,
    box_rows,
    finish,
    stack_quadratic,
)

__all__ = ["project_single", "solve_convex", "max_min_margin", "barrier_solve"]


# ---------------------------------------------------------------------------
# single constraint


def _sup_concave(P, q, r):
    """Maximum of ``u'Pu + q'u + r`` for ``P <= 0`` and a maximiser."""
    if not np.any(P):
        if np.any(q):
            return math.inf, None
        return float(r), np.zeros(q.size)
    u, *_ = np.linalg.lstsq(-2.0 * P, q, rcond=None)
    if np.linalg.norm(-2.0 * P @ u - q) > 1e-10 * max(1.0, np.linalg.norm(q)):
        return math.inf, None
    return float(u @ P @ u + q @ u + r), u


def project_single(u_nom, c, t0=None) -> FilterResult:
    """Closest point to ``u_nom`` with ``margin(u) >= 0`` for one affine or
    concave-quadratic margin.

    Stationarity gives ``u(nu) = (I - nu P)^-1 (u_nom + nu q / 2)`` and the
    margin along this curve is nondecreasing in the multiplier ``nu``, so
    its root is bracketed and refined by Brent's method.
    """
    t0 = time.perf_counter() if t0 is None else t0
    problem = FilterProblem(u_nom, (c,))
    if c.kind not in ("affine", "concave-quadratic") or c.quad.k != 1:
        raise TypeError("project_single needs exactly one affine/concave-quadratic margin")
    u_nom = problem.u_nom
    P, q, r = c.quad.P[0], c.quad.q[0], float(c.quad.r[0])
    m0 = float(u_nom @ P @ u_nom + q @ u_nom + r)
    if m0 >= 0.0:
        return finish(problem, u_nom, "optimal", "project", t0, info={"active": False})

    if not np.any(P):
        nq = float(q @ q)
        if nq == 0.0:
            return finish(problem, u_nom, "infeasible", "project", t0, certificate=r)
        return finish(problem, u_nom + (-m0 / nq) * q, "optimal", "project", t0, info={"active": True})

    sup, u_max = _sup_concave(P, q, r)
    if sup < 0.0:
        return finish(problem, u_nom, "infeasible", "project", t0, certificate=sup)

    lam, V = np.linalg.eigh(P)
    lam = np.minimum(lam, 0.0)
    a = V.T @ u_nom
    b = 0.5 * (V.T @ q)

    def u_of(nu):
        return V @ ((a + nu * b) / (1.0 - nu * lam))

    def g(nu):
        u = u_of(nu)
        return float(u @ P @ u + q @ u + r)

    hi = 1.0
    while g(hi) < 0.0:
        hi *= 4.0
        if hi > 1e300:
            # the margin only reaches zero at its maximiser
            return finish(problem, u_max, "optimal", "project", t0, info={"active": True})
    nu = brentq(g, 0.0, hi, xtol=DUAL_TOL * 1e-4, rtol=4 * np.finfo(float).eps, maxiter=500)
    # nudge onto the feasible side if Brent stopped just short of the root
    bump = 0
    while g(nu) < 0.0 and bump < 60:
        nu = min(hi, nu * (1.0 + 1e-12) + 1e-300)
        bump += 1
    u = u_of(nu)
    return finish(problem, u, "optimal", "project", t0, info={"active": True, "multiplier": nu})


# ---------------------------------------------------------------------------
# barrier machinery


def _lift(S: QuadraticSet, with_t: bool, t_coef=-1.0) -> QuadraticSet:
    """Embed margins in ``z = (u, t)`` with ``t`` entering linearly."""
    k, m = S.k, S.m
    P = np.zeros((k, m + 1, m + 1))
    P[:, :m, :m] = S.P
    q = np.zeros((k, m + 1))
    q[:, :m] = S.q
    if with_t:
        q[:, m] = t_coef
    return QuadraticSet(P, q, S.r)


def barrier_solve(S: QuadraticSet, f0, z0, tau0, gap_tol=GAP_TOL, max_newton=200, stop=None):
    """Minimise ``f0`` subject to ``S(z) > 0`` along the barrier path.

    ``f0(z)`` returns ``(value, grad, hess)``.  Stops once the duality gap
    ``k / tau`` is below ``gap_tol * max(1, |f0|)``.  Returns ``(z, tau,
    n_newton, status)`` with status ``converged``, ``stopped`` (``stop(z)``
    fired) or ``iteration_limit``.
    """
    z = np.array(z0, dtype=float)
    tau = float(tau0)
    k = S.k
    newton = 0
    while True:
        inner = 0
        while inner < 50:
            phi, gb, Hb, smin = kernels.log_barrier_terms(S.P, S.q, S.r, z)
            if not math.isfinite(phi):
                raise RuntimeError("barrier iterate left the interior")
            f, gf, Hf = f0(z)
            G = tau * gf + gb
            H = tau * Hf + Hb
            try:
                dz = np.linalg.solve(H, -G)
            except np.linalg.LinAlgError:
                dz = np.linalg.lstsq(H + 1e-14 * np.eye(z.size), -G, rcond=None)[0]
            dec2 = float(-G @ dz)
            # half the squared Newton decrement bounds the centering error
            # of tau*f0 + phi; 1e-8 leaves an f0 error below 1e-8/tau
            if dec2 <= 2e-8 or not np.all(np.isfinite(dz)):
                break
            psi = tau * f + phi
            step = 1.0
            while step > 1e-14:
                zn = z + step * dz
                phin, *_rest = kernels.log_barrier_terms(S.P, S.q, S.r, zn)
                if math.isfinite(phin):
                    fn = f0(zn)[0]
                    if tau * fn + phin <= psi - 0.25 * step * dec2:
                        break
                step *= 0.5
            else:
                break
            z = zn
            newton += 1
            inner += 1
            if stop is not None and stop(z):
                return z, tau, newton, "stopped"
            if newton >= max_newton:
                return z, tau, newton, "iteration_limit"
        # relative gap: an absolute 1e-9 is below round-off once |f0| >> 1
        if k / tau < gap_tol * max(1.0, abs(f0(z)[0])):
            return z, tau, newton, "converged"
        tau *= 10.0


def _interior_start(box, u, m):
    if box is None:
        return np.array(u, dtype=float)
    lo, hi = box
    width = np.where(np.isfinite(hi - lo), hi - lo, 2.0)
    inner_lo = np.where(np.isfinite(lo), lo + 0.01 * width, -np.inf)
    inner_hi = np.where(np.isfinite(hi), hi - 0.01 * width, np.inf)
    mid = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi), u)
    out = np.clip(u, inner_lo, inner_hi)
    return np.where(inner_lo < inner_hi, out, mid)


def _phase1(S: QuadraticSet, hard: QuadraticSet | None, u0, stop_positive, max_newton, t_cap=None, prox=0.0):
    """Maximise ``t`` s.t. ``S(u) >= t`` (and ``hard(u) > 0``)."""
    m = S.m
    t0 = float(S.values(u0).min()) - 1.0
    parts = [_lift(S, True)]
    if hard is not None:
        parts.append(_lift(hard, False))
    if t_cap is not None:
        cap = np.zeros((1, m + 1))
        cap[0, m] = -1.0
        parts.append(QuadraticSet(np.zeros((1, m + 1, m + 1)), cap, np.array([t_cap])))
        t0 = min(t0, t_cap - 1.0)
    L = QuadraticSet.concat(parts)
    z0 = np.append(u0, t0)
    u_ref = np.array(u0, dtype=float)

    def f0(z):
        d = z[:m] - u_ref
        g = np.zeros(m + 1)
        H = np.zeros((m + 1, m + 1))
        g[m] = -1.0
        if prox:
            g[:m] = 2.0 * prox * d
            H[:m, :m] = 2.0 * prox * np.eye(m)
        return -z[m] + prox * float(d @ d), g, H

    stop = (lambda z: z[m] > 0.0) if stop_positive else None
    # scale the first weight so the initial centering gap is O(k), not O(|t0|)
    tau0 = L.k / max(1.0, abs(t0))
    z, tau, n, status = barrier_solve(L, f0, z0, tau0=tau0, max_newton=max_newton, stop=stop)
    return z[:m], float(S.values(z[:m]).min()), n, status


def max_min_margin(S: QuadraticSet, box, u0=None, max_newton=400):
    """``sup_{u in box} min_i S_i(u)`` for concave margins (box must be finite)."""
    m = S.m
    hard = box_rows(box, m)
    if hard is None or hard.k < 2 * m:
        raise ValueError("max_min_margin needs finite box bounds")
    u0 = np.zeros(m) if u0 is None else np.asarray(u0, dtype=float)
    u0 = _interior_start(box, u0, m)
    u, value, n, status = _phase1(S, hard, u0, False, max_newton)
    return value, u, status


def _kkt_newton(S: QuadraticSet, u_nom, u, lam, active):
    m = u.size
    uu = np.array(u, dtype=float)
    for _ in range(30):
        Pa, qa, ra = S.P[active], S.q[active], S.r[active]
        g = 2.0 * (Pa @ uu) + qa
        res_c = np.einsum("ki,kij,j->k", np.broadcast_to(uu, (active.size, m)), Pa, uu) + qa @ uu + ra
        res_s = 2.0 * (uu - u_nom) - g.T @ lam
        if max(np.abs(res_c).max(), np.abs(res_s).max()) < 1e-15:
            break
        H = 2.0 * np.eye(m) - 2.0 * np.einsum("k,kij->ij", lam, Pa)
        K = np.block([[H, -g.T], [-g, np.zeros((active.size, active.size))]])
        rhs = -np.concatenate([res_s, -res_c])
        try:
            step = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            return None
        uu = uu + step[:m]
        lam = lam + step[m:]
    if not np.all(np.isfinite(uu)) or np.any(lam < -1e-9):
        return None
    if S.values(uu).min() < -1e-12 * max(1.0, np.abs(S.r).max()):
        return None
    return uu


def _polish(S: QuadraticSet, u_nom, u, mult, tols=(1e-6, 1e-4, 1e-2)):
    """Solve the KKT system on an estimated active set; ``None`` if no
    estimate yields a feasible point with non-negative multipliers.

    A KKT point of the convex problem is its global minimiser, so any
    candidate active set that passes the checks is accepted.  Looser
    slack thresholds catch degenerate constraints (active with a zero
    multiplier) whose central-path slack decays only like ``sqrt(gap)``.
    """
    vals = S.values(u)
    grads = S.gradients(u)
    gnorm = np.maximum(np.linalg.norm(grads, axis=1), 1e-300)
    seen = set()
    for tol in tols:
        close = vals / gnorm < tol
        for active in (np.flatnonzero(close & (mult > 1e-10 * max(1.0, mult.max()))), np.flatnonzero(close)):
            key = tuple(active.tolist())
            if active.size == 0 or active.size > u.size or key in seen:
                continue
            seen.add(key)
            uu = _kkt_newton(S, u_nom, u, np.maximum(mult[active], 0.0), active)
            if uu is not None:
                return uu
    return None


def solve_convex(problem: FilterProblem, max_newton: int = 200) -> FilterResult:
    """Interior-point solve for affine / concave-quadratic constraints."""
    t_start = time.perf_counter()
    m = problem.m
    u_nom = problem.u_nom
    S = stack_quadratic(problem.constraints)
    if problem.worst_margin(u_nom) >= 0.0:
        return finish(problem, u_nom, "optimal", "convex", t_start, info={"active": False})
    hard = box_rows(problem.box, m)
    u0 = _interior_start(problem.box, u_nom, m)

    # phase I: find a strictly feasible point (or certify there is none)
    bounded = hard is not None and hard.k == 2 * m
    u1, t1, n1, st1 = _phase1(
        S, hard, u0, True, max_newton,
        t_cap=None if bounded else 1.0, prox=0.0 if bounded else 1e-9,
    )
    if st1 == "iteration_limit":
        return finish(problem, u1, "iteration_limit", "convex", t_start, iterations=n1)
    if t1 <= 0.0:
        if t1 < -TOL_FEAS:
            return finish(problem, u1, "infeasible", "convex", t_start, certificate=t1, iterations=n1)
        # feasible set without interior: the phase-I point is the only witness
        return finish(problem, u1, "optimal", "convex", t_start, iterations=n1, info={"degenerate": True})

    # phase II
    full = S if hard is None else QuadraticSet.concat([S, hard])

    def f0(u):
        d = u - u_nom
        return float(d @ d), 2.0 * d, 2.0 * np.eye(m)

    f_start = f0(u1)[0]
    tau0 = full.k / max(f_start, 1e-6)
    u2, tau, n2, st2 = barrier_solve(full, f0, u1, tau0, max_newton=max_newton)
    if st2 == "iteration_limit":
        return finish(problem, u2, "iteration_limit", "convex", t_start, iterations=n1 + n2)
    slack = full.values(u2)
    mult = 1.0 / (tau * slack)
    u_pol = _polish(full, u_nom, u2, mult)
    polished = u_pol is not None and f0(u_pol)[0] <= f0(u2)[0] + 1e-12
    u_out = u_pol if polished else u2
    return finish(
        problem, u_out, "optimal", "convex", t_start,
        iterations=n1 + n2, info={"active": True, "polished": bool(polished)},
    )
