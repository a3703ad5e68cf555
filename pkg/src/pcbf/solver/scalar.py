"""Exact backend for margins that depend on ``u`` only through ``s = w'u``.

The feasible set in ``s`` is an interval per concave component, so the
filter reduces to interval intersection (or an ``at least p of N``
coverage sweep) followed by the closest point to ``s_nom``; the optimal
input is ``u_nom + (s* - s_nom) w``.
"""

from __future__ import annotations

import math
import time

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .. import kernels
from .common import FilterProblem, FilterResult, finish

__all__ = ["common_direction", "solve_scalar", "scalar_sup_margin", "superlevel_intervals"]


def superlevel_intervals(A, b, c, t=0.0):
    """``{s : A s^2 + b s + c >= t}`` for ``A <= 0``, one interval per entry.

    Returns ``(lo, hi, nonempty)``; unbounded ends are ``-inf`` / ``inf``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float) - t
    lo = np.full(A.shape, -np.inf)
    hi = np.full(A.shape, np.inf)
    ok = np.ones(A.shape, dtype=bool)

    quad = A != 0.0
    if np.any(quad):
        Aq, bq, cq = A[quad], b[quad], c[quad]
        disc = bq * bq - 4.0 * Aq * cq
        good = disc >= 0.0
        sq = np.sqrt(np.where(good, disc, 0.0))
        # numerically stable pair of roots
        qq = -0.5 * (bq + np.where(bq >= 0.0, sq, -sq))
        with np.errstate(divide="ignore", invalid="ignore"):
            r1 = qq / Aq
            r2 = np.where(qq != 0.0, cq / qq, r1)
        lo_q, hi_q = np.minimum(r1, r2), np.maximum(r1, r2)
        lo[quad] = np.where(good, lo_q, np.nan)
        hi[quad] = np.where(good, hi_q, np.nan)
        ok[quad] = good

    lin = ~quad
    if np.any(lin):
        bl, cl = b[lin], c[lin]
        lo_l = np.full(bl.shape, -np.inf)
        hi_l = np.full(bl.shape, np.inf)
        ok_l = np.ones(bl.shape, dtype=bool)
        pos, neg, flat = bl > 0, bl < 0, bl == 0
        lo_l[pos] = -cl[pos] / bl[pos]
        hi_l[neg] = -cl[neg] / bl[neg]
        ok_l[flat] = cl[flat] >= 0.0
        lo[lin], hi[lin], ok[lin] = lo_l, hi_l, ok_l
    return lo, hi, ok


def _concave_superlevel(phi, t, s0=0.0, s_range=(-math.inf, math.inf)):
    """Interval ``{s in s_range : phi(s) >= t}`` for concave ``phi``.

    Returns ``(lo, hi, peak_value)``; ``lo > hi`` (nan) when empty.
    """
    s_lo, s_hi = s_range
    smax, vmax = _concave_argmax(phi, s0, s_range)
    if vmax < t:
        return math.nan, math.nan, vmax

    def f(s):
        return phi(s) - t

    def root_towards(limit, direction):
        if math.isfinite(limit) and f(limit) >= 0.0:
            return limit
        step = 1.0
        far = smax + direction * step
        while f(far) >= 0.0:
            step *= 2.0
            far = smax + direction * step
            if step > 1e15:
                return direction * math.inf
            if math.isfinite(limit) and direction * (far - limit) >= 0:
                far = limit
                break
        a, b = (far, smax) if direction < 0 else (smax, far)
        root = brentq(f, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        # keep the endpoint on the feasible side
        inward = -direction
        for _ in range(8):
            if f(root) >= 0.0:
                break
            root += inward * max(abs(root), 1.0) * 1e-15
        return root

    return root_towards(s_lo, -1.0), root_towards(s_hi, 1.0), vmax


def _concave_argmax(phi, s0, s_range):
    s_lo, s_hi = s_range
    if math.isfinite(s_lo) and math.isfinite(s_hi):
        if s_hi - s_lo <= 0:
            return s_lo, phi(s_lo)
        res = minimize_scalar(lambda s: -phi(s), bounds=(s_lo, s_hi), method="bounded",
                              options={"xatol": 1e-13})
        cands = [(phi(s_lo), s_lo), (phi(s_hi), s_hi), (-res.fun, res.x)]
        v, s = max(cands)
        return s, v
    # expand a bracket around the peak
    step = 1.0
    a, b = s0 - step, s0 + step
    fa, f0, fb = phi(a), phi(s0), phi(b)
    mid = s0
    while not (f0 >= fa and f0 >= fb):
        if fa > f0:
            b, fb, mid, f0 = mid, f0, a, fa
            step *= 2.0
            a = mid - step
            fa = phi(a)
        else:
            a, fa, mid, f0 = mid, f0, b, fb
            step *= 2.0
            b = mid + step
            fb = phi(b)
        if step > 1e15:
            return (a if fa > fb else b), math.inf
    res = minimize_scalar(lambda s: -phi(s), bracket=(a, mid, b), method="brent",
                          options={"xtol": 1e-14})
    s = float(res.x)
    v = phi(s)
    if f0 > v:
        s, v = mid, f0
    return s, v


def common_direction(constraints):
    """Shared unit direction of the constraints' scalar forms, or ``None``."""
    w = None
    for c in constraints:
        if c.scalar is None:
            return None
        if w is None:
            w = c.scalar.w
        elif not np.allclose(w, c.scalar.w, atol=1e-12, rtol=0):
            return None
    return w


def _components(constraints):
    """Split into quadratic coefficient arrays, smooth callables and the
    required coverage count."""
    A, b, c, phis = [], [], [], []
    required = 0
    quantile = None
    for con in constraints:
        sf = con.scalar
        if sf.phi is not None:
            phis.append(sf.phi)
            required += 1
        else:
            A.append(sf.A)
            b.append(sf.b)
            c.append(sf.c)
            if con.kind == "quantile-of-set":
                quantile = con.required
            required += con.count
    if quantile is not None:
        if len(constraints) != 1:
            raise TypeError("scalar backend handles a quantile constraint only on its own")
        required = quantile
    cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0))
    return cat(A), cat(b), cat(c), phis, required


def _intervals(comp, t, s0, s_range):
    A, b, c, phis, _ = comp
    lo, hi, ok = superlevel_intervals(A, b, c, t)
    los, his = [lo[ok]], [hi[ok]]
    for phi in phis:
        l, h, _ = _concave_superlevel(phi, t, s0, s_range)
        if l == l:  # not nan
            los.append(np.array([l]))
            his.append(np.array([h]))
    lo = np.concatenate(los)
    hi = np.concatenate(his)
    s_lo, s_hi = s_range
    lo = np.maximum(lo, s_lo)
    hi = np.minimum(hi, s_hi)
    keep = lo <= hi
    return lo[keep], hi[keep]


def _best_point(comp, t, s_nom, s_range):
    lo, hi = _intervals(comp, t, s_nom, s_range)
    return kernels.max_interval_coverage(lo, hi, comp[4], s_nom)


def _peak_bound(comp, s0, s_range):
    """Largest value any single component reaches on ``s_range``."""
    A, b, c, phis, _ = comp
    s_lo, s_hi = s_range
    vals = []
    if A.size:
        with np.errstate(divide="ignore", invalid="ignore"):
            vert = np.where(A < 0, -b / (2.0 * A), np.where(b > 0, s_hi, np.where(b < 0, s_lo, 0.0)))
        vert = np.clip(vert, s_lo, s_hi)
        with np.errstate(invalid="ignore"):
            v = (A * vert + b) * vert + c
        v = np.where(np.isnan(v), np.inf, v)
        vals.append(float(v.max()))
    for phi in phis:
        vals.append(_concave_argmax(phi, s0, s_range)[1])
    return max(vals)


def scalar_sup_margin(constraints, s_range=(-math.inf, math.inf), s0=0.0, rel_tol=1e-13):
    """``sup_s margin(s)`` over ``s_range`` by bisection on the level ``t``.

    ``margin`` is the joint margin of the constraints (minimum over
    components, or the p-th largest for a quantile set).
    """
    comp = _components(constraints)
    t_hi = _peak_bound(comp, s0, s_range)
    if not math.isfinite(t_hi):
        return math.inf
    s_mid = s0 if not (math.isfinite(s_range[0]) and math.isfinite(s_range[1])) else 0.5 * (s_range[0] + s_range[1])
    s_mid = min(max(s_mid, s_range[0]), s_range[1])
    t_lo = min(float(_joint_margin(comp, s_mid)), t_hi) - 1.0
    for _ in range(200):
        if t_hi - t_lo <= rel_tol * max(1.0, abs(t_lo), abs(t_hi)):
            break
        t = 0.5 * (t_lo + t_hi)
        if not math.isnan(_best_point(comp, t, s_mid, s_range)):
            t_lo = t
        else:
            t_hi = t
    return t_lo


def _joint_margin(comp, s):
    A, b, c, phis, required = comp
    vals = np.concatenate([(A * s + b) * s + c, [phi(s) for phi in phis]])
    if required >= vals.size:
        return vals.min()
    return -np.partition(-vals, required - 1)[required - 1]


def solve_scalar(problem: FilterProblem) -> FilterResult:
    """Exact filter when every constraint has a scalar form along one ``w``."""
    t_start = time.perf_counter()
    if problem.box is not None:
        raise TypeError("the scalar backend does not handle box bounds")
    w = common_direction(problem.constraints)
    if w is None:
        raise TypeError("constraints do not share a scalar reduction")
    u_nom = problem.u_nom
    if problem.worst_margin(u_nom) >= 0.0:
        return finish(problem, u_nom, "optimal", "scalar", t_start, info={"active": False})
    s_nom = float(w @ u_nom)
    comp = _components(problem.constraints)
    s_star = _best_point(comp, 0.0, s_nom, (-math.inf, math.inf))
    if s_star != s_star:
        cert = scalar_sup_margin(problem.constraints, s0=s_nom)
        return finish(problem, u_nom, "infeasible", "scalar", t_start, certificate=cert)
    u = u_nom + (s_star - s_nom) * w
    return finish(problem, u, "optimal", "scalar", t_start, info={"active": True, "s": s_star})
