"""Multi-start local solver for general smooth margins (Cantelli).

Each start runs scipy's SLSQP on ``min |u - u_nom|^2`` with the margins
as inequality constraints.  When no start ends feasible, a phase-I search
``max t s.t. margin_i(u) >= t`` is run from every start; an infeasible
verdict from this backend is a numerical observation, not a proof.
"""

from __future__ import annotations

import time

import numpy as np
from scipy.optimize import minimize

from .common import TOL_FEAS, FilterProblem, FilterResult, finish

__all__ = ["solve_nonconvex", "starting_points", "local_max_min_margin"]


def starting_points(u_nom, n_starts, seed=0):
    """``u_nom`` followed by ``n_starts - 1`` seeded Gaussian perturbations."""
    u_nom = np.asarray(u_nom, dtype=float)
    rng = np.random.default_rng(seed)
    scale = 1.0 + float(np.linalg.norm(u_nom))
    pts = [u_nom.copy()]
    for _ in range(max(n_starts, 1) - 1):
        pts.append(u_nom + scale * rng.standard_normal(u_nom.size))
    return pts


def _scipy_constraints(problem: FilterProblem, t_index=None):
    """Inequality dicts; with ``t_index`` each margin is shifted by ``z[t]``."""
    cons = []
    m = problem.m
    for c in problem.constraints:
        if c.kind == "quantile-of-set":
            raise TypeError("use solve_quantile for quantile-of-set constraints")
        if c.kind == "general-smooth":
            fun = (lambda u, c=c: np.array([c.func(u)]))
            if c.grad is not None:
                jac = (lambda u, c=c: np.atleast_2d(c.grad(u)))
            else:
                jac = None
        else:
            fun = (lambda u, c=c: c.quad.values(u))
            jac = (lambda u, c=c: c.quad.gradients(u))
        if t_index is None:
            d = {"type": "ineq", "fun": fun}
            if jac is not None:
                d["jac"] = jac
        else:
            d = {"type": "ineq", "fun": (lambda z, fun=fun: fun(z[:m]) - z[m])}
            if jac is not None:
                def jz(z, jac=jac):
                    J = np.atleast_2d(jac(z[:m]))
                    return np.hstack([J, -np.ones((J.shape[0], 1))])
                d["jac"] = jz
        cons.append(d)
    return cons


def _bounds(problem, extra=None):
    if problem.box is None and extra is None:
        return None
    m = problem.m
    if problem.box is None:
        b = [(None, None)] * m
    else:
        lo, hi = problem.box
        b = [(None if not np.isfinite(l) else l, None if not np.isfinite(h) else h) for l, h in zip(lo, hi)]
    if extra is not None:
        b.append(extra)
    return b


def _local_solve(problem, cons, bounds, u0, maxiter):
    u_nom = problem.u_nom
    res = minimize(
        lambda u: float((u - u_nom) @ (u - u_nom)),
        u0,
        jac=lambda u: 2.0 * (u - u_nom),
        constraints=cons,
        bounds=bounds,
        method="SLSQP",
        options={"ftol": 1e-15, "maxiter": maxiter},
    )
    return np.asarray(res.x, dtype=float), int(res.nit), bool(res.success)


def local_max_min_margin(problem: FilterProblem, starts, maxiter=200, t_cap=1.0):
    """Best local value of ``max_u min_i margin_i(u)`` over the starts."""
    m = problem.m
    cons = _scipy_constraints(problem, t_index=m)
    bounds = _bounds(problem, extra=(None, t_cap))
    best_val, best_u = -np.inf, None
    for u0 in starts:
        u0 = np.asarray(u0, dtype=float)
        if problem.box is not None:
            u0 = np.clip(u0, *problem.box)
        t0 = min(min(c.margin(u0) for c in problem.constraints), t_cap) - 1.0
        res = minimize(
            lambda z: -z[m],
            np.append(u0, t0),
            jac=lambda z: np.append(np.zeros(m), -1.0),
            constraints=cons,
            bounds=bounds,
            method="SLSQP",
            options={"ftol": 1e-15, "maxiter": maxiter},
        )
        u = np.asarray(res.x[:m], dtype=float)
        if problem.box is not None:
            u = np.clip(u, *problem.box)
        val = min(c.margin(u) for c in problem.constraints)
        if val > best_val:
            best_val, best_u = val, u
    return best_val, best_u


def solve_nonconvex(problem: FilterProblem, n_starts: int = 8, maxiter: int = 200, seed: int = 0) -> FilterResult:
    t_start = time.perf_counter()
    u_nom = problem.u_nom
    if problem.worst_margin(u_nom) >= 0.0:
        return finish(problem, u_nom, "optimal", "nonconvex", t_start, info={"active": False})
    cons = _scipy_constraints(problem)
    bounds = _bounds(problem)
    starts = starting_points(u_nom, n_starts, seed)

    def run(starts):
        best = None
        iters = 0
        for u0 in starts:
            u, nit, _ = _local_solve(problem, cons, bounds, u0, maxiter)
            iters += nit
            if problem.worst_margin(u) < -TOL_FEAS:
                continue
            obj = problem.objective(u)
            if best is None or obj < best[0] - 1e-15:
                best = (obj, u)
        return best, iters

    best, iters = run(starts)
    if best is None:
        val, u_feas = local_max_min_margin(problem, starts, maxiter)
        if val < -TOL_FEAS:
            return finish(
                problem, u_nom, "infeasible", "nonconvex", t_start,
                certificate=val, iterations=iters,
                info={"heuristic": True, "note": "numerically infeasible"},
            )
        best, more = run([u_feas])
        iters += more
        if best is None:
            return finish(problem, u_feas, "optimal", "nonconvex", t_start, iterations=iters,
                          info={"phase1_point": True})
    return finish(problem, best[1], "optimal", "nonconvex", t_start, iterations=iters, info={"active": True})
