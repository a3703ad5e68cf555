"""Exact solver for ``at least p of N margins non-negative``.

The choice of which residuals to enforce is a combinatorial problem.
Branch-and-bound explores it with nodes that fix some residuals as
enforced (E) and some as relaxed (R); the node bound is the projection
onto the enforced set alone, which is a convex problem.  For small
``C(N, N - p)`` plain enumeration of all enforced ``p``-subsets is used.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np

from ..conditions import FilterConstraint, QuadraticSet
from .common import TOL_FEAS, FilterProblem, FilterResult, finish
from .convex import project_single, solve_convex

__all__ = ["solve_quantile", "ENUMERATION_LIMIT"]

ENUMERATION_LIMIT = 10_000
_TIE = 1e-12


def _split(problem: FilterProblem):
    qc = [c for c in problem.constraints if c.kind == "quantile-of-set"]
    if len(qc) != 1 or len(problem.constraints) != 1:
        raise TypeError("solve_quantile needs exactly one quantile-of-set constraint")
    return qc[0]


def _relaxation(problem, qs: QuadraticSet, enforced):
    """Projection of ``u_nom`` onto the enforced subset (+ box)."""
    if len(enforced) == 0:
        u = np.array(problem.u_nom)
        if problem.box is not None:
            u = np.clip(u, *problem.box)
        return u, float((u - problem.u_nom) @ (u - problem.u_nom)), True
    sub = qs.subset(sorted(enforced))
    kind = "affine" if sub.is_affine() else "concave-quadratic"
    con = FilterConstraint(kind, qs.m, quad=sub)
    if sub.k == 1 and problem.box is None:
        res = project_single(problem.u_nom, con)
    else:
        res = solve_convex(FilterProblem(problem.u_nom, (con,), problem.box))
    return res.u_star, res.objective, res.status == "optimal"


def _satisfied_key(qs, u, p):
    ok = np.flatnonzero(qs.values(u) >= -TOL_FEAS)
    return tuple(ok[:p].tolist()) if ok.size >= p else None


class _Incumbent:
    def __init__(self):
        self.obj = math.inf
        self.u = None
        self.key = None

    def offer(self, obj, u, key):
        if key is None:
            return
        better = obj < self.obj - _TIE * (1.0 + abs(self.obj) if math.isfinite(self.obj) else 1.0)
        tie = not better and abs(obj - self.obj) <= _TIE * (1.0 + abs(obj))
        if better or (tie and key < self.key):
            self.obj, self.u, self.key = obj, np.array(u), key


def _enumerate(problem, qs, p, inc):
    for enforced in itertools.combinations(range(qs.k), p):
        u, obj, ok = _relaxation(problem, qs, enforced)
        if ok:
            inc.offer(obj, u, _satisfied_key(qs, u, p))
    return math.comb(qs.k, p)


def _branch_and_bound(problem, qs, p, inc, max_nodes):
    N = qs.k
    max_relaxed = N - p
    stack = [(frozenset(), frozenset())]
    nodes = 0
    while stack:
        E, R = stack.pop()
        nodes += 1
        if nodes > max_nodes:
            return nodes, False
        u, obj, ok = _relaxation(problem, qs, E)
        if not ok or obj > inc.obj + _TIE * (1.0 + abs(obj)):
            continue
        vals = qs.values(u)
        if np.count_nonzero(vals >= -TOL_FEAS) >= p:
            # the node relaxation is optimal for the whole subtree
            inc.offer(obj, u, _satisfied_key(qs, u, p))
            continue
        undecided = np.array([i for i in range(N) if i not in E and i not in R], dtype=np.int64)
        if undecided.size == 0:
            continue
        i = int(undecided[np.argmin(vals[undecided])])
        if vals[i] >= -TOL_FEAS:
            continue
        # depth-first, enforce branch explored first (pushed last)
        if len(R) < max_relaxed:
            stack.append((E, R | {i}))
        stack.append((E | {i}, R))
    return nodes, True


def solve_quantile(problem: FilterProblem, method: str = "auto", max_nodes: int = 200_000) -> FilterResult:
    """``method`` is ``auto`` (enumerate when ``C(N, N-p) <= 1e4``),
    ``bnb`` or ``enumerate``."""
    t_start = time.perf_counter()
    c = _split(problem)
    qs, p = c.quad, c.required
    if problem.worst_margin(problem.u_nom) >= 0.0:
        return finish(problem, problem.u_nom, "optimal", "quantile", t_start, info={"active": False})
    if method == "auto":
        method = "enumerate" if math.comb(qs.k, qs.k - p) <= ENUMERATION_LIMIT else "bnb"
    inc = _Incumbent()
    if method == "enumerate":
        nodes, complete = _enumerate(problem, qs, p, inc), True
    elif method == "bnb":
        nodes, complete = _branch_and_bound(problem, qs, p, inc, max_nodes)
    else:
        raise ValueError("method must be auto, bnb or enumerate")
    info = {"nodes": nodes, "method": method, "active": True}
    if inc.u is None:
        status = "infeasible" if complete else "iteration_limit"
        cert = c.margin(problem.u_nom)
        return finish(problem, problem.u_nom, status, "quantile", t_start, certificate=cert,
                      iterations=nodes, info=info)
    status = "optimal" if complete else "iteration_limit"
    return finish(problem, inc.u, status, "quantile", t_start, iterations=nodes, info=info)
