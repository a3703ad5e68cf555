"""Safety-filter solvers: ``min |u - u_nom|^2`` subject to filter constraints.

Backends
--------
``project``    one affine / concave-quadratic margin, exact via its dual
``convex``     several affine / concave-quadratic margins, interior point
``nonconvex``  general smooth margins, multi-start SLSQP (heuristic)
``quantile``   at least ``p`` of ``N`` margins, branch-and-bound
``scalar``     any of the above when all margins depend on ``u`` through
               one linear functional; exact interval arithmetic

:func:`safety_filter` picks a backend; ``backend="generic"`` never uses
the scalar shortcut.
"""

from __future__ import annotations

import math

import numpy as np

from .common import (
    GAP_TOL,
    TOL_FEAS,
    FilterProblem,
    FilterResult,
    normalize_box,
    stack_quadratic,
)
from .convex import max_min_margin, project_single, solve_convex
from .nonconvex import local_max_min_margin, solve_nonconvex, starting_points
from .quantile import solve_quantile
from .scalar import common_direction, scalar_sup_margin, solve_scalar

__all__ = [
    "TOL_FEAS",
    "GAP_TOL",
    "FilterProblem",
    "FilterResult",
    "project_single",
    "solve_convex",
    "solve_nonconvex",
    "solve_quantile",
    "solve_scalar",
    "safety_filter",
    "feasibility_margin",
    "BACKENDS",
]

BACKENDS = ("auto", "generic", "scalar", "project", "convex", "nonconvex", "quantile")


def _generic(problem: FilterProblem) -> FilterResult:
    kinds = {c.kind for c in problem.constraints}
    if "quantile-of-set" in kinds:
        return solve_quantile(problem)
    if "general-smooth" in kinds:
        return solve_nonconvex(problem)
    if problem.box is None and len(problem.constraints) == 1 and problem.constraints[0].count == 1:
        return project_single(problem.u_nom, problem.constraints[0])
    return solve_convex(problem)


def safety_filter(u_nom, constraints, box=None, backend: str = "auto") -> FilterResult:
    """Solve the filter problem with the requested backend."""
    problem = u_nom if isinstance(u_nom, FilterProblem) else FilterProblem(u_nom, constraints, box)
    if backend == "auto":
        if problem.box is None and common_direction(problem.constraints) is not None:
            return solve_scalar(problem)
        return _generic(problem)
    if backend == "generic":
        return _generic(problem)
    if backend == "scalar":
        return solve_scalar(problem)
    if backend == "project":
        return project_single(problem.u_nom, problem.constraints[0])
    if backend == "convex":
        return solve_convex(problem)
    if backend == "nonconvex":
        return solve_nonconvex(problem)
    if backend == "quantile":
        return solve_quantile(problem)
    raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")


def _s_range(w, box):
    lo, hi = box
    a, b = w * lo, w * hi
    return float(np.minimum(a, b).sum()), float(np.maximum(a, b).sum())


def _quantile_margin(constraint, box, tol=1e-10):
    """Generic ``sup_{u in box}`` of the p-th largest margin by bisection
    on the level, using the exact quantile solver as feasibility oracle."""
    qs, m = constraint.quad, constraint.m
    lo, hi = box
    center = 0.5 * (lo + hi)
    t_lo = constraint.margin(center)
    t_hi = max(max_min_margin(qs.subset([i]), box)[0] for i in range(qs.k))
    from ..conditions import FilterConstraint

    def feasible(t):
        shifted = FilterConstraint("quantile-of-set", m, quad=qs.shifted(t), required=constraint.required)
        return solve_quantile(FilterProblem(center, (shifted,), box)).status == "optimal"

    while t_hi - t_lo > tol * max(1.0, abs(t_lo)):
        t = 0.5 * (t_lo + t_hi)
        if feasible(t):
            t_lo = t
        else:
            t_hi = t
    return t_lo


def feasibility_margin(constraints, box, backend: str = "auto") -> float:
    """``sup_{u in box} min_c margin_c(u)``; negative means the constraint
    set cannot be met inside the box.

    The box must be finite.  Exact for scalar-structured and convex
    quadratic sets; a multi-start local estimate for general smooth
    margins.
    """
    constraints = tuple(constraints) if not hasattr(constraints, "kind") else (constraints,)
    m = constraints[0].m
    box = normalize_box(box, m)
    if box is None or not (np.all(np.isfinite(box[0])) and np.all(np.isfinite(box[1]))):
        raise ValueError("feasibility_margin needs a finite box")
    kinds = {c.kind for c in constraints}
    if backend == "auto":
        w = common_direction(constraints)
        if w is not None:
            s_range = _s_range(w, box)
            s0 = min(max(0.0, s_range[0]), s_range[1])
            return scalar_sup_margin(constraints, s_range, s0=s0)
    if "quantile-of-set" in kinds:
        if len(constraints) != 1:
            raise TypeError("quantile margins are only supported on their own")
        return _quantile_margin(constraints[0], box)
    if kinds <= {"affine", "concave-quadratic"}:
        return float(max_min_margin(stack_quadratic(constraints), box)[0])
    probe = FilterProblem(0.5 * (box[0] + box[1]), constraints, box)
    starts = starting_points(probe.u_nom, 8)
    val, _ = local_max_min_margin(probe, starts, t_cap=math.inf)
    return float(val)
