"""Problem/result types and helpers shared by the filter backends."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..conditions import FilterConstraint, QuadraticSet
from ..core import DimensionError, as_vector

TOL_FEAS = 1e-8
GAP_TOL = 1e-9
DUAL_TOL = 1e-10

STATUSES = ("optimal", "infeasible", "iteration_limit")


@dataclass(frozen=True)
class FilterProblem:
    """``min |u - u_nom|^2`` subject to every constraint and an optional box.

    ``box`` is ``(lo, hi)`` (arrays or scalars) or a single positive
    scalar ``b`` meaning ``|u_j| <= b``.
    """

    u_nom: np.ndarray
    constraints: tuple
    box: tuple | None = None

    def __post_init__(self):
        u = as_vector(self.u_nom, name="u_nom")
        cons = tuple(self.constraints) if not isinstance(self.constraints, FilterConstraint) else (self.constraints,)
        if not cons:
            raise ValueError("a filter problem needs at least one constraint")
        for c in cons:
            if c.m != u.size:
                raise DimensionError(f"constraint {c.label!r} has m={c.m}, u_nom has {u.size}")
        box = normalize_box(self.box, u.size)
        u.setflags(write=False)
        object.__setattr__(self, "u_nom", u)
        object.__setattr__(self, "constraints", cons)
        object.__setattr__(self, "box", box)

    @property
    def m(self) -> int:
        return self.u_nom.size

    def objective(self, u) -> float:
        d = np.asarray(u, dtype=float) - self.u_nom
        return float(d @ d)

    def worst_margin(self, u) -> float:
        """Smallest constraint margin at ``u``, box slack included."""
        u = np.asarray(u, dtype=float)
        vals = [c.margin(u) for c in self.constraints]
        if self.box is not None:
            lo, hi = self.box
            vals.append(float(np.min(np.concatenate([u - lo, hi - u]))))
        return float(min(vals))

    def with_u_nom(self, u_nom) -> "FilterProblem":
        return FilterProblem(u_nom, self.constraints, self.box)


@dataclass
class FilterResult:
    u_star: np.ndarray
    status: str
    worst_margin: float
    solve_time: float
    backend: str
    certificate: float | None = None
    objective: float = float("nan")
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def normalize_box(box, m):
    if box is None:
        return None
    if np.isscalar(box):
        b = float(box)
        if not b > 0:
            raise ValueError("scalar box bound must be positive")
        lo, hi = np.full(m, -b), np.full(m, b)
    else:
        lo, hi = box
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (m,)).copy()
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (m,)).copy()
    if np.any(lo > hi):
        raise ValueError("box needs lo <= hi")
    lo.setflags(write=False)
    hi.setflags(write=False)
    return lo, hi


def box_rows(box, m) -> QuadraticSet | None:
    """Affine margins ``u_j - lo_j`` and ``hi_j - u_j`` for finite bounds."""
    if box is None:
        return None
    lo, hi = box
    q, r = [], []
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1.0
        if np.isfinite(lo[j]):
            q.append(e)
            r.append(-lo[j])
        if np.isfinite(hi[j]):
            q.append(-e)
            r.append(hi[j])
    if not q:
        return None
    return QuadraticSet(np.zeros((len(q), m, m)), np.array(q), np.array(r))


def stack_quadratic(constraints) -> QuadraticSet:
    sets = []
    for c in constraints:
        if c.kind not in ("affine", "concave-quadratic"):
            raise TypeError(f"constraint {c.label!r} of kind {c.kind} is not convex-quadratic")
        sets.append(c.quad)
    return QuadraticSet.concat(sets)


def finish(problem: FilterProblem, u, status, backend, t0, **kw) -> FilterResult:
    import time

    u = np.array(u, dtype=float)
    wm = problem.worst_margin(u)
    if status == "optimal" and wm < -TOL_FEAS:
        # never report a point as optimal unless it re-checks as feasible
        kw.setdefault("info", {})["demoted_margin"] = wm
        status = "infeasible" if kw.get("certificate") is not None else "iteration_limit"
    return FilterResult(
        u_star=u,
        status=status,
        worst_margin=wm,
        solve_time=time.perf_counter() - t0,
        backend=backend,
        objective=problem.objective(u),
        **kw,
    )
