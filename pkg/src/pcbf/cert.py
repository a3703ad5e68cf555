"""Horizon risk allocation, confidence budgets and sample-size formulas.

All logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .moments import _robust_ceil, quantile_rank

__all__ = [
    "BudgetError",
    "InsufficientSamplesError",
    "HorizonBudget",
    "GuaranteeReport",
    "delta_for_horizon",
    "safety_probability_bound",
    "hoeffding_epsilon",
    "hoeffding_min_samples",
    "scenario_beta",
    "scenario_min_samples",
    "scenario_sufficient_samples",
    "conformal_level",
    "conformal_min_samples",
    "horizon_guarantee",
]


class BudgetError(ValueError):
    """A per-step risk or confidence allocation breaks the horizon budget."""


class InsufficientSamplesError(ValueError):
    """The dataset is too small for the requested guarantee."""


def _check_open_unit(name, value):
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value!r}")


def delta_for_horizon(epsilon: float, H: int) -> float:
    """Largest per-step risk with ``(1 - delta)^H >= 1 - epsilon``."""
    _check_open_unit("epsilon", epsilon)
    if H < 1:
        raise ValueError("H must be >= 1")
    return -math.expm1(math.log1p(-epsilon) / H)


def safety_probability_bound(delta: float, H: int) -> float:
    """Lower bound ``(1 - delta)^H`` on staying safe for ``H`` steps."""
    if not 0.0 <= delta < 1.0:
        raise ValueError("delta must lie in [0, 1)")
    if H < 0:
        raise ValueError("H must be >= 0")
    return math.exp(H * math.log1p(-delta))


def hoeffding_epsilon(N: int, beta: float, a: float, b: float) -> float:
    """Smallest slack with ``beta >= 2 exp(-2 N eps^2 / (b - a)^2)``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    _check_open_unit("beta", beta)
    if not b > a:
        raise ValueError("need b > a")
    return (b - a) * math.sqrt(math.log(2.0 / beta) / (2.0 * N))


def hoeffding_min_samples(epsilon_h: float, beta: float, a: float, b: float) -> int:
    """Smallest ``N`` for which ``epsilon_h`` is an admissible slack."""
    if not epsilon_h > 0:
        raise ValueError("epsilon_h must be positive")
    _check_open_unit("beta", beta)
    if not b > a:
        raise ValueError("need b > a")
    return max(1, _robust_ceil((b - a) ** 2 * math.log(2.0 / beta) / (2.0 * epsilon_h**2)))


def _log_binom_pmfs(N: int, dim: int, delta: float) -> list[float]:
    """``log C(N,i) delta^i (1-delta)^(N-i)`` for ``i < dim`` by the term ratio.

    The recurrence keeps full relative precision for large ``N``, where
    differences of log-gamma values lose digits.
    """
    ld, l1d = math.log(delta), math.log1p(-delta)
    out = [N * l1d]
    for i in range(1, dim):
        out.append(out[-1] + math.log((N - i + 1) / i) + ld - l1d)
    return out


def scenario_beta(N: int, delta: float, dim: int) -> float:
    """Binomial tail ``sum_{i<dim} C(N,i) delta^i (1-delta)^(N-i)``.

    Evaluated term by term in log space, so ``N`` up to 1e6 is fine.
    """
    _check_open_unit("delta", delta)
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if N < 0:
        raise ValueError("N must be >= 0")
    if N < dim:
        return 1.0
    logs = _log_binom_pmfs(N, dim, delta)
    top = max(logs)
    return min(1.0, math.exp(top) * sum(math.exp(v - top) for v in logs))


def scenario_sufficient_samples(delta: float, beta: float, dim: int) -> int:
    """Closed-form sufficient size ``ceil((2/delta)(ln(1/beta) + dim))``."""
    _check_open_unit("delta", delta)
    _check_open_unit("beta", beta)
    return _robust_ceil((2.0 / delta) * (math.log(1.0 / beta) + dim))


def scenario_min_samples(delta: float, beta: float, dim: int) -> tuple[int, int]:
    """Smallest ``N`` with ``scenario_beta(N) <= beta`` and the sufficient bound.

    Returns ``(exact, sufficient)``; the tail is monotone in ``N`` so a
    bisection between ``dim`` and the sufficient bound is exact.
    """
    _check_open_unit("beta", beta)
    hi = scenario_sufficient_samples(delta, beta, dim)
    while scenario_beta(hi, delta, dim) > beta:  # never triggers in theory
        hi *= 2
    lo = dim - 1  # tail == 1 > beta here
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if scenario_beta(mid, delta, dim) <= beta:
            hi = mid
        else:
            lo = mid
    return hi, scenario_sufficient_samples(delta, beta, dim)


def conformal_level(delta: float, beta: float, N: int) -> float:
    """Calibration-conditional level ``1 - delta + sqrt(ln(1/beta) / (2N))``.

    Raises :class:`InsufficientSamplesError` when the level reaches 1, in
    which case the quantile over the residuals and ``+inf`` is always
    ``+inf`` and the condition cannot be met.
    """
    _check_open_unit("delta", delta)
    _check_open_unit("beta", beta)
    if N < 1:
        raise ValueError("N must be >= 1")
    level = 1.0 - delta + math.sqrt(math.log(1.0 / beta) / (2.0 * N))
    if level >= 1.0:
        raise InsufficientSamplesError(
            f"conformal level {level:.6g} >= 1 with N={N}: quantile is always +inf"
        )
    return level


def conformal_min_samples(delta: float, beta: float, limit: int = 10**7) -> int:
    """Smallest ``N`` whose quantile rank ``ceil((N+1) level)`` is at most ``N``."""
    _check_open_unit("delta", delta)
    _check_open_unit("beta", beta)
    for N in range(1, limit + 1):
        level = 1.0 - delta + math.sqrt(math.log(1.0 / beta) / (2.0 * N))
        if level < 1.0 and quantile_rank(N, level) <= N:
            return N
    raise InsufficientSamplesError(f"no admissible N up to {limit}")


@dataclass(frozen=True)
class HorizonBudget:
    epsilon: float
    H: int
    beta_total: float | None = None
    delta_step: float | None = None
    beta_step: float | None = None

    def __post_init__(self):
        _check_open_unit("epsilon", self.epsilon)
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if self.beta_total is not None:
            _check_open_unit("beta_total", self.beta_total)
        if self.delta_step is None:
            object.__setattr__(self, "delta_step", delta_for_horizon(self.epsilon, self.H))
        if self.beta_step is None and self.beta_total is not None:
            object.__setattr__(self, "beta_step", self.beta_total / self.H)


@dataclass(frozen=True)
class GuaranteeReport:
    mode: str
    epsilon: float
    H: int
    delta_step: float
    safety_bound: float
    beta_step: float | None = None
    confidence: float | None = None
    notes: list[str] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [
            f"mode            {self.mode}",
            f"epsilon         {self.epsilon:.10g}",
            f"horizon         {self.H}",
            f"delta_step      {self.delta_step:.10g}",
            f"(1-delta)^H     {self.safety_bound:.10g}  (>= 1-epsilon = {1 - self.epsilon:.10g})",
        ]
        if self.beta_step is not None:
            out.append(f"beta_step       {self.beta_step:.10g}")
            out.append(f"confidence      {self.confidence:.10g}  (>= 1 - H*beta_step)")
        out.extend(self.notes)
        return out


def horizon_guarantee(budget: HorizonBudget, mode: str = "moment") -> GuaranteeReport:
    """Check a per-step allocation against the horizon budget.

    ``mode="moment"`` certifies ``P(all safe) >= 1 - epsilon``;
    ``mode="data"`` additionally needs a per-step confidence ``beta_step``
    and reports the joint confidence ``1 - H beta_step``.
    """
    if mode not in ("moment", "data"):
        raise ValueError("mode must be 'moment' or 'data'")
    eps, H = budget.epsilon, budget.H
    delta = budget.delta_step
    if not 0.0 < delta < 1.0:
        raise BudgetError(f"delta_step={delta!r} is outside (0, 1)")
    bound = safety_probability_bound(delta, H)
    limit = delta_for_horizon(eps, H)
    if delta > limit * (1 + 1e-12):
        raise BudgetError(
            f"delta_step={delta:.6g} exceeds 1-(1-epsilon)^(1/H)={limit:.6g}: "
            f"(1-delta)^H={bound:.6g} < 1-epsilon={1 - eps:.6g}"
        )
    if mode == "moment":
        return GuaranteeReport(mode, eps, H, delta, bound)
    if budget.beta_step is None or budget.beta_total is None:
        raise BudgetError("data mode needs beta_total")
    if not 0.0 < budget.beta_step < 1.0:
        raise BudgetError(f"beta_step={budget.beta_step!r} is outside (0, 1)")
    if budget.beta_step > budget.beta_total / H * (1 + 1e-12):
        raise BudgetError(
            f"beta_step={budget.beta_step:.6g} exceeds beta_total/H={budget.beta_total / H:.6g}"
        )
    return GuaranteeReport(
        mode, eps, H, delta, bound, budget.beta_step, 1.0 - H * budget.beta_step
    )
