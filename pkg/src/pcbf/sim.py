"""Rollouts and Monte Carlo experiments on the corridor unicycle.

Randomness is organised in independent streams keyed off one master
seed:

* ``(0, traj)``                 disturbances of trajectory ``traj``
* ``(1, method, 0)``            the dataset shared by a whole batch
* ``(1, method, 1, traj)``      per-trajectory datasets (redraw mode)
* ``(2, method)``               base normals for the sigma_0 scan

Disturbances are drawn step by step, so a trajectory of horizon ``H`` is
a prefix of the same trajectory at any longer horizon, and every method
sees the same disturbance sequence.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .conditions import (
    ConditionParams,
    build_cantelli,
    build_cantelli_jensen,
    build_conformal,
    build_hoeffding,
    build_markov_expectation,
    build_markov_jensen_gap,
    build_scenario,
)
from .core import barrier_eval, corridor_barrier, corridor_nominal, step, unicycle
from .moments import DisturbanceDataset, corridor_disturbance, rng_stream
from .solver import feasibility_margin, safety_filter

log = logging.getLogger(__name__)

__all__ = [
    "METHODS",
    "FILTERS",
    "SimConfig",
    "RolloutRecord",
    "BatchMetrics",
    "build_filter_constraint",
    "batch_dataset",
    "filter_input",
    "rollout",
    "monte_carlo",
    "sweep",
    "sigma0_search",
    "probe_states",
    "bench",
    "sweep_csv",
    "trajectory_csv",
    "bench_csv",
]

METHODS = ("none", "markov", "cantelli", "hoeffding", "scenario", "conformal")
FILTERS = METHODS[1:]
# variants reachable by name but not part of the default method list
VARIANTS = ("markov-exact", "cantelli-gap")
_METHOD_INDEX = {name: i for i, name in enumerate(METHODS + VARIANTS)}
DATA_METHODS = ("hoeffding", "scenario", "conformal")
PROBE_Y = (0.0, 0.25, -0.25, 0.5, -0.5)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    alpha: float = 0.01
    delta: float = 0.1
    beta: float = 0.01
    horizon: int = 20
    sigma: float = 0.06
    method: str = "markov"
    n_hoeffding: int = 3252
    n_scenario: int = 113
    n_conformal: int = 300
    n_traj: int = 400
    master_seed: int = 0
    x0: tuple = (0.0, 0.0, 0.0)
    u_box: float = 2.0
    sigma_min: float = 0.01
    sigma_max: float = 0.5
    sigma_step: float = 0.01
    backend: str = "auto"
    dataset_policy: str = "batch"
    per_state_b: bool = False
    truncation: float = 6.0
    record_timing: bool = False
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.method not in METHODS + VARIANTS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        if min(self.n_hoeffding, self.n_scenario, self.n_conformal) < 1:
            raise ValueError("dataset sizes must be >= 1")
        if len(self.x0) != 3:
            raise ValueError("x0 must have three entries")
        if not self.u_box > 0:
            raise ValueError("u_box must be positive")
        if not (self.sigma_step > 0 and self.sigma_min <= self.sigma_max):
            raise ValueError("bad sigma grid")
        if self.dataset_policy not in ("batch", "trajectory"):
            raise ValueError("dataset_policy must be 'batch' or 'trajectory'")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        self.params()  # range checks for alpha, delta, beta

    def params(self) -> ConditionParams:
        return ConditionParams(
            alpha=self.alpha, delta=self.delta, beta=self.beta,
            per_state_b=self.per_state_b, truncation=self.truncation, u_bound=self.u_box,
        )

    def dataset_size(self, method: str) -> int | None:
        return {
            "hoeffding": self.n_hoeffding,
            "scenario": self.n_scenario,
            "conformal": self.n_conformal,
        }.get(method)

    def sigma_grid(self) -> np.ndarray:
        n = int(round((self.sigma_max - self.sigma_min) / self.sigma_step)) + 1
        return np.round(self.sigma_min + self.sigma_step * np.arange(n), 12)

    def replace(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class RolloutRecord:
    traj: int
    method: str
    states: np.ndarray
    inputs: np.ndarray
    margins: np.ndarray
    statuses: list
    solve_times: np.ndarray
    unsafe: bool
    first_unsafe_step: int | None
    first_infeasible_step: int | None

    @property
    def barrier_values(self) -> np.ndarray:
        return corridor_barrier().values(self.states)


@dataclass
class BatchMetrics:
    method: str
    n_traj: int
    n_unsafe: int
    n_infeasible: int
    unsafe_fraction: float
    mean_solve_ms: float
    median_solve_ms: float
    n_infeasible_steps: int = 0
    records: list = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# filters


def _problem(config: SimConfig):
    return unicycle(config.dt), corridor_barrier()


def build_filter_constraint(config: SimConfig, method: str, x, dataset=None, sigma=None):
    dyn, h = _problem(config)
    params = config.params()
    dist = corridor_disturbance(config.sigma if sigma is None else sigma)
    if method == "markov":
        return build_markov_jensen_gap(dyn, h, x, params, dist)
    if method == "markov-exact":
        return build_markov_expectation(dyn, h, x, params, dist)
    if method == "cantelli":
        return build_cantelli(dyn, h, x, params, dist)
    if method == "cantelli-gap":
        return build_cantelli_jensen(dyn, h, x, params, dist, "concave-gap")
    if method == "hoeffding":
        return build_hoeffding(dyn, h, x, params, dataset, spread=dist.std())
    if method == "scenario":
        return build_scenario(dyn, h, x, params, dataset)
    if method == "conformal":
        return build_conformal(dyn, h, x, params, dataset)
    raise ValueError(f"method {method!r} has no filter constraint")


def batch_dataset(config: SimConfig, method: str, traj: int | None = None) -> DisturbanceDataset | None:
    """Dataset for a data-based method; ``None`` for moment-based ones."""
    N = config.dataset_size(method)
    if N is None:
        return None
    idx = _METHOD_INDEX[method]
    if config.dataset_policy == "trajectory" and traj is not None:
        rng = rng_stream(config.master_seed, 1, idx, 1, traj)
    else:
        rng = rng_stream(config.master_seed, 1, idx, 0)
    dist = corridor_disturbance(config.sigma)
    Z = rng.standard_normal((N, 3))
    return DisturbanceDataset(dist.mean + Z @ dist.factor().T, source_seed=config.master_seed)


def filter_input(config: SimConfig, method: str, x, dataset=None, backend=None):
    """Filtered input at ``x``: returns ``(u, status, margin, seconds)``.

    ``seconds`` is the solver time only (constraint construction is not
    included).  Falls back to the nominal input when the filter is
    infeasible.
    """
    u_nom = corridor_nominal(x)
    if method == "none":
        return u_nom, "nominal", math.nan, 0.0
    con = build_filter_constraint(config, method, x, dataset)
    res = safety_filter(u_nom, [con], backend=backend or config.backend)
    if res.status == "optimal":
        return res.u_star, "optimal", res.worst_margin, res.solve_time
    return u_nom, res.status, con.margin(u_nom), res.solve_time


# ---------------------------------------------------------------------------
# rollouts


def rollout(config: SimConfig, method: str | None = None, traj_index: int = 0, dataset=None) -> RolloutRecord:
    method = config.method if method is None else method
    if dataset is None and method in DATA_METHODS:
        dataset = batch_dataset(config, method, traj_index)
    dyn, h = _problem(config)
    rng = rng_stream(config.master_seed, 0, traj_index)
    H = config.horizon
    states = np.empty((H + 1, 3))
    inputs = np.empty((H, 3))
    margins = np.empty(H)
    times = np.empty(H)
    statuses = []
    states[0] = config.x0
    first_infeasible = None
    for t in range(H):
        x = states[t]
        u, status, margin, secs = filter_input(config, method, x, dataset)
        z = rng.standard_normal()
        d = np.array([0.0, config.sigma * z, 0.0])
        states[t + 1] = step(dyn, x, u, d)
        inputs[t] = u
        margins[t] = margin
        times[t] = secs
        statuses.append(status)
        if status not in ("optimal", "nominal") and first_infeasible is None:
            first_infeasible = t
    hvals = np.array([barrier_eval(h, s) for s in states])
    bad = np.flatnonzero(hvals < 0.0)
    return RolloutRecord(
        traj=traj_index,
        method=method,
        states=states,
        inputs=inputs,
        margins=margins,
        statuses=statuses,
        solve_times=times,
        unsafe=bool(bad.size),
        first_unsafe_step=int(bad[0]) if bad.size else None,
        first_infeasible_step=first_infeasible,
    )


def _rollout_chunk(args):
    config, method, indices = args
    shared = batch_dataset(config, method) if config.dataset_policy == "batch" else None
    return [rollout(config, method, i, shared) for i in indices]


def _run_rollouts(config: SimConfig, method: str, jobs: int | None = None) -> list[RolloutRecord]:
    jobs = config.jobs if jobs is None else jobs
    indices = list(range(config.n_traj))
    if jobs <= 1 or len(indices) <= 1:
        return _rollout_chunk((config, method, indices))
    n_chunks = min(len(indices), 4 * jobs)
    chunks = [indices[i::n_chunks] for i in range(n_chunks)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_rollout_chunk, [(config, method, c) for c in chunks]))
    records = [r for part in parts for r in part]
    # ordered reduction: results never depend on scheduling
    records.sort(key=lambda r: r.traj)
    return records


def _metrics(method, records, H=None) -> BatchMetrics:
    if H is None:
        unsafe = [r.unsafe for r in records]
        infeasible = [r.first_infeasible_step is not None for r in records]
        times = np.concatenate([r.solve_times for r in records])
        n_inf_steps = sum(sum(s not in ("optimal", "nominal") for s in r.statuses) for r in records)
    else:
        unsafe = [r.first_unsafe_step is not None and r.first_unsafe_step <= H for r in records]
        infeasible = [r.first_infeasible_step is not None and r.first_infeasible_step < H for r in records]
        times = np.concatenate([r.solve_times[:H] for r in records])
        n_inf_steps = sum(sum(s not in ("optimal", "nominal") for s in r.statuses[:H]) for r in records)
    n = len(records)
    return BatchMetrics(
        method=method,
        n_traj=n,
        n_unsafe=int(sum(unsafe)),
        n_infeasible=int(sum(infeasible)),
        unsafe_fraction=float(sum(unsafe)) / n,
        mean_solve_ms=float(times.mean() * 1e3),
        median_solve_ms=float(np.median(times) * 1e3),
        n_infeasible_steps=int(n_inf_steps),
        records=records,
    )


def monte_carlo(config: SimConfig, method: str | None = None, jobs: int | None = None) -> BatchMetrics:
    method = config.method if method is None else method
    records = _run_rollouts(config, method, jobs)
    return _metrics(method, records)


def sweep(config: SimConfig, axis: str, values, methods=METHODS, jobs: int | None = None) -> list[dict]:
    """Long-format table with one row per ``(method, value)``.

    For the horizon axis each trajectory is simulated once at the largest
    horizon and truncated, which is exact because shorter trajectories are
    prefixes of longer ones.
    """
    if axis not in ("sigma", "horizon"):
        raise ValueError("axis must be 'sigma' or 'horizon'")
    values = list(values)
    rows = []
    for method in methods:
        if axis == "sigma":
            for v in values:
                mc = monte_carlo(config.replace(sigma=float(v)), method, jobs)
                rows.append(_row(method, axis, float(v), mc, config.record_timing))
        else:
            H_max = int(max(values))
            records = _run_rollouts(config.replace(horizon=H_max), method, jobs)
            for v in values:
                mc = _metrics(method, records, int(v))
                rows.append(_row(method, axis, int(v), mc, config.record_timing))
    return rows


def _row(method, axis, value, mc: BatchMetrics, timing: bool) -> dict:
    return {
        "method": method,
        "axis": axis,
        "value": value,
        "n_traj": mc.n_traj,
        "n_unsafe": mc.n_unsafe,
        "n_infeasible": mc.n_infeasible,
        "mean_solve_ms": mc.mean_solve_ms if timing else math.nan,
    }


# ---------------------------------------------------------------------------
# sigma_0 scan


def probe_states() -> list[np.ndarray]:
    return [np.array([0.0, y, 0.0]) for y in PROBE_Y]


def _scan_dataset(config, method, sigma):
    N = config.dataset_size(method)
    if N is None:
        return None
    Z = rng_stream(config.master_seed, 2, _METHOD_INDEX[method]).standard_normal((N, 3))
    return DisturbanceDataset(Z * np.array([0.0, sigma, 0.0]))


def probe_margins(config: SimConfig, method: str, sigma: float) -> list[float]:
    """Feasibility margin of ``method`` at every probe state for ``sigma``."""
    cfg = config.replace(sigma=float(sigma))
    data = _scan_dataset(config, method, sigma)
    out = []
    for x in probe_states():
        con = build_filter_constraint(cfg, method, x, data, sigma=sigma)
        out.append(float(feasibility_margin([con], config.u_box)))
    return out


def sigma0_search(config: SimConfig, method: str | None = None, grid=None):
    """Smallest grid value of sigma at which some probe state is infeasible.

    Returns ``(sigma0, rows)`` where ``sigma0`` is ``None`` when the grid is
    exhausted and ``rows`` lists ``(sigma, worst probe margin)``.
    """
    method = config.method if method is None else method
    if method == "none":
        raise ValueError("the unfiltered controller has no feasibility threshold")
    grid = config.sigma_grid() if grid is None else np.asarray(grid, dtype=float)
    rows = []
    for s in grid:
        worst = min(probe_margins(config, method, float(s)))
        rows.append((float(s), worst))
        if worst < 0.0:
            return float(s), rows
    return None, rows


# ---------------------------------------------------------------------------
# timing


def bench_states(config: SimConfig, n_states: int, source: str = "rollout", method: str = "none"):
    """States at which the filters are timed.

    ``rollout``: states visited by closed-loop rollouts of ``method``;
    ``uniform``: seeded uniform draws from the safe set with
    ``|theta| <= pi/4``.
    """
    if source == "uniform":
        rng = rng_stream(config.master_seed, 3)
        pts = np.column_stack([
            rng.uniform(-1.0, 1.0, n_states),
            rng.uniform(-0.5, 0.5, n_states),
            rng.uniform(-math.pi / 4, math.pi / 4, n_states),
        ])
        return list(pts)
    if source != "rollout":
        raise ValueError("source must be 'rollout' or 'uniform'")
    out = []
    traj = 0
    data = batch_dataset(config, method)
    while len(out) < n_states:
        rec = rollout(config, method, traj, data)
        out.extend(rec.states[:-1])
        traj += 1
    return [np.array(s) for s in out[:n_states]]


def bench(config: SimConfig, methods=METHODS, n_solves: int = 1000, backends=("generic", "auto"),
          source: str = "rollout") -> list[dict]:
    """Mean/median solver time of one filter step per method and backend.

    Dataset sampling and constraint construction are excluded.  With
    ``source="rollout"`` each method is timed on the states of its own
    closed-loop rollouts.  ``generic`` uses the general-purpose backends
    (interior point, SLSQP, branch-and-bound); ``auto`` lets the exact
    scalar backend take over when the structure allows it.
    """
    rows = []
    for method in methods:
        data = batch_dataset(config, method)
        states = bench_states(config, n_solves, source, method)
        for backend in backends if method != "none" else ("-",):
            be = None if backend == "-" else backend
            filter_input(config, method, states[0], data, be)  # warm-up (JIT, caches)
            times = np.empty(len(states))
            n_inf = n_active = 0
            for i, x in enumerate(states):
                u, status, _, secs = filter_input(config, method, x, data, be)
                times[i] = secs
                n_inf += status not in ("optimal", "nominal")
                n_active += status == "optimal" and not np.array_equal(u, corridor_nominal(x))
            rows.append({
                "method": method,
                "backend": backend,
                "source": source,
                "n_solves": len(states),
                "n_active": n_active,
                "mean_ms": float(times.mean() * 1e3),
                "median_ms": float(np.median(times) * 1e3),
                "max_ms": float(times.max() * 1e3),
                "n_infeasible": n_inf,
            })
    return rows


# ---------------------------------------------------------------------------
# CSV


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in header])
    return buf.getvalue()


SWEEP_COLUMNS = ("method", "axis", "value", "n_traj", "n_unsafe", "n_infeasible", "mean_solve_ms")
TRAJECTORY_COLUMNS = ("traj", "t", "x", "y", "theta", "h", "status")
BENCH_COLUMNS = ("method", "backend", "source", "n_solves", "n_active", "mean_ms", "median_ms", "max_ms", "n_infeasible")


def sweep_csv(rows) -> str:
    return _csv(SWEEP_COLUMNS, rows)


def bench_csv(rows) -> str:
    return _csv(BENCH_COLUMNS, rows)


def trajectory_csv(records) -> str:
    rows = []
    for r in records:
        hv = r.barrier_values
        for t, s in enumerate(r.states):
            rows.append({
                "traj": r.traj, "t": t, "x": float(s[0]), "y": float(s[1]), "theta": float(s[2]),
                "h": float(hv[t]), "status": r.statuses[t] if t < len(r.statuses) else "final",
            })
    return _csv(TRAJECTORY_COLUMNS, rows)


def write_text(path, text: str) -> None:
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
