"""Disturbance models, closed-form moments of the barrier increment,
datasets, seeded streams and the conformal empirical quantile."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .core import ControlAffineDynamics, DimensionError, QuadraticBarrier, as_vector

__all__ = [
    "UnsupportedModelError",
    "GaussianDisturbance",
    "DisturbanceDataset",
    "MomentSummary",
    "rng_stream",
    "corridor_disturbance",
    "next_state_moments",
    "delta_h_moments",
    "sample",
    "quantile_rank",
    "empirical_quantile",
    "save_dataset",
    "load_dataset",
]


class UnsupportedModelError(TypeError):
    """The disturbance model has no closed-form moments."""


def rng_stream(master_seed: int, *key: int) -> np.random.Generator:
    """Independent generator keyed by ``(master_seed, *key)``.

    Streams are derived with ``SeedSequence`` spawn keys, so the draws of
    one stream never depend on how many other streams exist or on the
    order they are consumed in.
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class GaussianDisturbance:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = as_vector(self.mean, name="mean")
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise DimensionError("cov must be d x d")
        if not np.allclose(cov, cov.T, atol=1e-12, rtol=0):
            raise ValueError("cov must be symmetric")
        cov = 0.5 * (cov + cov.T)
        w = np.linalg.eigvalsh(cov)
        if w.min(initial=0.0) < -1e-12 * max(1.0, w.max(initial=0.0)):
            raise ValueError("cov must be positive semidefinite")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def factor(self) -> np.ndarray:
        """A matrix ``L`` with ``L L' = cov``; diagonal when cov is."""
        cov = self.cov
        if np.count_nonzero(cov - np.diag(np.diag(cov))) == 0:
            return np.diag(np.sqrt(np.maximum(np.diag(cov), 0.0)))
        try:
            return np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(cov)
            return V * np.sqrt(np.maximum(w, 0.0))

    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))


def corridor_disturbance(sigma: float) -> GaussianDisturbance:
    """Zero-mean Gaussian acting on the lateral coordinate only."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return GaussianDisturbance(np.zeros(3), np.diag([0.0, sigma**2, 0.0]))


@dataclass(frozen=True)
class DisturbanceDataset:
    samples: np.ndarray
    source_seed: int | None = None

    def __post_init__(self):
        S = np.asarray(self.samples, dtype=np.float64)
        if S.ndim != 2 or S.shape[0] < 1:
            raise ValueError("dataset needs at least one sample row")
        if not np.all(np.isfinite(S)):
            raise ValueError("dataset has non-finite entries")
        S = np.ascontiguousarray(S)
        S.setflags(write=False)
        object.__setattr__(self, "samples", S)

    @property
    def N(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def __len__(self) -> int:
        return self.N


@dataclass(frozen=True)
class MomentSummary:
    mean_dh: float
    var_dh: float
    next_mean: np.ndarray
    next_cov_trace: float


def next_state_moments(dyn: ControlAffineDynamics, x, u, dist: GaussianDisturbance):
    """Mean and covariance of ``F(x, u, d)`` for additive ``d``."""
    a, B = dyn.parts(x)
    u = as_vector(u, dyn.m, "control")
    if dist.dim != dyn.n:
        raise DimensionError("disturbance dimension must equal state dimension")
    return a + B @ u + dist.mean, np.array(dist.cov)


def delta_h_moments(
    dyn: ControlAffineDynamics,
    h: QuadraticBarrier,
    alpha: float,
    x,
    u,
    dist,
) -> MomentSummary:
    """Exact mean and variance of ``h(F(x,u,d)) - alpha h(x)`` for Gaussian ``d``.

    With ``m = E[F]`` and ``S = Cov(F)``:
    ``E = h(m) + tr(QS) - alpha h(x)`` and
    ``Var = (g + 2Qm)' S (g + 2Qm) + 2 tr((QS)^2)``.
    """
    if not isinstance(dist, GaussianDisturbance):
        raise UnsupportedModelError(
            f"no closed-form moments for {type(dist).__name__}; use a data-based condition"
        )
    m, S = next_state_moments(dyn, x, u, dist)
    Q = h.Q
    QS = Q @ S
    hx = float(h.c0 + h.g @ np.asarray(x, dtype=float) + np.asarray(x) @ Q @ np.asarray(x))
    hm = float(h.c0 + h.g @ m + m @ Q @ m)
    grad = h.g + 2.0 * Q @ m
    mean = hm + float(np.trace(QS)) - alpha * hx
    var = float(grad @ S @ grad + 2.0 * np.trace(QS @ QS))
    return MomentSummary(mean, max(var, 0.0), m, float(np.trace(S)))


def sample(dist: GaussianDisturbance, N: int, seed: int | None = None, *, rng=None) -> DisturbanceDataset:
    """Draw ``N`` i.i.d. disturbances; reproducible for a fixed seed."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if rng is None:
        rng = rng_stream(0 if seed is None else seed)
    Z = rng.standard_normal((N, dist.dim))
    return DisturbanceDataset(dist.mean + Z @ dist.factor().T, source_seed=seed)


def _robust_ceil(x: float) -> int:
    # absorbs binary round-off such as (k+1)*(1-0.7) = 3.0000000000000004
    r = round(x)
    if abs(x - r) <= 1e-9 * max(1.0, abs(x)):
        return int(r)
    return math.ceil(x)


def quantile_rank(k: int, level: float) -> int:
    """Rank ``p = ceil((k+1) level)`` of the empirical ``level``-quantile of
    ``k`` values augmented with ``+inf``.  ``p = k + 1`` selects ``+inf``."""
    if k < 1:
        raise ValueError("need at least one value")
    return min(max(_robust_ceil((k + 1) * level), 1), k + 1)


def empirical_quantile(values, delta: float) -> float:
    """``(1 - delta)`` quantile of ``values`` together with ``+inf``.

    Sorts the ``k`` values, appends ``+inf`` and returns entry
    ``p = ceil((k+1)(1-delta))`` (1-based).  No interpolation.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    vals = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if vals.size == 0:
        raise ValueError("empirical_quantile needs at least one value")
    p = quantile_rank(vals.size, 1.0 - delta)
    return math.inf if p > vals.size else float(vals[p - 1])


def save_dataset(path, dataset: DisturbanceDataset) -> None:
    """Write one disturbance per line with a ``# d=<dim> n=<count>`` header."""
    with open(path, "w") as fh:
        fh.write(f"# d={dataset.dim} n={dataset.N}\n")
        for row in dataset.samples:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_dataset(path) -> DisturbanceDataset:
    dim = count = None
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "d":
                        dim = int(val)
                    elif key == "n":
                        count = int(val)
                continue
            rows.append([float(t) for t in line.split()])
    if not rows:
        raise ValueError(f"{os.fspath(path)}: no samples")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{os.fspath(path)}: ragged rows")
    if dim is not None and widths != {dim}:
        raise ValueError(f"{os.fspath(path)}: header d={dim} does not match rows")
    if count is not None and count != len(rows):
        raise ValueError(f"{os.fspath(path)}: header n={count} but {len(rows)} rows")
    return DisturbanceDataset(np.array(rows))
