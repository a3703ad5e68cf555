"""Hot numeric kernels.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical semantics.  The numba path is used when numba
imports cleanly and the environment variable ``PCBF_NO_NUMBA`` is unset
(or ``0``).  Set ``PCBF_NO_NUMBA=1`` to force the numpy path, e.g. for
debugging or on platforms without an LLVM toolchain.

The two paths agree to floating-point reassociation error, not bit for
bit; a single process always uses one path, so results within a run are
reproducible.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "quadratic_values",
    "quadratic_margins",
    "log_barrier_terms",
    "max_interval_coverage",
]


def _numba_requested() -> bool:
    flag = os.environ.get("PCBF_NO_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by PCBF_NO_NUMBA")
    import numba as nb

    njit = nb.njit(cache=True, nogil=True)
    HAVE_NUMBA = True
except ImportError:
    nb = None
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference path


def _quadratic_values_np(Z, c0, g, Q):
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    return c0 + Z @ g + np.einsum("ij,jk,ik->i", Z, Q, Z)


def _quadratic_margins_np(P, q, r, u):
    Pu = P @ u
    return Pu @ u + q @ u + r


def _log_barrier_terms_np(P, q, r, u, shift):
    # s_i = u'P_i u + q_i'u + r_i - shift
    Pu = P @ u
    s = Pu @ u + q @ u + r - shift
    smin = s.min()
    if smin <= 0.0:
        return np.inf, np.zeros_like(u), np.zeros((u.size, u.size)), smin
    grads = 2.0 * Pu + q
    inv = 1.0 / s
    value = -np.sum(np.log(s))
    grad = -(grads.T @ inv)
    gs = grads * inv[:, None]
    hess = gs.T @ gs - 2.0 * np.einsum("k,kij->ij", inv, P)
    return value, grad, hess, smin


def _max_interval_coverage_np(lo, hi, required, s_nom):
    # Sweep-line over closed intervals; returns the point of the region
    # covered at least `required` times that is closest to s_nom.
    k = lo.size
    pts = np.concatenate([lo, hi])
    kinds = np.concatenate([np.zeros(k, dtype=np.int64), np.ones(k, dtype=np.int64)])
    order = np.lexsort((kinds, pts))
    best = np.nan
    best_dist = np.inf
    depth = 0
    start = -np.inf
    for idx in order:
        x = pts[idx]
        if kinds[idx] == 0:
            depth += 1
            if depth == required:
                start = x
        else:
            if depth == required:
                a, b = start, x
                c = min(max(s_nom, a), b)
                dist = abs(c - s_nom)
                if dist < best_dist:
                    best_dist = dist
                    best = c
            depth -= 1
    return best


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit
    def _quadratic_values_nb(Z, c0, g, Q):
        N, n = Z.shape
        out = np.empty(N)
        for i in range(N):
            acc = c0
            for j in range(n):
                zj = Z[i, j]
                acc += g[j] * zj
                row = 0.0
                for k in range(n):
                    row += Q[j, k] * Z[i, k]
                acc += zj * row
            out[i] = acc
        return out

    @njit
    def _quadratic_margins_nb(P, q, r, u):
        K, m = q.shape
        out = np.empty(K)
        for i in range(K):
            acc = r[i]
            for j in range(m):
                acc += q[i, j] * u[j]
                row = 0.0
                for k in range(m):
                    row += P[i, j, k] * u[k]
                acc += u[j] * row
            out[i] = acc
        return out

    @njit
    def _log_barrier_terms_nb(P, q, r, u, shift):
        K, m = q.shape
        grad = np.zeros(m)
        hess = np.zeros((m, m))
        value = 0.0
        smin = np.inf
        gi = np.empty(m)
        for i in range(K):
            s = r[i] - shift
            for j in range(m):
                row = 0.0
                for k in range(m):
                    row += P[i, j, k] * u[k]
                gi[j] = 2.0 * row + q[i, j]
                s += u[j] * row + q[i, j] * u[j]
            if s < smin:
                smin = s
            if s <= 0.0:
                continue
            inv = 1.0 / s
            value -= np.log(s)
            for j in range(m):
                grad[j] -= gi[j] * inv
                for k in range(m):
                    hess[j, k] += gi[j] * gi[k] * inv * inv - 2.0 * P[i, j, k] * inv
        if smin <= 0.0:
            return np.inf, np.zeros(m), np.zeros((m, m)), smin
        return value, grad, hess, smin

    @njit
    def _max_interval_coverage_nb(lo, hi, required, s_nom):
        k = lo.size
        pts = np.empty(2 * k)
        kinds = np.empty(2 * k, dtype=np.int64)
        pts[:k] = lo
        pts[k:] = hi
        kinds[:k] = 0
        kinds[k:] = 1
        order = np.argsort(pts, kind="mergesort")
        # openings sort before closings at equal coordinates
        i = 0
        while i < 2 * k:
            j = i
            while j + 1 < 2 * k and pts[order[j + 1]] == pts[order[i]]:
                j += 1
            if j > i:
                seg = order[i : j + 1].copy()
                n_open = 0
                for t in range(seg.size):
                    if kinds[seg[t]] == 0:
                        n_open += 1
                a = 0
                b = n_open
                for t in range(seg.size):
                    if kinds[seg[t]] == 0:
                        order[i + a] = seg[t]
                        a += 1
                    else:
                        order[i + b] = seg[t]
                        b += 1
            i = j + 1
        best = np.nan
        best_dist = np.inf
        depth = 0
        start = -np.inf
        for t in range(2 * k):
            idx = order[t]
            x = pts[idx]
            if kinds[idx] == 0:
                depth += 1
                if depth == required:
                    start = x
            else:
                if depth == required:
                    c = min(max(s_nom, start), x)
                    dist = abs(c - s_nom)
                    if dist < best_dist:
                        best_dist = dist
                        best = c
                depth -= 1
        return best


# ---------------------------------------------------------------------------
# public dispatch


def quadratic_values(Z, c0, g, Q):
    """Evaluate ``c0 + g'z + z'Qz`` for every row ``z`` of ``Z``."""
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    Q = np.ascontiguousarray(Q, dtype=np.float64)
    if HAVE_NUMBA:
        return _quadratic_values_nb(Z, float(c0), g, Q)
    return _quadratic_values_np(Z, float(c0), g, Q)


def quadratic_margins(P, q, r, u):
    """Evaluate ``u'P_i u + q_i'u + r_i`` for a stack of quadratics."""
    u = np.ascontiguousarray(u, dtype=np.float64)
    if HAVE_NUMBA:
        return _quadratic_margins_nb(P, q, r, u)
    return _quadratic_margins_np(P, q, r, u)


def log_barrier_terms(P, q, r, u, shift=0.0):
    """Value, gradient, Hessian of ``-sum log(margin_i(u) - shift)``.

    Also returns the smallest slack ``min_i margin_i(u) - shift``; when it
    is not positive the value is ``inf`` and derivatives are zero.
    """
    u = np.ascontiguousarray(u, dtype=np.float64)
    if HAVE_NUMBA:
        return _log_barrier_terms_nb(P, q, r, u, float(shift))
    return _log_barrier_terms_np(P, q, r, u, float(shift))


def max_interval_coverage(lo, hi, required, s_nom):
    """Point closest to ``s_nom`` lying in at least ``required`` of the
    closed intervals ``[lo_i, hi_i]``; ``nan`` when no such point exists.
    Empty intervals must be dropped by the caller."""
    lo = np.ascontiguousarray(lo, dtype=np.float64)
    hi = np.ascontiguousarray(hi, dtype=np.float64)
    if lo.size == 0 or required > lo.size:
        return np.nan
    if HAVE_NUMBA:
        return _max_interval_coverage_nb(lo, hi, int(required), float(s_nom))
    return _max_interval_coverage_np(lo, hi, int(required), float(s_nom))
