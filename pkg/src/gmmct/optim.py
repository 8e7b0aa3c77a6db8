"""Numerical kernels shared by both reconstruction stages."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]

CONVERGED = "converged"
MAX_ITER = "max_iter"
LINE_SEARCH_FAILURE = "line_search_failure"


class NonFiniteObjectiveError(ValueError):
    """The objective or its gradient is not finite at the starting point."""


class DegeneracyWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# random numbers

RNG_NAME = "numpy.random.PCG64"


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def spawn_rngs(seed: int, n: int, stream: int = 0) -> list[np.random.Generator]:
    """``n`` independent child generators of ``(seed, stream)``.

    Child ``k`` depends only on the seed, the stream id and ``k``, so trials
    can run in any order or concurrently.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return [np.random.Generator(np.random.PCG64(c)) for c in ss.spawn(n)]


# ---------------------------------------------------------------------------
# L-BFGS


@dataclass
class MinimizeSettings:
    memory: int = 10
    gtol: float = 1e-8
    max_iter: int = 500
    c1: float = 1e-4
    c2: float = 0.9
    max_line_search: int = 40


@dataclass
class MinimizeResult:
    x: np.ndarray
    f: float
    grad_norm: float
    iterations: int
    status: str
    n_evals: int = 0
    trace: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def _cubic_min(a, fa, da, b, fb, db):
    # minimiser of the cubic through (a, fa, da), (b, fb, db); None if unusable
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - da * db
    if rad < 0:
        return None
    d2 = math.copysign(math.sqrt(rad), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


class _Probe:
    """Evaluates phi(step) = f(x + step d), remembering the best point seen."""

    def __init__(self, fun, x, d):
        self.fun, self.x, self.d = fun, x, d
        self.n = 0

    def __call__(self, step):
        self.n += 1
        f, g = self.fun(self.x + step * self.d)
        f = float(f)
        g = np.asarray(g, dtype=float)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            return math.inf, None, math.nan
        return f, g, float(g @ self.d)


def _strong_wolfe(probe: _Probe, f0, dphi0, step, c1, c2, max_evals):
    """Bracketing/zoom search. Returns (step, f, g) or None."""
    prev = (0.0, f0, dphi0, None)
    best = None  # best point meeting sufficient decrease
    for i in range(max_evals):
        f, g, dphi = probe(step)
        armijo = f <= f0 + c1 * step * dphi0
        if armijo and (best is None or f < best[1]):
            best = (step, f, g)
        if not armijo or (i > 0 and f >= prev[1]):
            return _zoom(probe, f0, dphi0, prev, (step, f, dphi, g), c1, c2,
                         max_evals - i - 1, best)
        if abs(dphi) <= -c2 * dphi0:
            return step, f, g
        if dphi >= 0:
            return _zoom(probe, f0, dphi0, (step, f, dphi, g), prev, c1, c2,
                         max_evals - i - 1, best)
        prev = (step, f, dphi, g)
        step = min(step * 4.0, 1e20)
    return best


def _zoom(probe, f0, dphi0, lo, hi, c1, c2, budget, best):
    for _ in range(max(budget, 0)):
        a_lo, f_lo, d_lo, _ = lo
        a_hi, f_hi, d_hi, _ = hi
        width = a_hi - a_lo
        if abs(width) <= 1e-16 * max(1.0, abs(a_lo)):
            break
        trial = None
        if np.isfinite(f_hi) and np.isfinite(d_hi):
            trial = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
        lo_b, hi_b = sorted((a_lo + 0.1 * width, a_hi - 0.1 * width))
        if trial is None or not (lo_b <= trial <= hi_b):
            trial = a_lo + 0.5 * width
        f, g, dphi = probe(trial)
        if f <= f0 + c1 * trial * dphi0 and (best is None or f < best[1]):
            best = (trial, f, g)
        if f > f0 + c1 * trial * dphi0 or f >= f_lo:
            hi = (trial, f, dphi, g)
        else:
            if abs(dphi) <= -c2 * dphi0:
                return trial, f, g
            if dphi * (a_hi - a_lo) >= 0:
                hi = lo
            lo = (trial, f, dphi, g)
    return best


def minimize(fun: Objective, x0, settings: MinimizeSettings | None = None,
             callback: Optional[Callable[[int, np.ndarray, float, float], None]] = None) -> MinimizeResult:
    """Limited-memory BFGS with a strong-Wolfe line search.

    ``fun(x)`` returns ``(f, grad)``. Accepted iterates never increase ``f``.
    A failed line search ends the run with the best iterate so far.
    """
    s = settings or MinimizeSettings()
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    f = float(f)
    g = np.asarray(g, dtype=float)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise NonFiniteObjectiveError("objective is not finite at the initial point")
    n_evals = 1
    S: list[np.ndarray] = []
    Y: list[np.ndarray] = []
    rho: list[float] = []
    gnorm = float(np.linalg.norm(g))
    trace = [(0, f, gnorm)]
    if callback:
        callback(0, x, f, gnorm)
    status = MAX_ITER
    it = 0
    retried = False
    while it < s.max_iter:
        if gnorm <= s.gtol:
            status = CONVERGED
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for si, yi, ri in zip(reversed(S), reversed(Y), reversed(rho)):
            ai = ri * (si @ q)
            alphas.append(ai)
            q -= ai * yi
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            q /= max(gnorm, 1e-300)
        for (si, yi, ri), ai in zip(zip(S, Y, rho), reversed(alphas)):
            bi = ri * (yi @ q)
            q += (ai - bi) * si
        d = -q
        dphi0 = float(g @ d)
        if not dphi0 < 0:
            S.clear(); Y.clear(); rho.clear()
            d = -g / max(gnorm, 1e-300)
            dphi0 = float(g @ d)
        probe = _Probe(fun, x, d)
        found = _strong_wolfe(probe, f, dphi0, 1.0, s.c1, s.c2, s.max_line_search)
        n_evals += probe.n
        if found is None or found[2] is None or not found[1] < f:
            if S and not retried:
                # drop curvature memory and try once more along -g
                S.clear(); Y.clear(); rho.clear()
                retried = True
                continue
            status = LINE_SEARCH_FAILURE
            break
        retried = False
        step, f_new, g_new = found
        sk = step * d
        yk = g_new - g
        sy = float(sk @ yk)
        if sy > 1e-12 * float(yk @ yk) and sy > 0:
            S.append(sk); Y.append(yk); rho.append(1.0 / sy)
            if len(S) > s.memory:
                S.pop(0); Y.pop(0); rho.pop(0)
        x = x + sk
        f, g = f_new, g_new
        gnorm = float(np.linalg.norm(g))
        it += 1
        trace.append((it, f, gnorm))
        if callback:
            callback(it, x, f, gnorm)
    else:
        if gnorm <= s.gtol:
            status = CONVERGED
    if status == MAX_ITER and gnorm <= s.gtol:
        status = CONVERGED
    return MinimizeResult(x=x, f=f, grad_norm=gnorm, iterations=it, status=status,
                          n_evals=n_evals, trace=trace)


# ---------------------------------------------------------------------------
# rectangular assignment


def _sap_assign(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path solver for n_rows <= n_cols.

    Returns ``col_for_row``. Plain Python floats: the problems met here are
    tiny, and per-element numpy indexing would dominate.
    """
    nr, nc = cost.shape
    c = cost.tolist()
    inf = math.inf
    u = [0.0] * nr
    v = [0.0] * nc
    col4row = [-1] * nr
    row4col = [-1] * nc
    for cur in range(nr):
        spc = [inf] * nc
        path = [-1] * nc
        scanned_rows = []
        scanned_cols = []
        remaining = list(range(nc))
        min_val = 0.0
        i = cur
        sink = -1
        while sink < 0:
            scanned_rows.append(i)
            lowest = inf
            best_idx = -1
            ci, ui = c[i], u[i]
            for idx, j in enumerate(remaining):
                red = min_val + ci[j] - ui - v[j]
                if red < spc[j]:
                    path[j] = i
                    spc[j] = red
                if spc[j] < lowest or (spc[j] == lowest and row4col[j] < 0):
                    lowest = spc[j]
                    best_idx = idx
            min_val = lowest
            if not math.isfinite(min_val):
                raise ValueError("assignment is infeasible")
            j = remaining.pop(best_idx)
            scanned_cols.append(j)
            if row4col[j] < 0:
                sink = j
            else:
                i = row4col[j]
        u[cur] += min_val
        for r in scanned_rows:
            if r != cur:
                u[r] += min_val - spc[col4row[r]]
        for j in scanned_cols:
            v[j] -= min_val - spc[j]
        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur:
                break
    return np.array(col4row, dtype=int)


def _assignment_cost(cost, rows, cols):
    return float(cost[rows, cols].sum())


def rectangular_assignment(cost, lexicographic: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost matching of ``min(n_rows, n_cols)`` row/column pairs.

    Returns ``(rows, cols)`` index arrays sorted by row. With
    ``lexicographic=True`` ties between optimal matchings are broken toward
    the lexicographically smallest ``(row, col)`` pair list; this costs a
    few extra solves and is meant for small problems.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or min(cost.shape) < 1:
        raise ValueError("cost must be a non-empty 2-D array")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    transposed = cost.shape[0] > cost.shape[1]
    c = cost.T if transposed else cost
    if lexicographic:
        rows, cols = _lex_assign(c)
    else:
        cols = _sap_assign(c)
        rows = np.arange(c.shape[0])
    if transposed:
        rows, cols = cols, rows
        order = np.argsort(rows)
        rows, cols = rows[order], cols[order]
    return np.asarray(rows, dtype=int), np.asarray(cols, dtype=int)


def _lex_assign(c: np.ndarray):
    nr, nc = c.shape
    best = _assignment_cost(c, np.arange(nr), _sap_assign(c))
    tol = 1e-12 * max(1.0, float(np.abs(c).max()) * nr)
    free_rows = list(range(nr))
    free_cols = list(range(nc))
    fixed_cost = 0.0
    cols = np.empty(nr, dtype=int)
    for i in range(nr):
        free_rows.remove(i)
        for j in list(free_cols):
            rest_cols = [k for k in free_cols if k != j]
            if free_rows:
                sub = c[np.ix_(free_rows, rest_cols)]
                sub_cost = _assignment_cost(sub, np.arange(len(free_rows)), _sap_assign(sub))
            else:
                sub_cost = 0.0
            if fixed_cost + c[i, j] + sub_cost <= best + tol:
                cols[i] = j
                fixed_cost += c[i, j]
                free_cols.remove(j)
                break
        else:  # numerical safety net: fall back to the plain solution
            return np.arange(nr), _sap_assign(c)
    return np.arange(nr), cols


# ---------------------------------------------------------------------------
# non-negative least squares


@dataclass
class NNLSInfo:
    iterations: int
    residual_norm: float
    rank_deficient: bool


def _lstsq(A: np.ndarray, b: np.ndarray):
    sol, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    return sol, rank < A.shape[1]


def nnls(A, b, max_iter: Optional[int] = None, return_info: bool = False, _inner: bool = False):
    """Lawson-Hanson active-set solution of ``min ||Ax - b||`` with ``x >= 0``.

    Subproblems are solved in the minimum-norm least-squares sense, so a
    rank-deficient passive set still yields a solution; a
    :class:`DegeneracyWarning` is emitted when that happens.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.ndim != 2 or A.shape[0] != b.size:
        raise ValueError("shape mismatch between A and b")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ValueError("A and b must be finite")
    m, n = A.shape
    max_iter = max_iter or 3 * n + 10
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    scale = max(1.0, float(np.abs(A).max()) * max(float(np.abs(b).max()), 1.0))
    tol = 10 * np.finfo(float).eps * max(m, n) * scale
    w = A.T @ (b - A @ x)
    deficient = False
    it = 0
    while it < max_iter and np.any(~passive) and np.max(np.where(passive, -np.inf, w)) > tol:
        it += 1
        t = int(np.argmax(np.where(passive, -np.inf, w)))
        passive[t] = True
        while True:
            idx = np.flatnonzero(passive)
            z = np.zeros(n)
            z[idx], defic = _lstsq(A[:, idx], b)
            deficient |= defic
            if np.all(z[idx] > 0):
                x = z
                break
            neg = idx[z[idx] <= 0]
            ratios = x[neg] / (x[neg] - z[neg])
            k = int(np.argmin(ratios))
            x = x + ratios[k] * (z - x)
            x[neg[k]] = 0.0
            passive &= x > 0
            x[~passive] = 0.0
            if not np.any(passive):
                break
        w = A.T @ (b - A @ x)
    if np.any(passive):
        # polish on the final passive set
        idx = np.flatnonzero(passive)
        z, defic = _lstsq(A[:, idx], b)
        if np.all(z > 0):
            x = np.zeros(n)
            x[idx] = z
        deficient |= defic
    if not _inner and np.linalg.matrix_rank(A) < n:
        deficient = True
        x = _min_norm_nnls(A, x, tol)
    if deficient and not _inner:
        warnings.warn("rank-deficient NNLS problem; minimum-norm solution returned",
                      DegeneracyWarning, stacklevel=2)
    if return_info:
        return x, NNLSInfo(it, float(np.linalg.norm(A @ x - b)), deficient)
    return x


def _ldp(G: np.ndarray, h: np.ndarray):
    """Least-distance programming: ``min ||x||`` subject to ``G x >= h``.

    Solved through the dual NNLS problem; returns ``None`` if infeasible.
    """
    k, n = G.shape
    E = np.vstack([G.T, h[None, :]])
    f = np.zeros(n + 1)
    f[-1] = 1.0
    u = nnls(E, f, _inner=True)
    r = E @ u - f
    if abs(r[-1]) <= 1e-14:
        return None
    return -r[:n] / r[-1]


def _min_norm_nnls(A: np.ndarray, x: np.ndarray, tol: float) -> np.ndarray:
    """Smallest-norm nonnegative vector with the same fitted values ``A x``."""
    n = A.shape[1]
    fit = A @ x
    slack = tol * max(1.0, float(np.abs(fit).max()))
    G = np.vstack([A, -A, np.eye(n)])
    h = np.concatenate([fit - slack, -fit - slack, np.zeros(n)])
    z = _ldp(G, h)
    if z is None or np.any(z < -slack):
        return x
    z = np.maximum(z, 0.0)
    if np.linalg.norm(A @ z - fit) > 10 * slack * np.sqrt(A.shape[0]) or z @ z >= x @ x:
        return x
    return z


def nnls_kkt_violation(A, b, x) -> float:
    """Largest violation of the NNLS optimality conditions at ``x``."""
    A = np.asarray(A, dtype=float)
    grad = A.T @ (A @ x - np.asarray(b, dtype=float))
    pos = x > 0
    viol = 0.0
    if np.any(pos):
        viol = max(viol, float(np.abs(grad[pos]).max()))
    if np.any(~pos):
        viol = max(viol, float(max(0.0, -grad[~pos].min())))
    if np.any(x < 0):
        viol = max(viol, float(-x.min()))
    return viol


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_gradient(fun: Objective, x, rel_step: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        h = rel_step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (fun(xp)[0] - fun(xm)[0]) / (xp[i] - xm[i])
    return out


def check_gradient(fun: Objective, x, rel_step: float = 1e-6, floor: float = 1e-6) -> float:
    """Worst per-coordinate disagreement between analytic and central-difference gradients.

    Each coordinate's error is scaled by the larger of the two magnitudes,
    but never by less than ``floor`` times the largest gradient entry, so
    entries that are negligibly small compared with the rest do not turn
    rounding noise into a large relative error.
    """
    x = np.asarray(x, dtype=float)
    _, g = fun(x)
    g = np.asarray(g, dtype=float)
    fd = finite_difference_gradient(fun, x, rel_step)
    big = max(float(np.abs(g).max(initial=0.0)), float(np.abs(fd).max(initial=0.0)))
    if big == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor * big)
    return float(np.max(np.abs(g - fd) / denom))
