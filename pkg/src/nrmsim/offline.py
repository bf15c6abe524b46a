"""Hindsight benchmarks on a realised sample path.

``offline_lp`` solves the fractional relaxation

    max sum_t r_t x_t   s.t.  sum_t a_t x_t <= c,  0 <= x_t <= 1

together with an optimal price vector for its capacity rows, which is a
minimiser of the sample dual ``c . mu + sum_t (r_t - a_t . mu)^+``.
``offline_integer`` gives the 0/1 optimum on instances where it is cheap.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .model import SamplePath
from .simplex import SimplexError, solve_packing_lp
from .solvers import DualDomain

_FEAS_TOL = 1e-9
_EXHAUSTIVE_MAX = 20


class UnsupportedInstanceError(ValueError):
    """The exact integer optimum is not available for this instance."""


class OfflineError(RuntimeError):
    pass


@dataclass(frozen=True)
class OfflineResult:
    lp_value: float
    x: np.ndarray
    dual: np.ndarray
    integer_value: float | None
    duality_gap: float


def dual_objective(rewards, consumption, c, mu) -> float:
    """Unscaled sample dual ``c . mu + sum_t (r_t - a_t . mu)^+``."""
    slack = np.maximum(np.asarray(rewards) - np.asarray(consumption) @ mu, 0.0)
    return math.fsum(np.concatenate([np.asarray(c, dtype=float) * mu, slack]))


def _knapsack(r, a, c):
    """Exact single-resource LP by ratio ordering. Returns ``(x, mu)``."""
    T = r.shape[0]
    x = np.zeros(T)
    free = a <= 0
    x[free & (r > 0)] = 1.0
    idx = np.flatnonzero(~free & (r > 0))
    if idx.size == 0:
        return x, 0.0
    ratio = r[idx] / a[idx]
    order = idx[np.argsort(-ratio, kind="stable")]
    cum = np.cumsum(a[order])
    # number of items that fit whole
    k = int(np.searchsorted(cum, c, side="right"))
    x[order[:k]] = 1.0
    if k == order.size:
        return x, 0.0
    used = cum[k - 1] if k else 0.0
    rem = c - used
    nxt = order[k]
    frac = rem / a[nxt]
    if frac > 0:
        x[nxt] = min(frac, 1.0)
        return x, float(r[nxt] / a[nxt])
    # capacity met exactly: lowest optimal price is the best rejected ratio
    return x, float(r[nxt] / a[nxt])


def _smoothed_dual_start(r, Aitems, c, scale):
    """Approximate sample-dual minimiser via Newton steps on a softplus smoothing."""
    m = Aitems.shape[1]
    y = np.zeros(m)

    def f(y, h):
        z = (r - Aitems @ y) / h
        return float(c @ y + h * np.sum(np.logaddexp(0.0, z)))

    for h in (0.05 * scale, 0.01 * scale, 0.002 * scale):
        for _ in range(30):
            z = (r - Aitems @ y) / h
            sig = 0.5 * (1.0 + np.tanh(0.5 * z))
            g = c - sig @ Aitems
            H = (Aitems * (sig * (1 - sig) / h)[:, None]).T @ Aitems
            fixed = (y <= 0) & (g > 0)
            H = H + (1e-10 * (1 + np.trace(H))) * np.eye(m)
            d = np.zeros(m)
            free = ~fixed
            if free.any():
                d[free] = np.linalg.solve(H[np.ix_(free, free)], -g[free])
            f0 = f(y, h)
            step = 1.0
            for _ls in range(40):
                trial = np.maximum(y + step * d, 0.0)
                if f(trial, h) <= f0 + 1e-4 * g @ (trial - y):
                    break
                step *= 0.5
            else:
                break
            if np.max(np.abs(trial - y)) <= 1e-12 * (1 + np.max(np.abs(y))):
                y = trial
                break
            y = trial
    return y


def _band_lp(r, Aitems, c, y0):
    """Exact LP: fix items far from the price ``y0``, solve the rest by simplex, certify."""
    T, m = Aitems.shape
    margin = r - Aitems @ y0
    order = np.argsort(np.abs(margin), kind="stable")
    K = min(T, max(4 * m + 8, 16))
    while True:
        band = np.zeros(T, dtype=bool)
        band[order[:K]] = True
        x = np.where(~band & (margin > 0), 1.0, 0.0)
        resid = c - x @ Aitems
        if np.all(resid >= -1e-12 * max(1.0, float(np.max(c)))) or K == T:
            if K == T:
                x[:] = 0.0
                resid = c.copy()
            resid = np.maximum(resid, 0.0)
            bi = np.flatnonzero(band)
            sol = solve_packing_lp(r[bi], Aitems[bi].T, resid)
            x[bi] = sol.x
            y = sol.dual
            if K == T:
                return x, y
            red = r - Aitems @ y
            out = ~band
            ok_hi = np.all(red[out & (x == 1.0)] >= -1e-12)
            ok_lo = np.all(red[out & (x == 0.0)] <= 1e-12)
            if ok_hi and ok_lo:
                return x, y
        K = min(T, 2 * K)


def offline_lp(path: SamplePath, c, domain: DualDomain | None = None, integer: bool = False) -> OfflineResult:
    """Fractional hindsight optimum with an optimal price vector.

    ``integer=True`` also fills ``integer_value`` when the exact 0/1 optimum is tractable.
    """
    c = np.asarray(c, dtype=float).reshape(-1)
    if np.any(c < 0):
        raise ValueError("capacity must be nonnegative")
    r = path.rewards
    Aitems = path.item_consumption
    m = Aitems.shape[1] if Aitems.ndim == 2 else 1
    if len(path) == 0:
        x = np.zeros(0)
        mu = np.zeros(m)
    elif m == 1:
        x, mu0 = _knapsack(r, Aitems[:, 0], float(c[0]))
        mu = np.array([mu0])
    else:
        scale = max(1.0, float(np.max(np.abs(r))))
        y0 = _smoothed_dual_start(r, Aitems, c, scale)
        try:
            x, mu = _band_lp(r, Aitems, c, y0)
        except SimplexError as exc:
            raise OfflineError(f"offline LP failed: {exc}") from exc
    used = x @ Aitems if len(path) else np.zeros(m)
    if np.any(used > c + _FEAS_TOL * np.maximum(1.0, c)):
        raise OfflineError(f"offline LP returned an infeasible point: used {used}, capacity {c}")
    lp_value = math.fsum(r * x)
    gap = abs(dual_objective(r, Aitems, c, mu) - lp_value)
    iv = None
    if integer:
        try:
            iv = offline_integer(path, c)
        except UnsupportedInstanceError:
            iv = None
    return OfflineResult(lp_value, x, mu, iv, gap)


def solve_sample_lp(path: SamplePath, c, domain: DualDomain | None = None) -> OfflineResult:
    return offline_lp(path, c, domain)


def lp_values(paths, C) -> np.ndarray:
    return np.array([offline_lp(p, C).lp_value for p in paths])


def offline_integer(path: SamplePath, C) -> float:
    """Exact 0/1 hindsight optimum.

    Unit-demand single resource: the top ``floor(C)`` rewards. Otherwise an
    exhaustive search over accept sets, limited to 20 periods.
    """
    C = np.asarray(C, dtype=float).reshape(-1)
    r = path.rewards
    Aitems = path.item_consumption
    if C.shape[0] == 1 and np.all(path.consumption == 1.0):
        k = int(math.floor(C[0] + 1e-9))
        top = np.sort(r)[::-1][:k]
        return math.fsum(top[top > 0])
    T = len(path)
    if T > _EXHAUSTIVE_MAX:
        raise UnsupportedInstanceError(f"exhaustive search limited to {_EXHAUSTIVE_MAX} periods, got {T}")
    if T == 0:
        return 0.0
    low = min(T, 12)
    masks = np.array(list(itertools.product((0.0, 1.0), repeat=low)))
    best = 0.0
    for prefix in itertools.product((0.0, 1.0), repeat=T - low):
        pre = np.asarray(prefix)
        base_use = pre @ Aitems[:T - low] if T > low else 0.0
        base_val = float(pre @ r[:T - low]) if T > low else 0.0
        used = base_use + masks @ Aitems[T - low:]
        feasible = np.all(used <= C + _FEAS_TOL, axis=1)
        if feasible.any():
            best = max(best, base_val + float(np.max(masks[feasible] @ r[T - low:])))
    return best


def dual_sandwich_check(path: SamplePath, c, a):
    """``(a . mu1, V(c) - V(c - a), a . mu2)`` with ``mu1``, ``mu2`` optimal prices at ``c`` and ``c - a``."""
    c = np.asarray(c, dtype=float)
    a = np.asarray(a, dtype=float)
    if np.any(c < a):
        raise ValueError("sandwich check needs c >= a")
    hi = offline_lp(path, c)
    lo = offline_lp(path, c - a)
    return float(a @ hi.dual), hi.lp_value - lo.lp_value, float(a @ lo.dual)
