"""Dense bounded-variable primal simplex for small packing LPs.

Solves

    max  r . x   s.t.  A x <= b,  0 <= x <= 1

with ``b >= 0`` so the all-slack basis is feasible from the start. Entering
and leaving variables are chosen by Bland's smallest-index rule, which rules
out cycling on the degenerate pivots that ties in the rewards produce.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_TOL = 1e-12
_REFACTOR = 50


class SimplexError(RuntimeError):
    pass


@dataclass
class SimplexResult:
    x: np.ndarray
    dual: np.ndarray
    value: float
    pivots: int


def solve_packing_lp(r, A, b, max_pivots: int = 100_000) -> SimplexResult:
    """``A`` is ``(m, K)``; returns an optimal vertex and the capacity duals."""
    r = np.asarray(r, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, K = A.shape
    if np.any(b < 0):
        raise SimplexError("right-hand side must be nonnegative")
    # columns 0..K-1 are x, K..K+m-1 are slacks
    full = np.hstack([A, np.eye(m)])
    cost = np.concatenate([r, np.zeros(m)])
    upper = np.concatenate([np.ones(K), np.full(m, np.inf)])
    basis = list(range(K, K + m))
    at_upper = np.zeros(K + m, dtype=bool)
    B_inv = np.eye(m)
    scale = max(1.0, float(np.max(np.abs(r))) if K else 1.0)
    tol = _TOL * scale

    def basic_values():
        rhs = b - full[:, at_upper] @ np.ones(int(at_upper.sum()))
        return B_inv @ rhs

    x_B = basic_values()
    pivots = 0
    since = 0
    while True:
        y = cost[basis] @ B_inv
        d = cost - y @ full
        is_basic = np.zeros(K + m, dtype=bool)
        is_basic[basis] = True
        improving = ~is_basic & (((~at_upper) & (d > tol)) | (at_upper & (d < -tol)))
        cand = np.flatnonzero(improving)
        if cand.size == 0:
            break
        e = int(cand[0])
        direction = -1.0 if at_upper[e] else 1.0
        alpha = B_inv @ full[:, e]
        delta = -direction * alpha  # change of x_B per unit step
        best = upper[e]
        leave = -1
        leave_to_upper = False
        for i in range(m):
            var = basis[i]
            if delta[i] < -1e-14:
                lim = max(x_B[i], 0.0) / -delta[i]
                to_up = False
            elif delta[i] > 1e-14 and np.isfinite(upper[var]):
                lim = max(upper[var] - x_B[i], 0.0) / delta[i]
                to_up = True
            else:
                continue
            if lim < best - 1e-15 or (leave >= 0 and abs(lim - best) <= 1e-15 and var < basis[leave]):
                best, leave, leave_to_upper = lim, i, to_up
        if not np.isfinite(best):
            raise SimplexError("unbounded direction in a bounded packing LP")
        pivots += 1
        if pivots > max_pivots:
            raise SimplexError("pivot budget exhausted")
        if leave < 0:
            # bound flip of the entering variable
            at_upper[e] = not at_upper[e]
            x_B = x_B + best * delta
            continue
        x_B = x_B + best * delta
        old = basis[leave]
        at_upper[old] = leave_to_upper
        basis[leave] = e
        at_upper[e] = False
        entering_value = (upper[e] - best) if direction < 0 else best
        x_B[leave] = entering_value
        # eta update of the basis inverse
        piv = alpha[leave]
        row = B_inv[leave] / piv
        B_inv = B_inv - np.outer(alpha, row)
        B_inv[leave] = row
        since += 1
        if since >= _REFACTOR:
            B_inv = np.linalg.inv(full[:, basis])
            x_B = basic_values()
            since = 0
    B_inv = np.linalg.inv(full[:, basis])
    x_B = basic_values()
    xs = np.where(at_upper, upper, 0.0)
    xs[np.isinf(xs)] = 0.0
    xs[basis] = x_B
    x = np.clip(xs[:K], 0.0, 1.0)
    y = np.maximum(cost[basis] @ B_inv, 0.0)
    return SimplexResult(x, y, float(r @ x), pivots)
