"""Fluid and semi-fluid programs and their Lagrangian duals.

Both programs share the shape

    max  sum_j w_j * top_mean_j(q_j)
    s.t. sum_j w_j * a_j * q_j <= b,   0 <= q_j <= 1

with ``w = p`` and ``b = c / s`` for the fluid program and ``w = d / sum(d)``,
``b = c / sum(d)`` for the semi-fluid one. They are solved through the dual

    L(mu) = b . mu + sum_j w_j * E[(r_j - a_j . mu)^+],    mu in [0, gamma]

whose minimiser gives the thresholds: ``q_j = P(r_j > a_j . mu)``.

Every routine here is batched over a leading axis of independent problems;
each row runs its own iteration count, so a row's answer does not depend on
which other rows share the batch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import InstanceSpec, SamplePath, Uniform

log = logging.getLogger(__name__)

DUAL_TOL = 1e-11
# Newton steps per row; each step is exact on piecewise-quadratic pieces, so
# this budget is far above what any tested instance uses
_NEWTON_ITER = 200
_ARMIJO = 1e-4


class SolverError(RuntimeError):
    """A dual solve failed to converge; ``residual`` is the last optimality residual."""

    def __init__(self, message: str, residual: float = math.nan):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class DualDomain:
    """Box ``[0, upper]`` for the resource prices."""

    upper: np.ndarray

    @classmethod
    def default(cls, consumption: np.ndarray, dists, factor: float = 2.0) -> "DualDomain":
        A = np.asarray(consumption, dtype=float)
        u = np.array([d.upper for d in dists])
        bound = np.zeros(A.shape[1])
        for i in range(A.shape[1]):
            pos = A[:, i] > 0
            if pos.any():
                bound[i] = np.max(u[pos] / A[pos, i])
        # a resource nobody uses still needs a nonempty box
        bound = np.where(bound > 0, factor * bound, 1.0)
        return cls(bound)

    @classmethod
    def for_spec(cls, spec: InstanceSpec, factor: float = 2.0) -> "DualDomain":
        return cls.default(spec.consumption, spec.rewards, factor)

    def project(self, mu):
        return np.clip(mu, 0.0, self.upper)


@dataclass(frozen=True)
class FluidSolution:
    quantiles: np.ndarray
    dual: np.ndarray
    kkt_residual: float
    objective: float
    used: np.ndarray
    capacity: np.ndarray


class DualSolver:
    """Batched minimiser of ``L(mu)`` for one consumption matrix and set of reward laws."""

    def __init__(self, consumption, dists, domain: DualDomain | None = None, tol: float = DUAL_TOL):
        self.A = np.asarray(consumption, dtype=float)
        self.dists = list(dists)
        self.n, self.m = self.A.shape
        self.domain = domain or DualDomain.default(self.A, self.dists)
        self.gamma = np.asarray(self.domain.upper, dtype=float)
        self.tol = tol
        self.uniform_cols = np.array([j for j, d in enumerate(self.dists) if type(d) is Uniform],
                                     dtype=np.int64)
        self.other_cols = [j for j, d in enumerate(self.dists) if type(d) is not Uniform]
        self._ul = np.array([self.dists[j].lower for j in self.uniform_cols])
        self._uu = np.array([self.dists[j].upper for j in self.uniform_cols])
        self.atom_cols = [j for j, d in enumerate(self.dists) if not d.is_continuous]
        # all-atom rewards make the program a packing LP, solved exactly by simplex
        self.all_atoms = self.m > 1 and len(self.atom_cols) == self.n
        self._bk_cache: dict = {}

    @classmethod
    def for_spec(cls, spec: InstanceSpec, domain: DualDomain | None = None) -> "DualSolver":
        return cls(spec.consumption, spec.rewards, domain or DualDomain.for_spec(spec))

    # -- per-type primitives ---------------------------------------------------------

    def evaluate(self, theta):
        """Survival ``P(r > theta)``, density and ``E[(r - theta)^+]`` per type; shapes ``(R, n)``."""
        S = np.empty_like(theta)
        f = np.empty_like(theta)
        phi = np.empty_like(theta)
        if self.uniform_cols.size:
            th = theta[:, self.uniform_cols]
            w = self._uu - self._ul
            y = np.clip(th, self._ul, self._uu)
            S[:, self.uniform_cols] = (self._uu - y) / w
            f[:, self.uniform_cols] = np.where((th > self._ul) & (th < self._uu), 1.0 / w, 0.0)
            phi[:, self.uniform_cols] = np.where(
                th <= self._ul, 0.5 * (self._ul + self._uu) - th, (self._uu - y) ** 2 / (2.0 * w))
        for j in self.other_cols:
            d = self.dists[j]
            th = theta[:, j]
            S[:, j] = d.sf(th)
            f[:, j] = d.pdf(th)
            phi[:, j] = d.excess(th)
        return S, f, phi

    def value(self, mu, b, w):
        _, _, phi = self.evaluate(mu @ self.A.T)
        return np.einsum("ri,ri->r", b, mu) + np.einsum("rj,rj->r", w, phi)

    # -- solves ----------------------------------------------------------------------

    def solve(self, b, w, mu0=None):
        """Minimise ``L`` row-wise. ``b`` is ``(R, m)``; ``w`` is ``(n,)`` or ``(R, n)``.

        Returns ``(mu, ok)``; rows with ``ok == False`` hold the last iterate.
        """
        b = np.atleast_2d(np.asarray(b, dtype=float))
        shared = np.ndim(w) == 1
        W = np.broadcast_to(np.asarray(w, dtype=float), (b.shape[0], self.n))
        if self.m == 1:
            return self._solve_1d(b, W, np.asarray(w, dtype=float) if shared else None)
        if self.all_atoms:
            mu = np.array([self._packing_lp(b[r], W[r])[1] for r in range(b.shape[0])]).reshape(b.shape)
            return mu, np.ones(b.shape[0], dtype=bool)
        if mu0 is None:
            mu0 = np.zeros_like(b)
        return self._solve_newton(b, W, np.asarray(mu0, dtype=float))

    def _breakpoints(self, shared_w):
        a = self.A[:, 0]
        pts = [0.0, float(self.gamma[0])]
        for j, d in enumerate(self.dists):
            if a[j] > 0:
                pts += [d.lower / a[j], d.upper / a[j]]
        bk = np.unique(np.clip(np.array(pts), 0.0, self.gamma[0]))
        h_right = h_left = None
        if shared_w is not None:
            key = shared_w.tobytes()
            if key not in self._bk_cache:
                self._bk_cache[key] = (self._h(bk[None, :], shared_w[None, :], left=False)[0],
                                       self._h(bk[None, :], shared_w[None, :], left=True)[0])
            h_right, h_left = self._bk_cache[key]
        return bk, h_right, h_left

    def _h(self, mu, W, left=False):
        """``sum_j w_j a_j P(r_j > a_j mu)`` (or ``>=`` when ``left``); ``mu`` is ``(R, K)``."""
        a = self.A[:, 0]
        out = np.zeros(mu.shape)
        for j, d in enumerate(self.dists):
            if a[j] == 0:
                continue
            th = a[j] * mu
            s = d.accept_prob(th) if left else d.sf(th)
            out += (W[:, j:j + 1] * a[j]) * s
        return out

    def _solve_1d(self, b, W, shared_w):
        R = b.shape[0]
        bb = b[:, 0]
        bk, h_right, h_left = self._breakpoints(shared_w)
        if h_right is None:
            h_right = self._h(np.broadcast_to(bk, (R, bk.size)), W, left=False)
            h_left = self._h(np.broadcast_to(bk, (R, bk.size)), W, left=True)
        else:
            h_right = np.broadcast_to(h_right, (R, bk.size))
            h_left = np.broadcast_to(h_left, (R, bk.size))
        # h is nonincreasing; first breakpoint whose right limit is <= b
        below = h_right <= bb[:, None]
        k = np.where(below.any(axis=1), below.argmax(axis=1), bk.size - 1)
        rows = np.arange(R)
        mu = bk[k].copy()
        at_bk = (k == 0) | (h_left[rows, k] >= bb) | ~below[rows, k]
        need = np.nonzero(~at_bk)[0]
        ok = np.ones(R, dtype=bool)
        if need.size:
            lo = bk[k[need] - 1].copy()
            hi = bk[k[need]].copy()
            hlo = h_right[need, k[need] - 1]
            hhi = h_left[need, k[need]]
            target = bb[need]
            Wn = W[need]
            x = lo + (hlo - target) / np.where(hlo > hhi, hlo - hhi, 1.0) * (hi - lo)
            x = np.clip(x, lo, hi)
            active = np.arange(need.size)
            a = self.A[:, 0]
            for _ in range(_NEWTON_ITER):
                xa = x[active]
                th = xa[:, None] * a[None, :]
                S, f, _ = self.evaluate(th)
                g = target[active] - (Wn[active] * S) @ a
                # g < 0 left of the root, > 0 right of it
                lo[active] = np.where(g < 0, xa, lo[active])
                hi[active] = np.where(g > 0, xa, hi[active])
                slope = (Wn[active] * f) @ (a * a)
                step = np.where(slope > 0, -g / np.where(slope > 0, slope, 1.0), 0.0)
                nxt = xa + step
                bad = (slope <= 0) | (nxt <= lo[active]) | (nxt >= hi[active])
                nxt = np.where(bad, 0.5 * (lo[active] + hi[active]), nxt)
                done = (np.abs(g) <= self.tol * max(1.0, float(np.max(np.abs(target))))) | \
                       (hi[active] - lo[active] <= 4e-16 * np.maximum(1.0, hi[active]))
                x[active] = np.where(done, xa, nxt)
                active = active[~done]
                if active.size == 0:
                    break
            ok[need[active]] = False
            mu[need] = x
        return mu[:, None], ok

    def _solve_newton(self, b, W, mu0):
        """Two-metric projected Newton with Levenberg damping and an Armijo search on the projection arc."""
        A = self.A
        gam = self.gamma
        R = b.shape[0]
        mu = np.clip(np.array(mu0, dtype=float, copy=True), 0.0, gam)
        ok = np.zeros(R, dtype=bool)
        active = np.arange(R)
        eye = np.eye(self.m)
        scale = 1.0 + np.abs(b).max(axis=1)
        for _ in range(_NEWTON_ITER):
            if active.size == 0:
                break
            m_a, b_a, W_a = mu[active], b[active], W[active]
            S, f, phi = self.evaluate(m_a @ A.T)
            val = np.einsum("ri,ri->r", b_a, m_a) + np.einsum("rj,rj->r", W_a, phi)
            g = b_a - (W_a * S) @ A
            pg = m_a - np.clip(m_a - g, 0.0, gam)
            res = np.abs(pg).max(axis=1)
            conv = res <= self.tol * scale[active]
            ok[active[conv]] = True
            keep = ~conv
            active = active[keep]
            if active.size == 0:
                break
            m_a, b_a, W_a = m_a[keep], b_a[keep], W_a[keep]
            g, val, res, f = g[keep], val[keep], res[keep], f[keep]
            H = np.einsum("rj,ji,jk->rik", W_a * f, A, A)
            eps = np.minimum(1e-6, res)[:, None]
            bound = ((m_a <= eps) & (g > 0)) | ((m_a >= gam - eps) & (g < 0))
            lam = res + 1e-12 * (1.0 + np.trace(H, axis1=1, axis2=2))
            M = H + lam[:, None, None] * eye
            diag = np.einsum("rii->ri", M)
            cross = bound[:, :, None] | bound[:, None, :]
            M = np.where(cross, 0.0, M)
            M[:, np.arange(self.m), np.arange(self.m)] = diag
            d = np.linalg.solve(M, -g[:, :, None])[:, :, 0]
            step = np.ones(active.size)
            pending = np.arange(active.size)
            new_mu = m_a.copy()
            for _ls in range(60):
                trial = np.clip(m_a[pending] + step[pending, None] * d[pending], 0.0, gam)
                tS, _, tphi = self.evaluate(trial @ A.T)
                tv = np.einsum("ri,ri->r", b_a[pending], trial) + np.einsum("rj,rj->r", W_a[pending], tphi)
                decrease = np.einsum("ri,ri->r", g[pending], trial - m_a[pending])
                accept = tv <= val[pending] + _ARMIJO * decrease
                if _ls == 0:
                    # near the optimum value differences drown in rounding; a full
                    # step that shrinks the optimality residual is taken instead
                    tg = b_a[pending] - (W_a[pending] * tS) @ A
                    tres = np.abs(trial - np.clip(trial - tg, 0.0, gam)).max(axis=1)
                    accept |= tres < 0.5 * res[pending]
                new_mu[pending[accept]] = trial[accept]
                pending = pending[~accept]
                if pending.size == 0:
                    break
                step[pending] *= 0.5
            if pending.size:
                # stalled at rounding level: keep the iterate if it is already near-optimal
                near = res[pending] <= 1e-9 * scale[active[pending]]
                ok[active[pending[near]]] = True
                new_mu[pending] = m_a[pending]
                stalled = np.zeros(active.size, dtype=bool)
                stalled[pending] = True
                mu[active] = new_mu
                active = active[~stalled]
                continue
            mu[active] = new_mu
        return mu, ok

    def _packing_lp(self, b, w):
        from .simplex import solve_packing_lp

        vals = np.array([d.upper for d in self.dists])
        sol = solve_packing_lp(w * vals, (self.A * w[:, None]).T, np.maximum(b, 0.0))
        return sol.x, sol.dual

    # -- primal recovery -------------------------------------------------------------

    def recover(self, mu, b, W, tie_tol: float = 1e-9):
        """Threshold quantiles for dual ``mu``; atoms tied with their price are water-filled."""
        mu = np.atleast_2d(mu)
        W = np.broadcast_to(W, (mu.shape[0], self.n))
        if self.all_atoms:
            b = np.broadcast_to(b, mu.shape)
            return np.array([self._packing_lp(b[r], W[r])[0] for r in range(mu.shape[0])])
        theta = mu @ self.A.T
        q, _, _ = self.evaluate(theta)
        q = q.copy()
        if self.atom_cols:
            umax = max(1.0, max(d.upper for d in self.dists))
            cols = np.array(self.atom_cols)
            atoms = np.array([self.dists[j].lower for j in self.atom_cols])
            tie = (np.abs(theta[:, cols] - atoms) <= tie_tol * umax) & (W[:, cols] > 0)
            for row in np.flatnonzero(tie.any(axis=1)):
                q[row] = self._fill_ties(q[row], list(cols[tie[row]]), b[row], W[row])
        q = np.where(W > 0, q, 0.0)
        # clip rounding-level overuse so the recovered point is exactly feasible
        used = (W * q) @ self.A
        for i in range(self.m):
            over = used[:, i] > b[:, i]
            if not over.any():
                continue
            shrink = np.where(over, b[:, i] / np.where(over, used[:, i], 1.0), 1.0)
            cols = self.A[:, i] > 0
            q[:, cols] *= shrink[:, None]
            used = (W * q) @ self.A
        return q

    def _fill_ties(self, q, tied, b, w):
        q = q.copy()
        q[tied] = 0.0
        resid = b - (w * q) @ self.A
        per_unit = [self.dists[j].lower / max(self.A[j].sum(), 1e-300) for j in tied]
        for j in [tied[k] for k in np.argsort(per_unit, kind="stable")[::-1]]:
            use = w[j] * self.A[j]
            pos = use > 0
            if not pos.any():
                q[j] = 1.0
                continue
            q[j] = float(np.clip(np.min(np.maximum(resid[pos], 0.0) / use[pos]), 0.0, 1.0))
            resid = resid - use * q[j]
        return q

    def kkt_residual(self, mu, q, b, W):
        """Scaled max violation of primal feasibility, complementary slackness and the box."""
        mu = np.atleast_2d(mu)
        W = np.broadcast_to(W, (mu.shape[0], self.n))
        used = (W * q) @ self.A
        scale = np.maximum(1.0, b)
        feas = np.maximum(used - b, 0.0) / scale
        slack = np.abs(mu * (b - used)) / scale
        box = np.maximum(-mu, 0.0)
        return np.maximum(np.maximum(feas.max(axis=1), slack.max(axis=1)), box.max(axis=1))


def _top_means(dists, q):
    return np.array([d.top_mean(float(qj)) for d, qj in zip(dists, q)])


def _solution(solver: DualSolver, mu, b, w, total_weight, capacity):
    q = solver.recover(mu, b[None, :], w[None, :])[0]
    kkt = float(solver.kkt_residual(mu[None, :], q[None, :], b[None, :], w[None, :])[0])
    objective = total_weight * float(np.dot(w, _top_means(solver.dists, q)))
    used = total_weight * ((w * q) @ solver.A)
    return FluidSolution(q, mu, kkt, objective, used, np.asarray(capacity, dtype=float))


def _check_capacity(c, m):
    c = np.asarray(c, dtype=float).reshape(-1)
    if c.shape != (m,) or np.any(c < 0) or not np.all(np.isfinite(c)):
        raise ValueError(f"remaining capacity must be a nonnegative {m}-vector")
    return c


def solve_fluid(spec: InstanceSpec, c, s, domain: DualDomain | None = None,
                solver: DualSolver | None = None) -> FluidSolution:
    """Fluid program with expected counts ``p_j * s``; ``objective`` is in total (not per-period) units."""
    if s < 1:
        raise ValueError("periods_left must be >= 1")
    solver = solver or DualSolver.for_spec(spec, domain)
    c = _check_capacity(c, spec.m)
    b = c / s
    w = spec.probabilities
    mu, ok = solver.solve(b[None, :], w)
    if not ok[0]:
        res = float(solver.kkt_residual(mu, solver.recover(mu, b[None, :], w[None, :]), b[None, :], w[None, :])[0])
        raise SolverError("fluid dual did not converge", res)
    return _solution(solver, mu[0], b, w, float(s), c)


def solve_semifluid(spec: InstanceSpec, d, c, domain: DualDomain | None = None,
                    solver: DualSolver | None = None) -> FluidSolution:
    """Semi-fluid program with realised counts ``d``; types with ``d_j = 0`` get ``q_j = 0``."""
    solver = solver or DualSolver.for_spec(spec, domain)
    c = _check_capacity(c, spec.m)
    d = np.asarray(d, dtype=float)
    if d.shape != (spec.n,) or np.any(d < 0):
        raise ValueError(f"counts must be a nonnegative {spec.n}-vector")
    total = float(d.sum())
    if total == 0:
        z = np.zeros(spec.n)
        return FluidSolution(z, np.zeros(spec.m), 0.0, 0.0, np.zeros(spec.m), c)
    b = c / total
    w = d / total
    mu, ok = solver.solve(b[None, :], w)
    if not ok[0]:
        raise SolverError("semi-fluid dual did not converge")
    return _solution(solver, mu[0], b, w, total, c)


def semifluid_values(solver: DualSolver, D, C):
    """Batched semi-fluid optimal values for count rows ``D (R, n)`` and capacities ``C (R, m)``."""
    D = np.asarray(D, dtype=float)
    C = np.asarray(C, dtype=float)
    total = D.sum(axis=1)
    out = np.zeros(D.shape[0])
    live = total > 0
    if not live.any():
        return out, np.ones(D.shape[0], dtype=bool)
    tot = total[live]
    b = C[live] / tot[:, None]
    w = D[live] / tot[:, None]
    mu, ok_live = solver.solve(b, w)
    q = solver.recover(mu, b, w)
    tm = np.empty_like(q)
    for j, dist in enumerate(solver.dists):
        tm[:, j] = dist.top_mean(q[:, j])
    out[live] = np.einsum("rj,rj->r", D[live], tm)
    ok = np.ones(D.shape[0], dtype=bool)
    ok[live] = ok_live
    return out, ok


def population_dual_value(spec: InstanceSpec, mu, c, s) -> float:
    """``(c/(s-1)) . mu + E[(r - a . mu)^+]`` with the ``s - 1 >= 1`` convention."""
    solver = DualSolver.for_spec(spec)
    k = max(s - 1, 1)
    b = np.asarray(c, dtype=float)[None, :] / k
    return float(solver.value(np.atleast_2d(mu), b, spec.probabilities[None, :])[0])


def sample_dual_value(path: SamplePath, mu, c) -> float:
    """``(c/k) . mu + (1/k) sum_t (r_t - a_t . mu)^+`` over the ``k`` queries of ``path``."""
    k = max(len(path), 1)
    mu = np.asarray(mu, dtype=float)
    slack = np.maximum(path.rewards - path.item_consumption @ mu, 0.0)
    return (float(np.dot(c, mu)) + math.fsum(slack)) / k


def minimize_dual(spec: InstanceSpec, c, s, mode: str = "population", path: SamplePath | None = None,
                  domain: DualDomain | None = None):
    """Minimise the scaled dual ``(c/(s-1)) . mu + avg[(r - a . mu)^+]`` over the price box.

    ``mode="population"`` averages with the known reward laws; ``mode="sample"``
    averages over ``path``, which must hold the ``s - 1`` future queries. At
    ``s = 1`` the scaling uses ``s - 1 = 1``.
    """
    domain = domain or DualDomain.for_spec(spec)
    c = _check_capacity(c, spec.m)
    if mode == "population":
        k = max(s - 1, 1)
        solver = DualSolver.for_spec(spec, domain)
        b = c[None, :] / k
        mu, ok = solver.solve(b, spec.probabilities)
        if not ok[0]:
            raise SolverError("population dual did not converge")
        val = float(solver.value(mu, b, spec.probabilities[None, :])[0])
        return mu[0], val
    if mode == "sample":
        if path is None:
            raise ValueError("sample mode needs the suffix path")
        from .offline import solve_sample_lp

        sol = solve_sample_lp(path, c, domain)
        return sol.dual, sample_dual_value(path, sol.dual, c)
    raise ValueError(f"unknown mode {mode!r}")


def projected_residual(grad, mu, domain: DualDomain) -> float:
    mu = np.asarray(mu, dtype=float)
    return float(np.max(np.abs(mu - domain.project(mu - np.asarray(grad)))))
