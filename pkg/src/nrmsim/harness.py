"""Monte-Carlo experiments: regret tables, growth fits, dual convergence, myopic loss.

Work is split into tasks of a fixed number of replications. Every task is a
pure function of ``(configuration, seed, replication range)``, and results are
folded in task order, so tables do not depend on the number of workers.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import InstanceSpec, SamplePath, draw_arrays
from .offline import UnsupportedInstanceError, offline_integer, offline_lp
from .policies import EstimatorConfig, _Estimator, simulate_batch
from .solvers import DualSolver, semifluid_values

log = logging.getLogger(__name__)

DEFAULT_CHUNK = 250


class FitError(ValueError):
    pass


class BenchmarkViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class RegretRow:
    policy: str
    T: int
    mean: float
    stderr: float
    reps: int
    mean_vs_integer: float | None = None
    stderr_vs_integer: float | None = None


@dataclass
class RegretTable:
    rows: list = field(default_factory=list)

    def for_policy(self, policy: str) -> list:
        return [r for r in self.rows if r.policy == policy]

    def policies(self) -> list:
        seen = []
        for r in self.rows:
            if r.policy not in seen:
                seen.append(r.policy)
        return seen


@dataclass(frozen=True)
class GrowthFit:
    exponent: float
    coefficient: float
    r_squared: float
    residuals: np.ndarray
    x: np.ndarray


def mean_se(values) -> tuple:
    v = np.asarray(values, dtype=float)
    n = v.size
    mean = math.fsum(v) / n
    if n < 2:
        return mean, math.nan
    var = math.fsum((v - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


def _chunks(R: int, size: int):
    return [(lo, min(R, lo + size)) for lo in range(0, R, size)]


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *t) for t in tasks]
        return [f.result() for f in futures]


def resolve_workers(workers) -> int:
    if workers is None:
        env = os.environ.get("NRMSIM_WORKERS")
        return int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


# -- regret ------------------------------------------------------------------------


def _regret_chunk(spec: InstanceSpec, policies, seed: int, lo: int, hi: int, benchmark):
    draws = [draw_arrays(spec, seed, i) for i in range(lo, hi)]
    rewards = np.stack([d[0] for d in draws])
    types = np.stack([d[1] for d in draws])
    C = spec.capacities
    if isinstance(benchmark, EstimatorConfig):
        bench = simulate_batch(benchmark, spec, rewards, types)
    else:
        bench = np.empty(hi - lo)
        for k in range(hi - lo):
            bench[k] = offline_lp(SamplePath(rewards[k], types[k], spec.consumption), C).lp_value
    integer = None
    if benchmark == "lp":
        try:
            integer = np.array([offline_integer(SamplePath(rewards[k], types[k], spec.consumption), C)
                                for k in range(hi - lo)])
        except UnsupportedInstanceError:
            integer = None
    out = []
    for cfg in policies:
        got = simulate_batch(cfg, spec, rewards, types)
        if benchmark == "lp":
            worst = np.max(got - bench - 1e-9 * np.maximum(1.0, np.abs(bench)))
            if worst > 0:
                raise BenchmarkViolation(f"{cfg.label} beat the hindsight LP by {worst:.3g} on T={spec.horizon}")
        out.append((bench - got, None if integer is None else integer - got))
    return out


def estimate_regret(spec: InstanceSpec, policies, T_grid, replications: int, seed: int,
                    workers: int = 1, chunk_size: int = DEFAULT_CHUNK, benchmark="lp",
                    on_row=None) -> RegretTable:
    """Mean regret of each policy against the per-path benchmark for every horizon.

    ``benchmark`` is ``"lp"`` (hindsight LP, plus the exact integer optimum when
    it is cheap) or an ``EstimatorConfig`` whose collected reward is used instead.
    ``on_row`` is called with each finished row, in table order.
    """
    if replications < 2:
        raise ValueError("need at least 2 replications")
    policies = list(policies)
    chunks = _chunks(replications, chunk_size)
    table = RegretTable()
    for T in T_grid:
        spec_T = spec.with_horizon(int(T))
        tasks = [(spec_T, policies, seed, lo, hi, benchmark) for lo, hi in chunks]
        parts = _map(_regret_chunk, tasks, workers)
        for p_idx, cfg in enumerate(policies):
            reg = np.concatenate([part[p_idx][0] for part in parts])
            mean, se = mean_se(reg)
            mi = si = None
            if all(part[p_idx][1] is not None for part in parts):
                mi, si = mean_se(np.concatenate([part[p_idx][1] for part in parts]))
            row = RegretRow(cfg.label, int(T), mean, se, replications, mi, si)
            table.rows.append(row)
        # emit in configured policy order once the horizon is complete
        for row in table.rows[-len(policies):]:
            if on_row is not None:
                on_row(row)
    table.rows.sort(key=lambda r: ([c.label for c in policies].index(r.policy), r.T))
    return table


# -- growth fits -------------------------------------------------------------------


def fit_power_law(x, y) -> GrowthFit:
    """Least squares of ``log y`` on ``log x``; nonpositive ``y`` are dropped with a warning."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = y > 0
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} nonpositive cells from the growth fit", stacklevel=2)
    x, y = x[keep], y[keep]
    if np.unique(x).size < 4:
        raise FitError("growth fit needs at least 4 distinct positive points")
    lx, ly = np.log(x), np.log(y)
    design = np.column_stack([np.ones_like(lx), lx])
    coef, *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - design @ coef
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return GrowthFit(float(coef[1]), float(math.exp(coef[0])), r2, resid, x)


def fit_growth(table: RegretTable, policy: str) -> GrowthFit:
    rows = table.for_policy(policy)
    return fit_power_law([r.T for r in rows], [r.mean for r in rows])


# -- dual convergence --------------------------------------------------------------


@dataclass(frozen=True)
class DualGapRow:
    s: int
    type: int
    mean: float
    stderr: float
    reps: int


def _dual_gap_chunk(spec: InstanceSpec, ratio, s: int, mu_hat, seed: int, lo: int, hi: int):
    sub = spec.with_horizon(s - 1)
    c = np.asarray(ratio, dtype=float) * (s - 1)
    A = spec.consumption
    out = np.empty((hi - lo, spec.n))
    for k, rep in enumerate(range(lo, hi)):
        rewards, types = draw_arrays(sub, seed, rep)
        mu = offline_lp(SamplePath(rewards, types, A), c).dual
        out[k] = (A @ (mu - mu_hat)) ** 2
    return out


def dual_convergence_experiment(spec: InstanceSpec, ratio, s_grid, replications: int, seed: int,
                                workers: int = 1, chunk_size: int = DEFAULT_CHUNK):
    """Mean squared gap between sample and population bid prices per type.

    The capacity for ``s - 1`` remaining queries is ``ratio * (s - 1)``, so the
    population price is the same at every ``s``. Returns ``(rows, fit)`` with the
    fit taken on the arrival-weighted mean gap.
    """
    ratio = np.broadcast_to(np.asarray(ratio, dtype=float), (spec.m,))
    solver = DualSolver.for_spec(spec)
    mu_hat, ok = solver.solve(ratio[None, :], spec.probabilities)
    if not ok[0]:
        raise RuntimeError("population dual did not converge")
    mu_hat = mu_hat[0]
    rows, weighted = [], []
    for s in s_grid:
        s = int(s)
        if s < 2:
            raise ValueError("dual convergence needs s >= 2")
        tasks = [(spec, ratio, s, mu_hat, seed + 7919 * s, lo, hi) for lo, hi in _chunks(replications, chunk_size)]
        gaps = np.concatenate(_map(_dual_gap_chunk, tasks, workers))
        for j in range(spec.n):
            m_, se = mean_se(gaps[:, j])
            rows.append(DualGapRow(s, j, m_, se, replications))
        weighted.append(math.fsum(spec.probabilities * gaps.mean(axis=0)))
    try:
        fit = fit_power_law([int(s) for s in s_grid], weighted)
    except FitError:
        fit = None
    return rows, fit


# -- myopic loss -------------------------------------------------------------------


@dataclass(frozen=True)
class MyopicRow:
    s: int
    mean: float
    stderr: float
    reps: int


def _myopic_chunk(spec: InstanceSpec, c, s: int, q_pi, seed: int, chunk: int, lo: int, hi: int):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(s), int(chunk)])))
    k = hi - lo
    p = spec.probabilities
    A = spec.consumption
    j = rng.choice(spec.n, size=k, p=p)
    d_next = rng.multinomial(s - 1, p, size=k).astype(float)
    d_now = d_next.copy()
    d_now[np.arange(k), j] += 1.0
    solver = DualSolver.for_spec(spec)
    C = np.tile(c, (k, 1))
    v_now, ok1 = semifluid_values(solver, d_now, C)
    v_keep, ok2 = semifluid_values(solver, d_next, C)
    fits = np.all(c >= A[j], axis=1)
    q = np.where(fits, q_pi[j], 0.0)
    C_take = np.maximum(C - A[j], 0.0)
    v_take, ok3 = semifluid_values(solver, d_next, C_take)
    if not (ok1.all() and ok2.all() and ok3.all()):
        raise RuntimeError(f"semi-fluid solve failed at s={s}")
    top = np.array([spec.rewards[jj].top_mean(float(qq)) for jj, qq in zip(j, q)])
    return v_now - top - q * v_take - (1.0 - q) * v_keep


def policy_acceptance(spec: InstanceSpec, c, s: int, kappa1: float = 1.0) -> np.ndarray:
    """Acceptance probability ``P(r >= M_j)`` of the boundary-snapped fluid policy, per type."""
    sub = spec.with_horizon(s)
    est = _Estimator(EstimatorConfig("log2_fluid", kappa1), sub)
    C = np.tile(np.asarray(c, dtype=float), (spec.n, 1))
    M = est.thresholds(C, 1, np.arange(spec.n), {})
    return np.array([d.accept_prob(M[j]) for j, d in enumerate(spec.rewards)], dtype=float)


def myopic_decay_experiment(spec: InstanceSpec, s_grid, replications: int, seed: int, kappa1: float = 1.0,
                            workers: int = 1, chunk_size: int = DEFAULT_CHUNK, capacity=None):
    """One-period loss of the boundary-snapped fluid policy against the semi-fluid relaxation.

    At each ``s`` the state is ``c = capacity_ratio * s`` unless ``capacity`` maps
    ``s`` to an explicit vector. The reward of the current query is integrated
    out exactly; only the arriving type and the future counts are simulated.
    Returns ``(rows, fit)``.
    """
    rows = []
    for s in s_grid:
        s = int(s)
        c = np.asarray(capacity(s) if capacity else spec.capacity_ratio * s, dtype=float)
        q_pi = policy_acceptance(spec, c, s, kappa1)
        tasks = [(spec, c, s, q_pi, seed, i, lo, hi) for i, (lo, hi) in enumerate(_chunks(replications, chunk_size))]
        loss = np.concatenate(_map(_myopic_chunk, tasks, workers))
        m_, se = mean_se(loss)
        rows.append(MyopicRow(s, m_, se, replications))
    try:
        fit = fit_power_law([r.s for r in rows], [r.mean for r in rows])
    except FitError:
        fit = None
    return rows, fit
