"""Online accept/reject policies.

Every policy follows the same loop: in period ``t`` it forms a reward
threshold ``M`` for the arriving type and accepts iff ``r >= M`` and the
remaining capacity covers the query's consumption. Policies differ only in
how ``M`` is estimated:

``log2_fluid``
    re-solve the fluid program at ``(c_t, s)``; snap the acceptance quantile
    to always-accept / always-reject when it is within ``theta(s)`` of 1 or 0,
    otherwise use the matching reward quantile.
``resolve_plain``
    the same re-solve with ``theta = 0``.
``log_dual``
    price the query at ``a_j . mu`` where ``mu`` minimises the population dual
    with per-period capacity ``c_t / (T - t)``.
``static_bidprice``
    one fluid dual computed at ``(C, T)`` and never updated.
``greedy``
    accept whatever fits.

The simulation engine runs a batch of independent replications in lock
step, one period at a time, so the per-period solves vectorise across rows.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import InstanceSpec, SamplePath
from .solvers import DualDomain, DualSolver, SolverError, solve_fluid

log = logging.getLogger(__name__)

POLICY_KINDS = ("log2_fluid", "log_dual", "static_bidprice", "resolve_plain", "greedy")


@dataclass(frozen=True)
class EstimatorConfig:
    """Immutable policy description.

    ``resolve_every`` is the number of periods between re-solves; ``None``
    means every period for the re-solving policies and never for the static one.
    """

    kind: str
    kappa1: float = 1.0
    resolve_every: int | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {POLICY_KINDS}")
        if not (self.kappa1 > 0 and math.isfinite(self.kappa1)):
            raise ValueError("kappa1 must be positive")
        if self.resolve_every is not None and (int(self.resolve_every) != self.resolve_every or self.resolve_every < 1):
            raise ValueError("resolve_every must be a positive integer")

    @property
    def label(self) -> str:
        return self.name or self.kind

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "kappa1": self.kappa1}
        if self.resolve_every is not None:
            out["resolve_every"] = self.resolve_every
        if self.name is not None:
            out["name"] = self.name
        return out


def threshold_width(s: int, kappa1: float) -> float:
    """``3 * kappa1 * sqrt(log(s) / s)``, clamped to 1/2 for ``s <= 2``."""
    if s <= 2:
        return 0.5
    return 3.0 * kappa1 * math.sqrt(math.log(s) / s)


@dataclass
class PolicyState:
    capacity: np.ndarray
    period: int = 1
    cache: dict = field(default_factory=dict)


class _Estimator:
    """Batched threshold estimates for one policy configuration on one instance."""

    def __init__(self, cfg: EstimatorConfig, spec: InstanceSpec, domain: DualDomain | None = None):
        self.cfg = cfg
        self.spec = spec
        self.A = spec.consumption
        self.dists = spec.rewards
        self.lower = np.array([d.lower for d in self.dists])
        self.upper = np.array([d.upper for d in self.dists])
        self.p = spec.probabilities
        self.solver = None
        if cfg.kind != "greedy":
            self.solver = DualSolver.for_spec(spec, domain)
        self.static_mu = None
        if cfg.kind == "static_bidprice":
            self.static_mu = solve_fluid(spec, spec.capacities, spec.horizon, solver=self.solver).dual

    def _resolve_now(self, t: int) -> bool:
        k = self.cfg.resolve_every
        if k is None:
            return self.cfg.kind != "static_bidprice" or t == 1
        return (t - 1) % k == 0

    def thresholds(self, c, t: int, j, cache: dict):
        """Thresholds for rows in state ``c`` (R, m) at period ``t`` (1-based) for types ``j`` (R,)."""
        kind = self.cfg.kind
        R = c.shape[0]
        rows = np.arange(R)
        if kind == "greedy":
            return np.full(R, -np.inf)
        T = self.spec.horizon
        s = T - t + 1
        if kind == "static_bidprice":
            if self._resolve_now(t) and t > 1:
                cache["mu"], cache["ok"] = self.solver.solve(c / s, self.p, cache.get("mu"))
            mu = cache.get("mu")
            if mu is None:
                mu = np.broadcast_to(self.static_mu, c.shape)
                ok = np.ones(R, dtype=bool)
            else:
                ok = cache["ok"]
            M = np.einsum("ri,ri->r", self.A[j], mu)
            return np.where(ok, M, self.upper[j])
        if kind == "log_dual":
            if self._resolve_now(t) or "mu" not in cache:
                b = c / max(s - 1, 1)
                cache["mu"], cache["ok"] = self.solver.solve(b, self.p, cache.get("mu"))
            M = np.einsum("ri,ri->r", self.A[j], cache["mu"])
            bad = ~cache["ok"]
            if bad.any():
                log.warning("dual solve failed on %d rows at period %d; rejecting", int(bad.sum()), t)
            return np.where(cache["ok"], M, self.upper[j])
        # fluid re-solving policies
        if self._resolve_now(t) or "q" not in cache:
            b = c / s
            mu, ok = self.solver.solve(b, self.p, cache.get("mu"))
            cache["mu"], cache["ok"] = mu, ok
            cache["q"] = self.solver.recover(mu, b, np.broadcast_to(self.p, (R, self.p.size)))
            if (~ok).any():
                log.warning("fluid solve failed on %d rows at period %d; rejecting", int((~ok).sum()), t)
        q = cache["q"][rows, j]
        theta = 0.0 if kind == "resolve_plain" else threshold_width(s, self.cfg.kappa1)
        M = np.empty(R)
        hi = q >= 1.0 - theta
        lo = ~hi & (q <= theta)
        mid = ~hi & ~lo
        M[hi] = self.lower[j[hi]]
        M[lo] = self.upper[j[lo]]
        if mid.any():
            for jj in np.unique(j[mid]):
                sel = mid & (j == jj)
                M[sel] = self.dists[jj]._quantile(1.0 - q[sel])
        return np.where(cache["ok"], M, self.upper[j])


def simulate_batch(cfg: EstimatorConfig, spec: InstanceSpec, rewards, types, domain: DualDomain | None = None,
                   trace: bool = False, estimator: _Estimator | None = None):
    """Run ``cfg`` on ``R`` paths at once. ``rewards`` and ``types`` are ``(R, T)``.

    Returns total collected reward per row and, if ``trace``, a dict of
    ``(R, T)`` arrays: thresholds, accept flags and capacity before each decision.
    """
    rewards = np.atleast_2d(np.asarray(rewards, dtype=float))
    types = np.atleast_2d(np.asarray(types, dtype=np.int64))
    R, T = rewards.shape
    if T != spec.horizon:
        raise ValueError(f"paths have {T} periods, instance horizon is {spec.horizon}")
    est = estimator or _Estimator(cfg, spec, domain)
    A = spec.consumption
    c = np.tile(spec.capacities, (R, 1))
    accepted = np.zeros((R, T), dtype=bool)
    rec = None
    if trace:
        rec = {"threshold": np.empty((R, T)), "capacity": np.empty((R, T, spec.m))}
    cache: dict = {}
    for t0 in range(T):
        j = types[:, t0]
        r = rewards[:, t0]
        M = est.thresholds(c, t0 + 1, j, cache)
        a = A[j]
        take = (r >= M) & np.all(c >= a, axis=1)
        if rec is not None:
            rec["threshold"][:, t0] = M
            rec["capacity"][:, t0] = c
        accepted[:, t0] = take
        c = c - a * take[:, None]
    # exact per-row sums, independent of how rows were batched
    total = np.array([math.fsum(rewards[i, accepted[i]]) for i in range(R)])
    if rec is not None:
        rec["accept"] = accepted
        return total, rec
    return total


@dataclass(frozen=True)
class TraceRow:
    t: int
    type: int
    reward: float
    threshold: float
    accept: bool
    capacity: tuple


class Policy:
    """Single-run wrapper: owns its state, consults the shared estimator."""

    def __init__(self, cfg: EstimatorConfig, spec: InstanceSpec, domain: DualDomain | None = None):
        self.cfg = cfg
        self.spec = spec
        self.estimator = _Estimator(cfg, spec, domain)
        self.state = self.initial_state()

    def initial_state(self) -> PolicyState:
        return PolicyState(np.array(self.spec.capacities, dtype=float), 1, {})

    def estimate(self, state: PolicyState, j: int) -> float:
        c = np.asarray(state.capacity, dtype=float)[None, :]
        return float(self.estimator.thresholds(c, state.period, np.array([j]), state.cache)[0])


def decide(policy: Policy, state: PolicyState, query) -> bool:
    """Accept iff ``r >= M`` and capacity covers the query; advances ``state``."""
    r, j = query
    try:
        M = policy.estimate(state, int(j))
    except (SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("threshold estimate failed at period %d: %s", state.period, exc)
        M = math.inf
    a = policy.spec.consumption[int(j)]
    accept = bool(r >= M and np.all(state.capacity >= a))
    if accept:
        state.capacity = state.capacity - a
    state.period += 1
    return accept


def _single(spec, c, t, j, kind, kappa1=1.0):
    pol = Policy(EstimatorConfig(kind, kappa1), spec)
    state = PolicyState(np.asarray(c, dtype=float), t, {})
    return pol.estimate(state, j)


def estimate_log2(state: PolicyState, j: int, spec: InstanceSpec, kappa1: float = 1.0) -> float:
    """Boundary-snapped fluid threshold for type ``j`` at ``state``."""
    return _single(spec, state.capacity, state.period, j, "log2_fluid", kappa1)


def estimate_log(state: PolicyState, j: int, spec: InstanceSpec) -> float:
    """Population-dual bid price ``a_j . mu`` for type ``j`` at ``state``."""
    return _single(spec, state.capacity, state.period, j, "log_dual")


def run_policy(cfg: EstimatorConfig, spec: InstanceSpec, path: SamplePath):
    """Collected reward on one path and the per-period decision trace."""
    total, rec = simulate_batch(cfg, spec, path.rewards[None, :], path.types[None, :], trace=True)
    rows = [
        TraceRow(t + 1, int(path.types[t]), float(path.rewards[t]), float(rec["threshold"][0, t]),
                 bool(rec["accept"][0, t]), tuple(float(v) for v in rec["capacity"][0, t]))
        for t in range(len(path))
    ]
    return float(total[0]), rows
