"""Instances, reward distributions and sample-path generation.

An instance has ``n`` query types. Type ``j`` consumes the fixed vector
``a_j`` of the ``m`` resources, arrives with probability ``p_j`` and carries a
reward drawn from a distribution supported on ``[l_j, u_j]``. Capacities scale
linearly with the horizon, ``C_i = rho_i * T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import integrate


class ConfigurationError(ValueError):
    """Invalid instance or run configuration."""


class DomainError(ValueError):
    """Argument outside the domain of a distribution function."""


def _check_prob(p):
    arr = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError(f"probability outside [0, 1]: {p!r}")
    return arr


class RewardDistribution:
    """Reward law on ``[lower, upper]``.

    Subclasses implement the vectorised primitives ``cdf``, ``sf``, ``pdf``,
    ``_quantile`` and ``excess``; ``quantile`` and ``top_mean`` are derived.
    ``sf(x)`` is ``P(r > x)`` and ``accept_prob(x)`` is ``P(r >= x)``; the two
    differ only at atoms.
    """

    kind: str = "abstract"
    lower: float
    upper: float

    @property
    def density_floor(self) -> float:
        raise NotImplementedError

    @property
    def density_ceiling(self) -> float:
        raise NotImplementedError

    @property
    def is_continuous(self) -> bool:
        return True

    def cdf(self, x):
        raise NotImplementedError

    def sf(self, x):
        return 1.0 - self.cdf(x)

    def accept_prob(self, x):
        return self.sf(x)

    def pdf(self, x):
        raise NotImplementedError

    def excess(self, x):
        """``E[(r - x)^+]``."""
        raise NotImplementedError

    def _quantile(self, p):
        raise NotImplementedError

    def quantile(self, p):
        """Inverse CDF ``F^{-1}(p)`` for ``p`` in ``[0, 1]``."""
        arr = _check_prob(p)
        out = self._quantile(arr)
        return float(out) if np.ndim(p) == 0 else out

    def top_mean(self, q):
        """``int_{1-q}^{1} F^{-1}(p) dp``: reward collected by accepting the top ``q`` fraction."""
        q = _check_prob(q)
        theta = self._quantile(1.0 - q)
        out = q * theta + self.excess(theta)
        return float(out) if np.ndim(out) == 0 else out

    @property
    def mean(self) -> float:
        return float(self.excess(self.lower) + self.lower)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Uniform(RewardDistribution):
    lower: float
    upper: float
    kind = "uniform"

    def __post_init__(self):
        if not (0.0 <= self.lower < self.upper) or not math.isfinite(self.upper):
            raise ConfigurationError(
                f"uniform needs 0 <= l < u < inf, got l={self.lower}, u={self.upper}"
            )

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def density_floor(self) -> float:
        return 1.0 / self.width

    @property
    def density_ceiling(self) -> float:
        return 1.0 / self.width

    def cdf(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.lower) / self.width, 0.0, 1.0)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x > self.lower) & (x < self.upper), 1.0 / self.width, 0.0)

    def excess(self, x):
        x = np.asarray(x, dtype=float)
        inside = (self.upper - np.clip(x, self.lower, self.upper)) ** 2 / (2.0 * self.width)
        below = 0.5 * (self.lower + self.upper) - x
        return np.where(x <= self.lower, below, inside)

    def _quantile(self, p):
        return self.lower + self.width * p

    def to_dict(self) -> dict:
        return {"kind": self.kind, "l": self.lower, "u": self.upper}


@dataclass(frozen=True)
class TruncatedLinear(RewardDistribution):
    """Density varying linearly from ``f_lower`` at ``lower`` to ``f_upper`` at ``upper``."""

    lower: float
    upper: float
    f_lower: float
    f_upper: float
    kind = "truncated-linear"

    def __post_init__(self):
        if not (0.0 <= self.lower < self.upper) or not math.isfinite(self.upper):
            raise ConfigurationError(
                f"truncated-linear needs 0 <= l < u < inf, got l={self.lower}, u={self.upper}"
            )
        if self.f_lower < 0 or self.f_upper < 0:
            raise ConfigurationError("truncated-linear densities must be nonnegative")
        mass = 0.5 * (self.f_lower + self.f_upper) * (self.upper - self.lower)
        if abs(mass - 1.0) > 1e-9:
            raise ConfigurationError(f"truncated-linear density integrates to {mass}, not 1")

    @classmethod
    def from_lower_density(cls, lower: float, upper: float, f_lower: float) -> "TruncatedLinear":
        f_upper = 2.0 / (upper - lower) - f_lower
        # the steepest density leaves a rounding-level negative at the top
        if -1e-12 * f_lower <= f_upper < 0:
            f_upper = 0.0
        return cls(lower, upper, f_lower, f_upper)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def slope(self) -> float:
        return (self.f_upper - self.f_lower) / self.width

    @property
    def density_floor(self) -> float:
        return min(self.f_lower, self.f_upper)

    @property
    def density_ceiling(self) -> float:
        return max(self.f_lower, self.f_upper)

    def cdf(self, x):
        y = np.clip(np.asarray(x, dtype=float) - self.lower, 0.0, self.width)
        return np.minimum(self.f_lower * y + 0.5 * self.slope * y * y, 1.0)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        dens = self.f_lower + self.slope * (x - self.lower)
        return np.where((x > self.lower) & (x < self.upper), dens, 0.0)

    def excess(self, x):
        x = np.asarray(x, dtype=float)
        w, k, f0 = self.width, self.slope, self.f_lower
        y = np.clip(x - self.lower, 0.0, w)
        inside = 0.5 * f0 * (w - y) ** 2 + k * ((w**3 - y**3) / 3.0 - 0.5 * y * (w * w - y * y))
        mean = self.lower + 0.5 * f0 * w * w + k * w**3 / 3.0
        return np.where(x <= self.lower, mean - x, inside)

    def _quantile(self, p):
        # root of 0.5*k*y^2 + f0*y - p = 0 in the cancellation-free form
        disc = np.sqrt(np.maximum(self.f_lower**2 + 2.0 * self.slope * p, 0.0))
        denom = self.f_lower + disc
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.where(denom > 0, 2.0 * p / np.where(denom > 0, denom, 1.0), 0.0)
        return self.lower + np.clip(y, 0.0, self.width)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "l": self.lower, "u": self.upper,
                "f_l": self.f_lower, "f_u": self.f_upper}


@dataclass(frozen=True)
class PointMass(RewardDistribution):
    value: float
    kind = "point-mass"

    def __post_init__(self):
        if not (0.0 <= self.value < math.inf):
            raise ConfigurationError(f"point-mass value must be finite and >= 0, got {self.value}")

    @property
    def lower(self) -> float:  # type: ignore[override]
        return self.value

    @property
    def upper(self) -> float:  # type: ignore[override]
        return self.value

    @property
    def is_continuous(self) -> bool:
        return False

    @property
    def density_floor(self) -> float:
        return math.inf

    @property
    def density_ceiling(self) -> float:
        return math.inf

    def cdf(self, x):
        return np.where(np.asarray(x, dtype=float) >= self.value, 1.0, 0.0)

    def sf(self, x):
        return np.where(np.asarray(x, dtype=float) < self.value, 1.0, 0.0)

    def accept_prob(self, x):
        return np.where(np.asarray(x, dtype=float) <= self.value, 1.0, 0.0)

    def pdf(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def excess(self, x):
        return np.maximum(self.value - np.asarray(x, dtype=float), 0.0)

    def _quantile(self, p):
        return np.full_like(np.asarray(p, dtype=float), self.value)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "l": self.value, "u": self.value}


@dataclass(frozen=True)
class CustomDistribution(RewardDistribution):
    """User-supplied continuous law; quantiles by bisection, excess by quadrature."""

    cdf_fn: Callable[[float], float]
    pdf_fn: Callable[[float], float]
    lower: float
    upper: float
    floor: float
    ceiling: float = math.inf
    kind = "custom"

    @property
    def density_floor(self) -> float:
        return self.floor

    @property
    def density_ceiling(self) -> float:
        return self.ceiling

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        vals = np.vectorize(lambda v: 0.0 if v <= self.lower else 1.0 if v >= self.upper
                            else float(self.cdf_fn(v)))(x)
        return vals.astype(float)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        vals = np.vectorize(lambda v: float(self.pdf_fn(v)) if self.lower < v < self.upper
                            else 0.0)(x)
        return vals.astype(float)

    def _excess_scalar(self, v: float) -> float:
        if v >= self.upper:
            return 0.0
        lo = max(v, self.lower)
        tail, _ = integrate.quad(lambda r: 1.0 - float(self.cdf_fn(r)), lo, self.upper,
                                 epsabs=1e-12, epsrel=1e-12, limit=200)
        return tail + (lo - v)

    def excess(self, x):
        x = np.asarray(x, dtype=float)
        return np.vectorize(self._excess_scalar)(x).astype(float)

    def _quantile_scalar(self, p: float) -> float:
        lo, hi = self.lower, self.upper
        if p <= 0.0:
            return lo
        if p >= 1.0:
            return hi
        while hi - lo > 1e-12:
            mid = 0.5 * (lo + hi)
            if self.cdf_fn(mid) < p:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def _quantile(self, p):
        return np.vectorize(self._quantile_scalar)(np.asarray(p, dtype=float)).astype(float)

    def to_dict(self) -> dict:
        raise ConfigurationError("custom distributions cannot be serialised")


def make_distribution(kind: str, l: float, u: float, **params) -> RewardDistribution:
    if kind == "uniform":
        return Uniform(l, u)
    if kind == "truncated-linear":
        return TruncatedLinear(l, u, params["f_l"], params["f_u"])
    if kind == "point-mass":
        if l != u:
            raise ConfigurationError(f"point-mass needs l == u, got {l}, {u}")
        return PointMass(l)
    raise ConfigurationError(f"unknown reward kind {kind!r}")


@dataclass(frozen=True)
class QueryType:
    consumption: np.ndarray
    probability: float
    reward: RewardDistribution

    def __post_init__(self):
        a = np.asarray(self.consumption, dtype=float)
        a.setflags(write=False)
        object.__setattr__(self, "consumption", a)
        if a.ndim != 1 or np.any(a < 0) or not np.all(np.isfinite(a)):
            raise ConfigurationError("consumption must be a finite nonnegative vector")
        if not (0.0 < self.probability <= 1.0):
            raise ConfigurationError(f"type probability must lie in (0, 1], got {self.probability}")


@dataclass(frozen=True)
class InstanceSpec:
    types: tuple
    capacity_ratio: np.ndarray
    horizon: int

    def __post_init__(self):
        types = tuple(self.types)
        object.__setattr__(self, "types", types)
        rho = np.asarray(self.capacity_ratio, dtype=float)
        rho.setflags(write=False)
        object.__setattr__(self, "capacity_ratio", rho)
        if not types:
            raise ConfigurationError("instance needs at least one query type")
        if rho.ndim != 1 or np.any(rho <= 0) or not np.all(np.isfinite(rho)):
            raise ConfigurationError("capacity ratios must be positive and finite")
        for j, qt in enumerate(types):
            if qt.consumption.shape != rho.shape:
                raise ConfigurationError(
                    f"type {j} consumes {qt.consumption.shape[0]} resources, instance has {rho.shape[0]}"
                )
        total = math.fsum(qt.probability for qt in types)
        if abs(total - 1.0) > 1e-12:
            raise ConfigurationError(f"type probabilities sum to {total!r}, not 1")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ConfigurationError(f"horizon must be a positive integer, got {self.horizon}")
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def m(self) -> int:
        return self.capacity_ratio.shape[0]

    @property
    def n(self) -> int:
        return len(self.types)

    @property
    def consumption(self) -> np.ndarray:
        return np.stack([qt.consumption for qt in self.types])

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([qt.probability for qt in self.types])

    @property
    def rewards(self) -> list:
        return [qt.reward for qt in self.types]

    @property
    def capacities(self) -> np.ndarray:
        return self.capacity_ratio * self.horizon

    def with_horizon(self, horizon: int) -> "InstanceSpec":
        return replace(self, horizon=horizon)

    def is_unit_single_resource(self) -> bool:
        return self.m == 1 and bool(np.all(self.consumption == 1.0))


def build_instance(consumption: Sequence[Sequence[float]], probabilities: Sequence[float],
                   rewards: Sequence[RewardDistribution], capacity_ratio: Sequence[float],
                   horizon: int) -> InstanceSpec:
    types = [QueryType(np.asarray(a, dtype=float), float(p), r)
             for a, p, r in zip(consumption, probabilities, rewards)]
    return InstanceSpec(tuple(types), np.asarray(capacity_ratio, dtype=float), horizon)


def example2(epsilon: float, horizon: int = 1000) -> InstanceSpec:
    """Three resources, three types, uniform(0,1) rewards; all constraints bind
    at the fluid optimum while one price is zero."""
    e = float(epsilon)
    denom = 1.0 + 5.0 * e
    probs = [2 * e / denom, (1 + e) / denom, 2 * e / denom]
    ratio = 2 * e * (1 + e) / denom
    return build_instance(
        [(0, 1, 1), (1, 0, 1), (1, 1, 0)],
        probs,
        [Uniform(0.0, 1.0)] * 3,
        [ratio] * 3,
        horizon,
    )


def single_resource_uniform(ratio: float = 0.5, horizon: int = 1000) -> InstanceSpec:
    return build_instance([(1.0,)], [1.0], [Uniform(0.0, 1.0)], [ratio], horizon)


@dataclass(frozen=True)
class SamplePath:
    """One realised arrival sequence. ``types`` are 0-based indices into ``consumption``."""

    rewards: np.ndarray
    types: np.ndarray
    consumption: np.ndarray
    _suffix: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        r = np.asarray(self.rewards, dtype=float)
        j = np.asarray(self.types, dtype=np.int64)
        a = np.asarray(self.consumption, dtype=float)
        if r.shape != j.shape or r.ndim != 1:
            raise ValueError("rewards and types must be 1-D arrays of equal length")
        for arr in (r, j, a):
            arr.setflags(write=False)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "types", j)
        object.__setattr__(self, "consumption", a)

    def __len__(self) -> int:
        return self.rewards.shape[0]

    @property
    def n(self) -> int:
        return self.consumption.shape[0]

    @property
    def item_consumption(self) -> np.ndarray:
        return self.consumption[self.types]

    @property
    def suffix_counts(self) -> np.ndarray:
        """``(n, T+1)`` array; column ``t`` counts type arrivals in periods ``t..T-1`` (0-based)."""
        if self._suffix is None:
            T = len(self)
            onehot = np.zeros((self.n, T + 1), dtype=np.int64)
            onehot[self.types, np.arange(T)] = 1
            counts = np.cumsum(onehot[:, ::-1], axis=1)[:, ::-1]
            counts.setflags(write=False)
            object.__setattr__(self, "_suffix", counts)
        return self._suffix

    def counts(self) -> np.ndarray:
        return np.bincount(self.types, minlength=self.n)

    def suffix(self, t: int) -> "SamplePath":
        """Periods ``t, ..., T-1`` (0-based)."""
        return SamplePath(self.rewards[t:], self.types[t:], self.consumption)


def _rng(seed: int, replication: int) -> np.random.Generator:
    # Philox is counter-based: the stream for (seed, replication) does not
    # depend on what other replications have been drawn.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replication)])))


def draw_arrays(spec: InstanceSpec, seed: int, replication: int) -> tuple:
    uniforms = _rng(seed, replication).random((spec.horizon, 2))
    cum = np.cumsum(spec.probabilities)
    cum[-1] = 1.0
    types = np.minimum(np.searchsorted(cum, uniforms[:, 0], side="right"), spec.n - 1)
    rewards = np.empty(spec.horizon)
    for j, qt in enumerate(spec.types):
        mask = types == j
        if mask.any():
            rewards[mask] = qt.reward._quantile(uniforms[mask, 1])
    return rewards, types


def sample_path(spec: InstanceSpec, seed: int, replication: int) -> SamplePath:
    """Draw a path; identical ``(spec, seed, replication)`` give bit-identical paths."""
    if not isinstance(spec, InstanceSpec):
        raise ConfigurationError("sample_path needs an InstanceSpec")
    rewards, types = draw_arrays(spec, seed, replication)
    return SamplePath(rewards, types, spec.consumption)
