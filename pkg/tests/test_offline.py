import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import linprog

from nrmsim.model import SamplePath, Uniform, build_instance, example2, sample_path, single_resource_uniform
from nrmsim.offline import (UnsupportedInstanceError, dual_objective, dual_sandwich_check, offline_integer,
                            offline_lp)

UNIT = np.array([[1.0]])


def path3():
    return SamplePath(np.array([0.9, 0.2, 0.7]), np.zeros(3, dtype=int), UNIT)


def brute_integer(path, C):
    T = len(path)
    best = 0.0
    A = path.item_consumption
    for mask in range(1 << T):
        x = np.array([(mask >> k) & 1 for k in range(T)], dtype=float)
        if np.all(x @ A <= C + 1e-12):
            best = max(best, float(x @ path.rewards))
    return best


def test_examples():
    res = offline_lp(path3(), [2.0], integer=True)
    assert res.lp_value == pytest.approx(1.6)
    np.testing.assert_array_equal(res.x, [1, 0, 1])
    assert 0.2 <= res.dual[0] <= 0.7
    assert res.integer_value == pytest.approx(1.6)
    frac = offline_lp(path3(), [1.5])
    assert frac.lp_value == pytest.approx(1.25)
    np.testing.assert_allclose(frac.x, [1, 0, 0.5])
    assert offline_integer(path3(), [2.5]) == pytest.approx(1.6)


def test_empty_path_and_zero_capacity():
    res = offline_lp(SamplePath(np.zeros(0), np.zeros(0, dtype=int), UNIT), [1.0])
    assert res.lp_value == 0.0
    res = offline_lp(path3(), [0.0])
    assert res.lp_value == 0.0 and res.dual[0] == pytest.approx(0.9)


def _random_path(rng, m, T):
    n = int(rng.integers(1, 4))
    A = rng.integers(0, 3, size=(n, m)).astype(float)
    A[A.sum(axis=1) == 0, 0] = 1.0
    return SamplePath(rng.uniform(0, 1, T), rng.integers(0, n, T), A)


@pytest.mark.parametrize("seed", range(30))
def test_lp_vs_exhaustive_and_highs(seed):
    rng = np.random.default_rng(seed)
    m, T = 2, 6
    path = _random_path(rng, m, T)
    C = rng.uniform(0.5, 4, size=m)
    res = offline_lp(path, C, integer=True)
    ref = linprog(-path.rewards, A_ub=path.item_consumption.T, b_ub=C, bounds=[(0, 1)] * T, method="highs")
    assert res.lp_value == pytest.approx(-ref.fun, abs=1e-9)
    assert res.integer_value == pytest.approx(brute_integer(path, C), abs=1e-12)
    assert res.lp_value >= res.integer_value - 1e-12
    assert res.duality_gap <= 1e-8 * max(1, res.lp_value)
    if np.all((res.x == 0) | (res.x == 1)):
        assert res.lp_value == pytest.approx(res.integer_value, abs=1e-12)


@pytest.mark.parametrize("T", [200, 3000])
def test_large_multi_resource_vs_highs(T):
    sp = example2(0.1, T)
    path = sample_path(sp, 5, T)
    res = offline_lp(path, sp.capacities)
    ref = linprog(-path.rewards, A_ub=path.item_consumption.T, b_ub=sp.capacities, bounds=(0, 1), method="highs")
    assert res.lp_value == pytest.approx(-ref.fun, rel=1e-10)
    assert np.all(path.item_consumption.T @ res.x <= sp.capacities + 1e-9)
    assert res.duality_gap <= 1e-8 * res.lp_value


def test_unit_demand_integer_capacity_exact():
    sp = single_resource_uniform(0.37, 500)
    for rep in range(5):
        path = sample_path(sp, 1, rep)
        for C in (0, 1, 57, 185, 500, 700):
            res = offline_lp(path, [float(C)], integer=True)
            assert res.lp_value == res.integer_value


def test_integer_unsupported():
    rng = np.random.default_rng(0)
    path = _random_path(rng, 2, 25)
    with pytest.raises(UnsupportedInstanceError):
        offline_integer(path, [1.0, 1.0])
    assert offline_lp(path, [1.0, 1.0], integer=True).integer_value is None


def test_integer_m2_T8_exhaustive():
    rng = np.random.default_rng(8)
    path = _random_path(rng, 2, 8)
    assert offline_integer(path, [2.0, 3.0]) == pytest.approx(brute_integer(path, np.array([2.0, 3.0])))


def test_sandwich_examples():
    lo, marg, hi = dual_sandwich_check(path3(), [2.0], [1.0])
    assert marg == pytest.approx(0.7)
    assert lo <= marg + 1e-7 and marg <= hi + 1e-7
    assert 0.2 <= lo <= 0.7 and 0.7 <= hi <= 0.9
    assert dual_sandwich_check(path3(), [10.0], [1.0]) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        dual_sandwich_check(path3(), [0.5], [1.0])


def test_monotone_in_capacity():
    rng = np.random.default_rng(4)
    path = _random_path(rng, 3, 40)
    prev = -1.0
    for scale in np.linspace(0, 3, 13):
        v = offline_lp(path, np.full(3, 5.0) * scale).lp_value
        assert v >= prev - 1e-12
        prev = v


@given(st.integers(0, 100_000), st.integers(1, 3), st.integers(1, 12))
def test_lp_property(seed, m, T):
    rng = np.random.default_rng(seed)
    path = _random_path(rng, m, T)
    C = rng.uniform(0, 3, size=m)
    res = offline_lp(path, C)
    assert np.all(res.x >= 0) and np.all(res.x <= 1)
    assert np.all(path.item_consumption.T @ res.x <= C + 1e-9)
    assert abs(dual_objective(path.rewards, path.item_consumption, C, res.dual) - res.lp_value) <= 1e-8 * max(1, res.lp_value)
    assert np.all(res.dual >= 0)
