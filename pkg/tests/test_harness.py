import math
import warnings

import numpy as np
import pytest

from nrmsim.harness import (FitError, RegretTable, RegretRow, dual_convergence_experiment, estimate_regret,
                            fit_growth, fit_power_law, mean_se, myopic_decay_experiment, policy_acceptance)
from nrmsim.model import example2, single_resource_uniform
from nrmsim.policies import EstimatorConfig

T_GRID = [1e3, 2e3, 4e3, 8e3, 16e3, 32e3, 64e3, 1e5]


def test_fit_exact_power_law():
    fit = fit_power_law(T_GRID, [3 * t ** 0.5 for t in T_GRID])
    assert fit.exponent == pytest.approx(0.5, abs=1e-12)
    assert fit.coefficient == pytest.approx(3.0, rel=1e-10)
    assert fit.r_squared == pytest.approx(1.0)


def test_fit_polylog_and_constant():
    grid = np.geomspace(1e3, 1e5, 9)
    assert fit_power_law(grid, 2 * np.log(grid) ** 2).exponent <= 0.25
    assert abs(fit_power_law(grid, np.full(9, 4.2)).exponent) <= 0.02


def test_fit_drops_nonpositive_and_needs_four_points():
    with pytest.warns(UserWarning):
        fit = fit_power_law([1, 2, 3, 4, 5], [1, 2, 3, 4, -1])
    assert fit.x.size == 4
    with pytest.raises(FitError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit_power_law([1, 2, 3, 4], [1, 2, 0, 4])


def test_fit_growth_reads_table():
    table = RegretTable([RegretRow("a", T, 2.0 * T, 0.0, 2) for T in (10, 20, 40, 80)])
    assert fit_growth(table, "a").exponent == pytest.approx(1.0)


def test_mean_se():
    m, se = mean_se([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5
    assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)


def _greedy_oracle(T, C, R, seed):
    # straightforward independent implementation on its own random stream
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(R):
        r = rng.uniform(size=T)
        cap, got = C, 0.0
        for v in r:
            if cap >= 1:
                got += v
                cap -= 1
        out.append(np.sort(r)[::-1][:C].sum() - got)
    return np.mean(out), np.std(out, ddof=1) / math.sqrt(R)


def test_greedy_regret_matches_independent_oracle():
    sp = single_resource_uniform(0.5, 1000)
    table = estimate_regret(sp, [EstimatorConfig("greedy")], [1000], 500, seed=3)
    row = table.rows[0]
    om, ose = _greedy_oracle(1000, 500, 500, 77)
    assert abs(row.mean - om) <= 3 * math.hypot(row.stderr, ose)
    # closed form: E[top half of 1000 uniforms] - 500 * 1/2
    exact = sum(range(501, 1001)) / 1001 - 250
    assert abs(row.mean - exact) <= 3 * row.stderr
    assert row.mean_vs_integer == pytest.approx(row.mean)


def test_self_benchmark_is_zero():
    sp = example2(0.1, 100)
    pol = EstimatorConfig("log_dual")
    table = estimate_regret(sp, [pol], [100, 200], 4, seed=1, benchmark=pol)
    assert all(r.mean == 0.0 and r.stderr == 0.0 for r in table.rows)


def test_table_order_and_worker_invariance():
    sp = single_resource_uniform(0.5, 10)
    pols = [EstimatorConfig("static_bidprice"), EstimatorConfig("log2_fluid")]
    a = estimate_regret(sp, pols, [200, 100], 6, seed=5, chunk_size=2, workers=1)
    b = estimate_regret(sp, pols, [200, 100], 6, seed=5, chunk_size=2, workers=2)
    assert a.rows == b.rows
    assert [(r.policy, r.T) for r in a.rows] == [("static_bidprice", 100), ("static_bidprice", 200),
                                                 ("log2_fluid", 100), ("log2_fluid", 200)]


def test_lp_regret_nonnegative_per_cell():
    sp = example2(0.1, 100)
    table = estimate_regret(sp, [EstimatorConfig(k) for k in ("log_dual", "greedy")], [100], 20, seed=2)
    for r in table.rows:
        assert r.mean >= 0.0
        assert r.mean_vs_integer is None


def test_dual_convergence_small():
    sp = single_resource_uniform(0.5)
    rows, fit = dual_convergence_experiment(sp, 0.5, [50, 100, 200, 400, 800], 200, seed=1)
    means = [r.mean for r in rows]
    inversions = sum(b > a for a, b in zip(means, means[1:]))
    assert inversions <= 1
    assert -1.5 <= fit.exponent <= -0.5


def test_dual_convergence_population_price_constant():
    from nrmsim.solvers import DualSolver

    sp = single_resource_uniform(0.5)
    mu, ok = DualSolver.for_spec(sp).solve(np.array([[0.5]]), sp.probabilities)
    assert mu[0, 0] == pytest.approx(0.5)


def test_myopic_matches_closed_form():
    # one unit-demand uniform type at c = s/2: the loss is exactly 1/(8(s-1))
    sp = single_resource_uniform(0.5)
    rows, fit = myopic_decay_experiment(sp, [300, 600, 1200, 2400], 10, seed=0)
    for r in rows:
        assert r.mean == pytest.approx(1 / (8 * (r.s - 1)), rel=1e-6)
    assert fit.exponent == pytest.approx(-1.0, abs=0.01)


def test_myopic_zero_capacity():
    sp = example2(0.1)
    rows, _ = myopic_decay_experiment(sp, [500], 50, seed=0, capacity=lambda s: np.zeros(3))
    assert rows[0].mean == 0.0
    assert np.all(policy_acceptance(sp, np.zeros(3), 500) == 0.0)
