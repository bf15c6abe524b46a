import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, optimize

import nrmsim.solvers as solvers
from nrmsim.model import PointMass, SamplePath, TruncatedLinear, Uniform, build_instance, example2, \
    single_resource_uniform
from nrmsim.solvers import (DualDomain, DualSolver, SolverError, minimize_dual, population_dual_value,
                            semifluid_values, solve_fluid, solve_semifluid)


def quad_objective(spec, q, weights):
    total = 0.0
    for w, d, qj in zip(weights, spec.rewards, q):
        if qj > 0:
            v, _ = integrate.quad(lambda x: float(d.quantile(x)), 1 - qj, 1, epsabs=1e-14, epsrel=1e-13)
            total += w * v
    return total


def slsqp_fluid(spec, c, s):
    """Independent primal route: direct constrained maximisation of the concave objective."""
    p = spec.probabilities
    A = spec.consumption

    def neg(q):
        return -s * sum(pj * d.top_mean(float(np.clip(qj, 0, 1))) for pj, d, qj in zip(p, spec.rewards, q))

    best = None
    for start in (np.full(spec.n, 0.05), np.full(spec.n, 0.5)):
        res = optimize.minimize(neg, start, method="SLSQP", bounds=[(0, 1)] * spec.n,
                                constraints=[{"type": "ineq", "fun": lambda q: c - s * (p * q) @ A}],
                                options={"ftol": 1e-15, "maxiter": 1000})
        if best is None or res.fun < best.fun:
            best = res
    return -best.fun


@pytest.mark.parametrize("eps", [0.05, 0.1, 0.2])
def test_example2_fluid(eps):
    sp = example2(eps, 1000)
    sol = solve_fluid(sp, sp.capacities, 1000)
    np.testing.assert_allclose(sol.quantiles, [(1 + eps) / 2, eps, (1 + eps) / 2], atol=1e-9)
    np.testing.assert_allclose(sol.dual, [(1 - eps) / 2, 0, (1 - eps) / 2], atol=1e-8)
    assert sol.kkt_residual <= 1e-8
    ref = quad_objective(sp, sol.quantiles, sp.probabilities * 1000)
    assert sol.objective == pytest.approx(ref, abs=1e-8)


def test_single_resource_examples():
    sp = single_resource_uniform(0.5, 100)
    sol = solve_fluid(sp, [50.0], 100)
    assert sol.quantiles[0] == pytest.approx(0.5, abs=1e-12)
    assert sol.dual[0] == pytest.approx(0.5, abs=1e-12)
    slack = solve_fluid(sp, [200.0], 100)
    assert slack.quantiles[0] == 1.0 and slack.dual[0] == 0.0
    empty = solve_fluid(sp, [0.0], 100)
    assert empty.quantiles[0] == 0.0 and empty.objective == 0.0


def test_fluid_rejects_bad_input():
    sp = single_resource_uniform()
    with pytest.raises(ValueError):
        solve_fluid(sp, [-1.0], 10)
    with pytest.raises(ValueError):
        solve_fluid(sp, [1.0], 0)


def test_domain_default_and_projection():
    sp = example2(0.1)
    dom = DualDomain.for_spec(sp)
    np.testing.assert_allclose(dom.upper, [2.0, 2.0, 2.0])
    x = np.array([-1.0, 0.5, 9.0])
    assert np.array_equal(dom.project(dom.project(x)), dom.project(x))


def _random_instance(rng, m, n, kinds=("uniform", "linear")):
    A = rng.integers(0, 3, size=(n, m)).astype(float)
    A[A.sum(axis=1) == 0, 0] = 1.0
    p = rng.dirichlet(np.ones(n))
    dists = []
    for _ in range(n):
        l = float(rng.uniform(0, 1))
        w = float(rng.uniform(0.5, 2))
        if rng.choice(kinds) == "uniform":
            dists.append(Uniform(l, l + w))
        else:
            dists.append(TruncatedLinear.from_lower_density(l, l + w, float(rng.uniform(0, 2)) / w))
    rho = rng.uniform(0.1, 1.0, size=m)
    return build_instance(A, p, dists, rho, 100)


@pytest.mark.parametrize("seed", range(12))
def test_fluid_matches_slsqp(seed):
    rng = np.random.default_rng(seed)
    sp = _random_instance(rng, m=int(rng.integers(1, 4)), n=int(rng.integers(1, 5)))
    c = sp.capacities * rng.uniform(0.2, 1.5, size=sp.m)
    sol = solve_fluid(sp, c, 100)
    ref = slsqp_fluid(sp, c, 100)
    assert sol.objective >= ref - 1e-7 * max(1, ref)
    assert sol.objective == pytest.approx(ref, rel=1e-6, abs=1e-6)
    assert np.all(sol.used <= c + 1e-9)
    assert sol.kkt_residual <= 1e-8


@pytest.mark.parametrize("seed", range(8))
def test_duality(seed):
    rng = np.random.default_rng(100 + seed)
    sp = _random_instance(rng, m=int(rng.integers(1, 4)), n=int(rng.integers(2, 5)))
    s = 50
    c = sp.capacities * rng.uniform(0.1, 1.2, size=sp.m) / 2
    sol = solve_fluid(sp, c, s)
    solver = DualSolver.for_spec(sp)
    dual_val = s * float(solver.value(sol.dual[None, :], (c / s)[None, :], sp.probabilities[None, :])[0])
    # strong duality at the optimum
    assert abs(sol.objective - dual_val) <= 1e-7 * max(1, sol.objective)
    # weak duality against random feasible points
    for _ in range(50):
        q = rng.uniform(0, 1, size=sp.n)
        use = s * (sp.probabilities * q) @ sp.consumption
        ratio = np.max(np.where(c > 0, use / np.where(c > 0, c, 1), np.where(use > 0, np.inf, 0)))
        if ratio > 1:
            q = q / ratio if np.isfinite(ratio) else np.zeros_like(q)
        obj = s * sum(p * d.top_mean(qj) for p, d, qj in zip(sp.probabilities, sp.rewards, q))
        assert obj <= dual_val + 1e-8


def test_threshold_consistency():
    rng = np.random.default_rng(5)
    sp = _random_instance(rng, 2, 4)
    sol = solve_fluid(sp, sp.capacities * 0.5, 100)
    theta = sp.consumption @ sol.dual
    for j, d in enumerate(sp.rewards):
        if d.lower < theta[j] < d.upper:
            assert sol.quantiles[j] == pytest.approx(1 - float(d.cdf(theta[j])), abs=1e-9)


def test_monotone_in_capacity_and_horizon():
    sp = example2(0.1)
    prev = -1.0
    for scale in np.linspace(0, 2, 11):
        v = solve_fluid(sp, sp.capacity_ratio * 100 * scale, 100).objective
        assert v >= prev - 1e-9
        prev = v
    prev = -1.0
    for s in (10, 20, 50, 100, 400):
        v = solve_fluid(sp, sp.capacity_ratio * 100, s).objective
        assert v >= prev - 1e-9
        prev = v


def test_threshold_recovery_invariant_to_start():
    sp = example2(0.1)
    solver = DualSolver.for_spec(sp)
    b = sp.capacity_ratio[None, :]
    outs = []
    for start in ([0, 0, 0], [1.5, 1.5, 1.5], [0.45, 0.3, 0.45], [2, 0, 0]):
        mu, ok = solver.solve(b, sp.probabilities, np.array([start], dtype=float))
        assert ok[0]
        outs.append(solver.recover(mu, b, sp.probabilities[None, :])[0])
    for q in outs:
        np.testing.assert_allclose(q, [0.55, 0.1, 0.55], atol=1e-6)


def test_point_mass_ties_match_lp():
    # with atoms the fluid program is an LP; compare against HiGHS
    sp = build_instance([(1, 0), (1, 1), (0, 1)], [0.3, 0.3, 0.4],
                        [PointMass(1.0), PointMass(1.5), PointMass(0.8)], [0.25, 0.2], 1)
    s = 100
    c = sp.capacities * s
    sol = solve_fluid(sp, c, s)
    w = sp.probabilities * s
    vals = np.array([1.0, 1.5, 0.8])
    ref = optimize.linprog(-(w * vals), A_ub=(sp.consumption * w[:, None]).T, b_ub=c, bounds=[(0, 1)] * 3,
                           method="highs")
    assert sol.objective == pytest.approx(-ref.fun, rel=1e-9)
    assert np.all(sol.used <= c + 1e-9)
    assert sol.kkt_residual <= 1e-8


def test_semifluid_examples():
    sp = single_resource_uniform(0.5, 4)
    sol = solve_semifluid(sp, [4.0], [2.0])
    assert sol.quantiles[0] == pytest.approx(0.5)
    assert sol.objective == pytest.approx(1.5)
    sp2 = example2(0.1)
    zero = solve_semifluid(sp2, [0, 0, 0], [3.0, 3.0, 3.0])
    assert zero.objective == 0.0 and np.all(zero.quantiles == 0)
    partial = solve_semifluid(sp2, [0, 5, 3], [1.0, 1.0, 1.0])
    assert partial.quantiles[0] == 0.0


def test_semifluid_equals_fluid_at_expected_counts():
    sp = example2(0.2)
    s = 300
    a = solve_fluid(sp, sp.capacity_ratio * s, s)
    b = solve_semifluid(sp, sp.probabilities * s, sp.capacity_ratio * s)
    np.testing.assert_allclose(a.quantiles, b.quantiles, atol=1e-9)
    assert a.objective == pytest.approx(b.objective, abs=1e-9)


def test_batched_semifluid_values_match_scalar():
    sp = example2(0.1)
    solver = DualSolver.for_spec(sp)
    rng = np.random.default_rng(2)
    D = rng.multinomial(200, sp.probabilities, size=6).astype(float)
    C = np.tile(sp.capacity_ratio * 200, (6, 1))
    v, ok = semifluid_values(solver, D, C)
    assert ok.all()
    for k in range(6):
        assert v[k] == pytest.approx(solve_semifluid(sp, D[k], C[k]).objective, rel=1e-12)


def test_minimize_dual_examples():
    sp = single_resource_uniform(0.5, 100)
    mu, val = minimize_dual(sp, [0.5 * 99], 100)
    assert mu[0] == pytest.approx(0.5, abs=1e-10)
    assert val == pytest.approx(0.375, rel=1e-9)
    mu, _ = minimize_dual(sp, [500.0], 100)
    assert mu[0] == 0.0
    sp2 = example2(0.1)
    mu, _ = minimize_dual(sp2, [1e4] * 3, 100)
    assert np.all(mu == 0.0)


def test_minimize_dual_sample_mode():
    sp = single_resource_uniform(0.5, 4)
    path = SamplePath(np.array([0.9, 0.2, 0.7]), np.zeros(3, dtype=int), sp.consumption)
    mu, val = minimize_dual(sp, [2.0], 4, mode="sample", path=path)
    assert val == pytest.approx(1.6 / 3, rel=1e-9)
    assert 0.2 - 1e-12 <= mu[0] <= 0.7 + 1e-12
    # brute-force the piecewise-linear dual over a fine grid as a second route
    grid = np.linspace(0, 2, 20001)
    vals = [(2 * g + np.maximum(path.rewards - g, 0).sum()) / 3 for g in grid]
    assert val == pytest.approx(min(vals), abs=1e-9)


def test_population_dual_value():
    sp = single_resource_uniform()
    assert population_dual_value(sp, [0.5], [0.5 * 9], 10) == pytest.approx(0.375)


def test_solver_error_on_budget(monkeypatch):
    sp = example2(0.1)
    monkeypatch.setattr(solvers, "_NEWTON_ITER", 1)
    with pytest.raises(SolverError) as err:
        solve_fluid(sp, sp.capacities, 1000)
    assert err.value.residual > 0


@given(st.floats(0.01, 3.0), st.integers(1, 500))
def test_single_resource_closed_form(ratio, s):
    # one unit-demand uniform(0,1) type: q = min(1, c/s), mu = 1 - q
    sp = single_resource_uniform(0.5, 10)
    sol = solve_fluid(sp, [ratio * s], s)
    q = min(1.0, ratio)
    assert sol.quantiles[0] == pytest.approx(q, abs=1e-10)
    assert sol.dual[0] == pytest.approx(1 - q, abs=1e-10)


@given(st.lists(st.floats(0.0, 2.0), min_size=3, max_size=3), st.integers(2, 300))
def test_fluid_feasible_and_kkt(cs, s):
    sp = example2(0.15)
    sol = solve_fluid(sp, np.array(cs) * s / 5, s)
    assert np.all(sol.quantiles >= 0) and np.all(sol.quantiles <= 1)
    assert np.all(sol.used <= np.array(cs) * s / 5 + 1e-9)
    assert sol.kkt_residual <= 1e-8
