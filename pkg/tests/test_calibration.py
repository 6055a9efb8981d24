import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import epiforge.calibration as cal
from epiforge.abm import EpidemicParams, resolve_transmission_scale, run_simulation
from epiforge.calibration import (
    CalibProblem, CalibrationError, bayes_optimize, expected_improvement, fit_gp, minimize_bo, objective, se_kernel,
)
from epiforge.city import CityConfig, generate_city

SCALE = 0.02


@pytest.fixture(scope="module")
def city():
    return generate_city(CityConfig(grid_rows=4, grid_cols=4, block_pop_mean=150, seed=8))


def observe(city, r0, seed, T=40):
    params = EpidemicParams.constant(r0, T, I0=30, seed=seed, transmission_scale=SCALE)
    return run_simulation(city, params).sequence


def problem(city, obs, seed, **kw):
    return CalibProblem(obs, city, I0=30, seed=seed, transmission_scale=SCALE, **kw)


# --- optimizer ----------------------------------------------------------------------------


def test_quadratic_toy_is_solved():
    est, hist = minimize_bo(lambda x: (x - 2.0) ** 2, (1.0, 4.0), 15)
    assert abs(est - 2.0) <= 0.05
    assert len(hist) == 15


def test_budget_of_initial_design_returns_its_best():
    est, hist = minimize_bo(lambda x: abs(x - 2.2), (1.0, 4.0), 5)
    assert [h["kind"] for h in hist] == ["initial"] * 5
    assert [h["x"] for h in hist] == pytest.approx(np.linspace(1, 4, 5))
    assert est == 2.5


@settings(max_examples=20, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(0.1, 5), c=st.floats(-2, 2), budget=st.integers(3, 12))
def test_history_properties(a, b, c, budget):
    lo, hi = a, a + b
    f = lambda x: np.sin(3 * x) + c * x
    est, hist = minimize_bo(f, (lo, hi), budget)
    xs = [h["x"] for h in hist]
    best = [h["best_so_far"] for h in hist]
    assert all(lo <= x <= hi for x in xs)
    assert np.all(np.diff(best) <= 0)
    assert f(est) == min(h["value"] for h in hist) == best[-1]
    assert len(set(xs)) == len(xs)


def test_singular_surrogate_falls_back_to_grid_refinement(monkeypatch):
    monkeypatch.setattr(cal, "fit_gp", lambda *a, **k: None)
    est, hist = minimize_bo(lambda x: (x - 2.0) ** 2, (1.0, 4.0), 8)
    assert [h["kind"] for h in hist[5:]] == ["grid-fallback"] * 3
    assert abs(est - 2.0) < 0.4


def test_duplicate_points_are_stabilised_by_jitter():
    x = np.array([0.3, 0.3, 0.3, 0.7])
    gp = fit_gp(x, np.array([1.0, 1.0, 1.0, 2.0]), noise=0.0)
    assert gp is not None and gp.jitter > 0


def test_gp_interpolates_its_data():
    x = np.linspace(0, 1, 6)
    y = np.cos(4 * x)
    gp = fit_gp(x, y)
    mu, sd = gp.predict(x)
    assert np.allclose(mu * gp.y_std + gp.y_mean, y, atol=1e-2)
    assert np.all(sd < 0.05)


def test_kernel_is_squared_exponential():
    k = se_kernel(np.array([0.0, 0.5]), np.array([0.0]), 0.5)
    assert k[:, 0] == pytest.approx([1.0, np.exp(-0.5)])


def test_expected_improvement_limits():
    mu = np.array([0.0, 1.0, 2.0])
    ei = expected_improvement(mu, np.full(3, 1e-12), best=1.0, xi=0.0)
    assert ei == pytest.approx([1.0, 0.0, 0.0], abs=1e-9)
    assert np.all(expected_improvement(mu, np.ones(3), best=1.0) > 0)


def test_bad_bounds():
    with pytest.raises(CalibrationError):
        minimize_bo(lambda x: x, (2.0, 2.0), 5)


# --- problems against the simulator -------------------------------------------------------


def test_problem_validation(city):
    obs = observe(city, 2.0, 1)
    with pytest.raises(CalibrationError):
        problem(city, obs, 1, bounds=(3.0, 1.0))
    with pytest.raises(CalibrationError):
        problem(city, obs, 1, budget=2)
    with pytest.raises(CalibrationError):
        problem(city, obs, 1, inner="emulator")
    with pytest.raises(CalibrationError):
        problem(city, obs, 1, inner="oracle")
    with pytest.raises(CalibrationError):
        objective(5.0, problem(city, obs, 1))


def test_true_r0_with_the_observation_seed_scores_zero(city):
    obs = observe(city, 2.3, 5)
    p = problem(city, obs, 5)
    assert objective(2.3, p) == 0.0
    assert objective(2.6, p) > 0.0


def test_objective_is_deterministic(city):
    p = problem(city, observe(city, 2.0, 1), 99)
    assert objective(2.7, p) == objective(2.7, p)


def test_objective_matches_direct_computation(city):
    obs = observe(city, 2.0, 1)
    p = problem(city, obs, 4)
    model = observe(city, 3.0, 4)
    o, m = obs.citywide(), model.citywide()
    assert objective(3.0, p) == pytest.approx(np.mean(((m - o) / o.max()) ** 2), rel=1e-12)


def test_grid_scan_minimum_lands_next_to_the_truth():
    # run-to-run noise swamps neighbouring R0 values in tiny cities, so this one runs at 20k agents
    big = generate_city(CityConfig(grid_rows=10, grid_cols=10, block_pop_mean=200, seed=8))
    scale = resolve_transmission_scale(big, EpidemicParams.constant(2.0, 60))
    rng = np.random.default_rng(0)
    hits = 0
    for trial in range(10):
        truth = round(float(rng.uniform(1.6, 3.4)), 1)
        obs = run_simulation(big, EpidemicParams.constant(truth, 60, I0=100, seed=1000 + trial,
                                                          transmission_scale=scale)).sequence
        p = CalibProblem(obs, big, I0=100, seed=2000 + trial, transmission_scale=scale)
        grid = np.round(np.arange(truth - 0.5, truth + 0.51, 0.1), 1)
        best = grid[int(np.argmin([objective(g, p) for g in grid]))]
        hits += abs(best - truth) <= 0.1 + 1e-9
    assert hits >= 8


def test_bayes_optimize_recovers_self_consistent_truth(city):
    obs = observe(city, 2.4, 7)
    p = problem(city, obs, 7, bounds=(1.0, 4.0), budget=12)
    est, hist = bayes_optimize(p)
    initial = [h["value"] for h in hist if h["kind"] == "initial"]
    assert objective(est, p) <= min(initial)
    assert abs(est - 2.4) < 0.15
