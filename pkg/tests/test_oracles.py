import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fosp import envs, oracles
from fosp.oracles import TabularMdp


def _single_state(r=1.0, gamma=0.5):
    return TabularMdp(np.ones((1, 1, 1)), np.full((1, 1), r), np.zeros((1, 1)), gamma, np.zeros(1, bool))


def test_value_iteration_geometric_series():
    V, Q, pi = oracles.value_iteration(_single_state())
    assert V[0] == pytest.approx(2.0, abs=1e-9)
    V, _, _ = oracles.value_iteration(_single_state(r=0.0))
    assert V[0] == 0.0


def test_value_iteration_residual_and_shortest_paths():
    env = envs.open_grid(3)
    mdp = env.tabular
    V, _, pi = oracles.value_iteration(mdp)
    assert oracles.bellman_residual(mdp, V) < 1e-10
    goal = env.goal
    for s in range(mdp.n_states):
        cell = env.cell(s)
        if cell == goal:
            continue
        steps = 0
        while cell != goal and steps < 20:
            cell = env._move(cell, int(pi[env.index(cell)]))
            steps += 1
        assert steps == abs(cell[0] - env.cell(s)[0]) + abs(cell[1] - env.cell(s)[1])


def test_value_iteration_rejects_undiscounted():
    with pytest.raises(ValueError):
        oracles.value_iteration(_single_state(gamma=1.0))


def test_constrained_equals_unconstrained_without_hazards():
    mdp = envs.open_grid(3).tabular
    V, _, pi = oracles.value_iteration(mdp)
    Vs, _, pis, feasible = oracles.constrained_value_iteration(mdp)
    assert feasible.all()
    np.testing.assert_allclose(Vs, V, atol=1e-9)
    np.testing.assert_array_equal(pis, pi)


def test_hazard_on_shortest_path_lowers_safe_value():
    mdp = envs.hazard_grid().tabular
    V, _, _ = oracles.value_iteration(mdp)
    Vs, _, pi, _ = oracles.constrained_value_iteration(mdp)
    assert Vs[mdp.start] < V[mdp.start]
    assert np.all(Vs[np.isfinite(Vs)] <= V[np.isfinite(Vs)] + 1e-12)
    _, cost, regret = oracles.monte_carlo_eval(mdp, pi, 10_000, seed=0)
    assert cost == 0.0 and regret == 0.0


def test_feasible_set_matches_reach_violation_under_safe_policy():
    for make in (envs.hazard_grid, envs.shifted_hazard_grid):
        mdp = make().tabular
        _, _, pi, feasible = oracles.constrained_value_iteration(mdp)
        v = oracles.exact_reach_violation(mdp, pi, 0.99)
        np.testing.assert_array_equal(feasible, v == 0)


def test_exact_reach_violation_cases():
    # chain: 0 -> 1 (hazard), 2 absorbing and safe
    P = np.zeros((3, 1, 3))
    P[0, 0, 1] = P[1, 0, 1] = P[2, 0, 2] = 1.0
    mdp = TabularMdp(P, np.zeros((3, 1)), np.zeros((3, 1)), 0.9, np.array([False, True, False]))
    v = oracles.exact_reach_violation(mdp, np.zeros(3, int), 0.99)
    np.testing.assert_allclose(v, [0.99, 1.0, 0.0])
    assert oracles.reach_violation_residual(mdp, np.zeros(3, int), 0.99, v) < 1e-9


def test_exact_reach_violation_residual_on_slippery_grid():
    mdp = envs.hazard_grid(slip_probability=0.1).tabular
    _, _, pi = oracles.value_iteration(mdp)
    v = oracles.exact_reach_violation(mdp, pi, 0.99)
    assert oracles.reach_violation_residual(mdp, pi, 0.99, v) < 1e-9
    assert np.all((v >= 0) & (v <= 1))


def test_td_lambda_worked_instance():
    np.testing.assert_allclose(oracles.enumerate_td_lambda([1, 2], [0, 10, 20], 0.5, 0.5), [6.5, 12, 20])


@settings(max_examples=30, deadline=None)
@given(r=st.floats(-5, 5), v0=st.floats(-5, 5), v1=st.floats(-5, 5), lam=st.floats(0, 1))
def test_td_lambda_horizon_one_is_one_step(r, v0, v1, lam):
    out = oracles.enumerate_td_lambda([r], [v0, v1], 0.9, lam)
    assert out[0] == pytest.approx(r + 0.9 * v1, abs=1e-12)


def test_td_lambda_monte_carlo_collapse():
    r = np.array([1.0, -2.0, 3.0, 0.5])
    V = np.array([9.0, 9.0, 9.0, 9.0, 4.0])
    out = oracles.enumerate_td_lambda(r, V, 1.0, 1.0)
    np.testing.assert_allclose(out, np.concatenate([np.cumsum(r[::-1])[::-1] + 4.0, [4.0]]))


def test_expectile_bisection_cases():
    assert oracles.expectile_bisection([0.0, 1.0], 0.8) == pytest.approx(0.8, abs=1e-12)
    assert oracles.expectile_bisection([3.0, 3.0, 3.0], 0.1) == 3.0
    x = np.random.default_rng(0).normal(size=101)
    assert oracles.expectile_bisection(x, 0.5) == pytest.approx(x.mean(), abs=1e-12)
    with pytest.raises(ValueError):
        oracles.expectile_bisection([], 0.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(0.05, 0.95))
def test_expectile_first_order_condition(seed, tau):
    x = np.random.default_rng(seed).normal(size=17)
    e = oracles.expectile_bisection(x, tau)
    foc = np.sum(np.where(x < e, 1 - tau, tau) * (x - e))
    assert abs(foc) < 1e-10


def test_monte_carlo_eval_contracts():
    env = envs.hazard_grid()
    mdp = env.tabular
    _, _, safe, _ = oracles.constrained_value_iteration(mdp)
    policy = lambda obs: int(safe[env.state_index(obs)])
    a = oracles.monte_carlo_eval(env, policy, 3, seed=0)
    # deterministic env and policy: every episode is the same episode
    assert a == pytest.approx(oracles.monte_carlo_eval(env, policy, 1, seed=4), abs=1e-15)
    assert a[1] == 0.0
    rng = np.random.default_rng(0)
    random_cost = oracles.monte_carlo_eval(mdp, lambda s: int(rng.integers(4)), 10_000, seed=1)[1]
    assert random_cost > 0.0
    with pytest.raises(ValueError):
        oracles.monte_carlo_eval(mdp, safe, 0, seed=0)


def test_tabular_mdp_validation():
    with pytest.raises(ValueError):
        TabularMdp(np.full((1, 1, 1), 0.5), np.zeros((1, 1)), np.zeros((1, 1)), 0.9, np.zeros(1, bool))
    with pytest.raises(ValueError):
        TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), np.full((1, 1), 2.0), 0.9, np.zeros(1, bool))
