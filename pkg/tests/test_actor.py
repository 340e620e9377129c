import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fosp import actor, envs, oracles
from fosp.actor import PolicyHead, offline_policy_loss, offline_weight, online_policy_loss, online_weight


def test_offline_weight_examples():
    assert float(offline_weight(1.0, 0.0, 0.7)) == pytest.approx(1.0, rel=1e-15)
    assert float(offline_weight(0.0, 0.7, 0.0)) == pytest.approx(1.0, rel=1e-15)
    w = float(offline_weight(0.5, 0.1, 0.2, 10.0, 10.0))
    assert w == pytest.approx(0.5 * math.e + 0.5 * math.exp(-2), rel=1e-12)
    assert round(w, 4) == 1.4268


@settings(max_examples=50, deadline=None)
@given(a_r=st.floats(-0.3, 0.3), a_c=st.floats(-0.3, 0.3), u=st.floats(0, 1))
def test_offline_weight_boundaries_and_affinity(a_r, a_c, u):
    w1, w0 = math.exp(10 * a_r), math.exp(-10 * a_c)
    assert float(offline_weight(1.0, a_r, a_c)) == pytest.approx(w1, rel=1e-12)
    assert float(offline_weight(0.0, a_r, a_c)) == pytest.approx(w0, rel=1e-12)
    assert float(offline_weight(u, a_r, a_c)) == pytest.approx(u * w1 + (1 - u) * w0, rel=1e-12)


def test_offline_weight_clips_and_flags_overflow():
    w, clipped = offline_weight(jnp.array([0.5, 0.5, 1.0]), jnp.array([0.0, 1e3, 10.0]), 0.0,
                                return_clipped=True)
    np.testing.assert_allclose(w, [1.0, actor.W_MAX, actor.W_MAX])
    assert clipped.tolist() == [False, True, True]
    assert bool(jnp.all(w > 0))


def test_online_weight_examples():
    assert float(online_weight(1.0, 0.0, 5.0)) == 0.0
    assert float(online_weight(1.0, 0.2, 5.0)) == pytest.approx(2.0)
    assert float(online_weight(0.0, 9.0, 0.3)) == pytest.approx(-3.0)


def test_entropy_examples():
    assert float(actor.entropy(jnp.zeros(4))) == pytest.approx(math.log(4), rel=1e-14)
    assert float(actor.entropy(jnp.array([30.0, 0.0, 0.0, 0.0]))) < 1e-3
    gauss = actor.entropy((jnp.zeros(2), jnp.zeros(2)), discrete=False)
    assert float(gauss) == pytest.approx(1 + math.log(2 * math.pi), rel=1e-14)


def test_weight_neutral_loss_is_behavior_cloning():
    logp = jnp.log(jnp.array([0.2, 0.5, 0.9]))
    ent = jnp.array([1.0, 2.0, 3.0])
    loss = offline_policy_loss(logp, ent, jnp.ones(3), jnp.ones(3), 0.0, 0.0)
    assert float(loss) == pytest.approx(-float(jnp.mean(logp)), rel=1e-15)
    with_psi = offline_policy_loss(logp, ent, jnp.ones(3), jnp.ones(3), 0.37, 0.0)
    assert float(with_psi) - float(loss) == pytest.approx(0.37, rel=1e-14)
    g0 = jax.grad(lambda l: offline_policy_loss(l, ent, jnp.ones(3), jnp.ones(3), 0.0, 0.0))(logp)
    g1 = jax.grad(lambda l: offline_policy_loss(l, ent, jnp.ones(3), jnp.ones(3), 0.37, 0.0))(logp)
    np.testing.assert_array_equal(g0, g1)


def test_weight_scale_changes_magnitude_not_direction():
    logits = jnp.array([[0.3, -0.2], [0.1, 0.4]])
    acts = jnp.array([0, 1])
    w = jnp.array([2.0, 0.5])

    def grad(scale):
        def loss(l):
            logp = jnp.take_along_axis(jax.nn.log_softmax(l), acts[:, None], 1)[:, 0]
            return offline_policy_loss(logp, jnp.zeros(2), scale * w, jnp.ones(2), 0.0, 0.0)
        return np.asarray(jax.grad(loss)(logits)).ravel()

    g1, g7 = grad(1.0), grad(7.0)
    np.testing.assert_allclose(g7, 7 * g1, rtol=1e-13)
    np.testing.assert_allclose(g7 / np.linalg.norm(g7), g1 / np.linalg.norm(g1), rtol=1e-13)


def test_weighted_regression_concentrates_on_favored_action():
    # two states, two dataset actions each; the reward advantage favors action 1
    acts = jnp.array([0, 1, 0, 1])
    states = jnp.array([0, 0, 1, 1])
    a_r = jnp.where(acts == 1, 0.3, -0.3)
    w = offline_weight(1.0, a_r, 0.0)
    logits = jnp.zeros((2, 2))

    def loss(l):
        logp = jax.nn.log_softmax(l)[states, acts]
        return offline_policy_loss(logp, jnp.zeros(4), w, jnp.ones(4), 0.0, 0.0)

    for _ in range(300):
        logits = logits - 1.0 * jax.grad(loss)(logits)
    p = jax.nn.softmax(logits)
    # closed form for the 2-action weighted likelihood: p(1) = w1 / (w0 + w1)
    expected = math.exp(3) / (math.exp(3) + math.exp(-3))
    np.testing.assert_allclose(p[:, 1], expected, rtol=1e-6)
    assert bool(jnp.all(p[:, 1] > 0.99))


def test_closed_form_minimizer_is_weighted_behavior_policy():
    rng = np.random.default_rng(1)
    pi_b = rng.dirichlet(np.ones(3))
    w = np.asarray(offline_weight(0.6, jnp.asarray(rng.normal(size=3) * 0.1),
                                  jnp.asarray(np.abs(rng.normal(size=3)) * 0.1)))
    loss = lambda l: offline_policy_loss(jax.nn.log_softmax(l), jnp.zeros(3), jnp.asarray(w), jnp.ones(3),
                                         0.0, 0.0, mask=jnp.asarray(pi_b))
    logits = jnp.zeros(3)
    for _ in range(2000):
        logits = logits - 3.0 * jax.grad(loss)(logits)
    target = w * pi_b / np.sum(w * pi_b)
    np.testing.assert_allclose(jax.nn.softmax(logits), target, atol=1e-4)


def test_online_score_function_matches_bandit_gradient():
    logits = jnp.array([0.2, -0.4, 0.1])
    w = jnp.array([1.5, -0.5, 0.25])

    def loss(l):
        logp = jax.nn.log_softmax(l)
        # exact expectation over the bandit's arms
        return online_policy_loss(logp, jnp.zeros(3), w, 1.0, 0.0, 0.0, weight=3 * jax.nn.softmax(l))

    p = np.asarray(jax.nn.softmax(logits))
    analytic = -p * (np.asarray(w) - p @ np.asarray(w))
    np.testing.assert_allclose(jax.grad(loss)(logits), analytic, atol=1e-6)


def test_online_zero_advantage_leaves_entropy_and_penalty():
    logp = jnp.log(jnp.array([0.5, 0.25]))
    ent = jnp.array([0.7, 0.1])
    w = online_weight(jnp.array([0.3, 0.8]), 0.0, 0.0)
    loss = online_policy_loss(logp, ent, w, jnp.array([0.3, 0.8]), 0.2, 3e-4)
    assert float(loss) == pytest.approx(-3e-4 * 0.4 + 0.2 * 0.55, rel=1e-12)


def test_online_cost_weight_pushes_away_from_costly_action():
    logits = jnp.zeros(2)
    a_c = jnp.array([0.0, 0.5])
    w = online_weight(0.0, 0.0, a_c)

    def loss(l):
        logp = jax.nn.log_softmax(l)
        return online_policy_loss(logp, jnp.zeros(2), w, 0.0, 0.0, 0.0, weight=jax.nn.softmax(l))

    g = jax.grad(loss)(logits)
    assert float(g[1]) > 0 > float(g[0])  # descent lowers the costly action's logit


def test_policy_head_discrete_contract():
    head = PolicyHead(5, envs.ActionSpace("discrete", n=4), hidden_units=8)
    params = head.init(jax.random.PRNGKey(0))
    s = jax.random.normal(jax.random.PRNGKey(1), (6, 5))
    vec, a = head.sample(params, s, jax.random.PRNGKey(2))
    assert vec.shape == (6, 4) and a.shape == (6,)
    np.testing.assert_allclose(head.log_prob(params, s, a), head.log_prob_vec(params, s, vec), rtol=1e-14)
    _, mode = head.sample(params, s, None, mode=True)
    np.testing.assert_array_equal(mode, jnp.argmax(head.dist(params, s), -1))


def test_policy_head_box_contract():
    space = envs.ActionSpace("box", dim=2, low=-1.0, high=1.0)
    head = PolicyHead(3, space, hidden_units=8)
    params = head.init(jax.random.PRNGKey(0)) * 5
    s = jax.random.normal(jax.random.PRNGKey(1), (50, 3))
    _, a = head.sample(params, s, jax.random.PRNGKey(2))
    assert bool(jnp.all((a >= -1) & (a <= 1)))
    mean, log_std = head.dist(params, s)
    assert bool(jnp.all((log_std >= -5) & (log_std <= 2)))
    # a one-dimensional squashed density integrates to one
    head1 = PolicyHead(1, envs.ActionSpace("box", dim=1, low=-2.0, high=3.0), hidden_units=4)
    p1 = head1.init(jax.random.PRNGKey(3))
    grid = jnp.linspace(-2 + 1e-7, 3 - 1e-7, 200_001)[:, None]
    dens = jnp.exp(head1.log_prob(p1, jnp.zeros((grid.shape[0], 1)), grid))
    assert float(jnp.trapezoid(dens, grid[:, 0])) == pytest.approx(1.0, abs=1e-3)


def test_standardize():
    x = jnp.array([1.0, 2.0, 3.0, 100.0])
    z = actor.standardize(x, jnp.array([1.0, 1.0, 1.0, 0.0]))
    np.testing.assert_allclose(z[:3], [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_advantage_argmax_recovers_optimal_policy():
    mdp = envs.shifted_hazard_grid().tabular
    V, Q, pi = oracles.value_iteration(mdp)
    np.testing.assert_array_equal(np.argmax(Q - V[:, None], 1), pi)
