import math
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from fosp import envs, expansion
from fosp.actor import PolicyHead
from fosp.expansion import DualModelState, PolicyPair, propose_actions, select_action, selection_probs
from fosp.worldmodel import WorldModel, WorldModelConfig

# 0.99 quantile of chi-square with 3 degrees of freedom
CHI2_3_Q99 = 11.345


def test_selection_probability_examples():
    np.testing.assert_array_equal(selection_probs([0.3, 0.3], 10.0), [0.5, 0.5])
    np.testing.assert_allclose(selection_probs([2 * math.log(9), 0.0], 2.0), [0.9, 0.1], rtol=1e-14)
    p = selection_probs([1.0, 0.0], 10.0)
    assert p[0] == pytest.approx(math.exp(0.1) / (math.exp(0.1) + 1), rel=1e-14)
    assert round(p[0], 5) == 0.52498
    with pytest.raises(ValueError):
        selection_probs([0.0, 1.0], 0.0)


def test_selection_probabilities_sum_to_one_exactly():
    rng = np.random.default_rng(0)
    for q, alpha in zip(rng.normal(scale=20, size=(2000, 2)), 10 ** rng.uniform(-3, 2, 2000)):
        p = selection_probs(q, alpha)
        assert p[0] + p[1] == 1.0


def test_selection_is_shift_invariant_and_stable():
    for alpha in (0.1, 1.0, 10.0):
        base = selection_probs([0.7, 0.2], alpha)
        for c in (-1e3, 5.0, 1e4):
            np.testing.assert_allclose(selection_probs([0.7 + c, 0.2 + c], alpha), base, atol=1e-12)
    assert np.all(np.isfinite(selection_probs([1e6, -1e6], 1e-3)))


@pytest.mark.parametrize("alpha", [0.1, 1.0, 10.0])
def test_selection_frequencies(alpha):
    rng = np.random.default_rng(1)
    p = selection_probs([0.4, 0.3], alpha)[0]
    picks = [select_action(0.4, 0.3, alpha, rng)[0] for _ in range(10_000)]
    assert abs(picks.count(0) / 10_000 - p) <= 0.02


def test_near_zero_temperature_picks_argmax():
    rng = np.random.default_rng(2)
    picks = [select_action(0.1, 0.2, 1e-6, rng, actions=("b", "p")) for _ in range(10_000)]
    assert sum(a == "p" for _, a in picks) / 10_000 > 0.999


def test_policy_pair_is_frozen():
    beta = {"actor": jnp.arange(3.0), "wm": {"gru": jnp.ones(2)}}
    pair = PolicyPair(beta, alpha=10.0)
    with pytest.raises(ValueError):
        pair.beta["actor"][0] = 5.0
    pair.verify()
    pair.beta["wm"]["gru"] = np.zeros(2)  # rebinding is detected by the checksum
    with pytest.raises(expansion.FrozenParameterError):
        pair.verify()
    with pytest.raises(ValueError):
        PolicyPair(beta, alpha=0.0)


@pytest.fixture(scope="module")
def agent_parts():
    space = envs.ActionSpace("discrete", n=4)
    wm = WorldModel(WorldModelConfig(5, space, deter=6, latents=2, classes=3, hidden_units=8))
    head = PolicyHead(wm.cfg.state_dim, space, hidden_units=8)
    params = {"wm": wm.init(jax.random.PRNGKey(0)), "actor": head.init(jax.random.PRNGKey(1)),
              "qr": jnp.arange(4.0)}
    return wm, head, params


def test_transition_clones_everything(agent_parts):
    wm, head, params = agent_parts
    pair, online = expansion.transition_offline_to_online(params, alpha=10.0)
    assert expansion.checksum(online) == expansion.checksum(params)
    assert expansion.checksum({"actor": online["actor"], "wm": online["wm"]}) == pair.beta_checksum
    s = jax.random.normal(jax.random.PRNGKey(3), (7, wm.cfg.state_dim))
    np.testing.assert_array_equal(head.probs(pair.beta["actor"], s), head.probs(online["actor"], s))
    np.testing.assert_array_equal(online["qr"], params["qr"])


def test_propose_actions_symmetry_reset_and_immutability(agent_parts):
    wm, head, params = agent_parts
    pair, online = expansion.transition_offline_to_online(params)
    psi = {"actor": online["actor"], "wm": online["wm"]}
    step = jax.jit(partial(propose_actions, wm, head))
    dual = DualModelState.reset(wm.cfg.deter, wm.cfg.stoch)
    obs = jnp.eye(5)[2]
    prev = jnp.zeros((1, 4))
    a_b, a_p, s_b, s_p, nxt = step(pair.beta, psi, dual, obs, prev, jax.random.PRNGKey(0))
    np.testing.assert_array_equal(nxt.h_beta, jnp.zeros((1, wm.cfg.deter)))
    np.testing.assert_array_equal(nxt.h_psi, nxt.h_beta)
    assert not bool(nxt.first)
    counts = np.zeros((2, 4))
    for i in range(10_000):
        a_b, a_p, *_ = step(pair.beta, psi, dual, obs, prev, jax.random.PRNGKey(i))
        counts[0, int(a_b[1][0])] += 1
        counts[1, int(a_p[1][0])] += 1
    expected = counts.sum(0) / 2
    keep = expected > 0
    chi2 = float(np.sum((counts[:, keep] - expected[keep]) ** 2 / expected[keep]))
    assert chi2 < CHI2_3_Q99
    pair.verify()


def test_propose_actions_advances_both_streams(agent_parts):
    wm, head, params = agent_parts
    pair, online = expansion.transition_offline_to_online(params)
    online["wm"] = {k: v + 0.1 for k, v in online["wm"].items()}
    psi = {"actor": online["actor"], "wm": online["wm"]}
    dual = DualModelState.reset(wm.cfg.deter, wm.cfg.stoch)
    key = jax.random.PRNGKey(0)
    for t in range(3):
        _, (vec, _), _, _, dual = propose_actions(wm, head, pair.beta, psi, dual, jnp.eye(5)[t], jnp.zeros((1, 4)),
                                                  key, mode=True)
    assert not np.array_equal(np.asarray(dual.h_beta), np.asarray(dual.h_psi))
    pair.verify()
