"""Distributional critics, expectile value heads and TD(lambda) targets.

Both channels (reward and cost) share the same machinery: a state-action
critic ``Q`` with a categorical head over fixed bins trained by two-hot
likelihood, a scalar state value ``V`` fitted to the in-sample critic by
expectile regression, and a slow target copy of ``Q``.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from fosp import approx

sg = jax.lax.stop_gradient
NUM_BINS = 41


def reward_bins(returns, num_bins: int = NUM_BINS, margin: float = 0.05) -> np.ndarray:
    """Bins symmetric about zero covering the observed return range plus a margin."""
    returns = np.asarray(returns, float)
    m = (1.0 + margin) * max(float(np.max(np.abs(returns))) if returns.size else 0.0, 1e-3)
    return np.linspace(-m, m, num_bins)


def cost_bins(horizon: int, num_bins: int = NUM_BINS) -> np.ndarray:
    return np.linspace(0.0, float(horizon), num_bins)


def twohot(y, bins):
    """Weights on the two bins bracketing ``y`` (clamped to the bin range).

    The weighted sum of bin centers reproduces ``clamp(y)`` exactly up to
    round-off. Works on any leading shape of ``y``.
    """
    bins = jnp.asarray(bins)
    K = bins.shape[0]
    y = jnp.clip(y, bins[0], bins[-1])
    idx = jnp.clip(jnp.searchsorted(bins, y, side="right") - 1, 0, K - 2)
    lo, hi = bins[idx], bins[idx + 1]
    w_hi = (y - lo) / (hi - lo)
    dtype = jnp.result_type(y, bins)
    return (jax.nn.one_hot(idx, K, dtype=dtype) * (1 - w_hi)[..., None]
            + jax.nn.one_hot(idx + 1, K, dtype=dtype) * w_hi[..., None])


def categorical_mean(logits, bins):
    return jnp.sum(jax.nn.softmax(logits, -1) * jnp.asarray(bins, logits.dtype), -1)


def categorical_nll(logits, target, bins):
    """``-log Pr(target)`` under the two-hot categorical likelihood."""
    return -jnp.sum(sg(twohot(target, bins)) * jax.nn.log_softmax(logits, -1), -1)


def td_lambda(rewards, values, discounts, lam: float, bootstrap: str = "next"):
    """Lambda-returns ``R_0 .. R_H`` along the leading (time) axis.

    ``rewards[k]`` is the reward on arriving at state ``k + 1``, ``values``
    holds ``V(s_0) .. V(s_H)`` and ``discounts`` (scalar or one per reward)
    discounts everything after that arrival. ``bootstrap="next"`` uses
    ``R_h = r_{h+1} + g((1 - lam) V_{h+1} + lam R_{h+1})``; ``"same"`` swaps
    ``V_{h+1}`` for ``V_h`` as in the literal printed recursion.
    """
    rewards = jnp.asarray(rewards)
    values = jnp.asarray(values)
    H = rewards.shape[0]
    if values.shape[0] != H + 1:
        raise ValueError(f"values must have {H + 1} entries along time, got {values.shape[0]}")
    if bootstrap not in ("next", "same"):
        raise ValueError(f"unknown bootstrap mode {bootstrap!r}")
    discounts = jnp.broadcast_to(jnp.asarray(discounts, rewards.dtype), rewards.shape)
    boot = values[1:] if bootstrap == "next" else values[:-1]

    def step(nxt, inp):
        r, g, v = inp
        ret = r + g * ((1 - lam) * v + lam * nxt)
        return ret, ret

    _, rets = jax.lax.scan(step, values[-1], (rewards, discounts, boot), reverse=True)
    return jnp.concatenate([rets, values[-1:]], 0)


def expectile_value_loss(q, v, tau: float):
    """Elementwise ``|tau - 1{q - v < 0}| (q - v)^2``."""
    diff = jnp.asarray(q) - jnp.asarray(v)
    return jnp.abs(tau - (diff < 0).astype(diff.dtype)) * diff ** 2


def ema_update(target, online, decay: float):
    """``target <- decay * target + (1 - decay) * online`` leafwise."""
    if not 0 <= decay <= 1:
        raise ValueError("decay must lie in [0, 1]")
    return jax.tree_util.tree_map(lambda t, o: decay * t + (1 - decay) * o, target, online)


@dataclass(frozen=True)
class CriticConfig:
    state_dim: int
    action_dim: int
    reward_bins: tuple
    cost_bins: tuple
    hidden_units: int = 64
    hidden_layers: int = 2
    gamma: float = 0.997
    lambda_r: float = 0.95
    lambda_c: float = 0.95
    tau: float = 0.8
    tau_c: float = 0.8
    ema_decay: float = 0.98
    bootstrap: str = "next"


class CriticBundle:
    """Specs and pure evaluation helpers for ``Q^r, Q^c, V^r, V^c``.

    Parameters live in a dict ``{"qr", "qc", "vr", "vc", "qr_target",
    "qc_target"}`` owned by the caller.
    """

    def __init__(self, cfg: CriticConfig):
        self.cfg = cfg
        self.bins = {"reward": np.asarray(cfg.reward_bins, float), "cost": np.asarray(cfg.cost_bins, float)}
        q = lambda: approx.ApproximatorSpec(cfg.state_dim + cfg.action_dim, len(cfg.reward_bins),
                                            cfg.hidden_layers, cfg.hidden_units, output_head="logits",
                                            out_scale=0.0)
        self.specs = {
            "qr": q(),
            "qc": q(),
            "vr": approx.ApproximatorSpec(cfg.state_dim, 1, cfg.hidden_layers, cfg.hidden_units,
                                          out_scale=0.0),
            "vc": approx.ApproximatorSpec(cfg.state_dim, 1, cfg.hidden_layers, cfg.hidden_units,
                                          output_head="nonnegative", out_scale=0.0),
        }

    def init(self, key, dtype=jnp.float64) -> dict:
        keys = jax.random.split(key, 4)
        p = {name: approx.init_params(self.specs[name], k, dtype)
             for name, k in zip(("qr", "qc", "vr", "vc"), keys)}
        # start the cost critic with its mass on the zero bin (nothing observed yet)
        spec = self.specs["qc"]
        seg = {s.name: s for s in spec.layout}[f"layer{len(spec.widths) - 2}.bias"]
        p["qc"] = p["qc"].at[seg.offset].set(5.0)
        p["qr_target"] = p["qr"]
        p["qc_target"] = p["qc"]
        return p

    @staticmethod
    def channel_keys(channel: str):
        if channel not in ("reward", "cost"):
            raise ValueError(f"unknown channel {channel!r}")
        return ("qr", "vr") if channel == "reward" else ("qc", "vc")

    def q_logits(self, params, name, s, a_vec):
        spec = self.specs[name.replace("_target", "")]
        return approx.forward(spec, params[name], jnp.concatenate([s, a_vec], -1))

    def q_mean(self, params, channel, s, a_vec, target: bool = False):
        qk, _ = self.channel_keys(channel)
        name = qk + "_target" if target else qk
        return categorical_mean(self.q_logits(params, name, s, a_vec), self.bins[channel])

    def value(self, params, channel, s):
        _, vk = self.channel_keys(channel)
        return approx.forward(self.specs[vk], params[vk], s)[..., 0]

    def advantages(self, params, s, a_vec):
        """``(A^r, A^c)`` from critic means minus state values."""
        a_r = self.q_mean(params, "reward", s, a_vec) - self.value(params, "reward", s)
        a_c = self.q_mean(params, "cost", s, a_vec) - self.value(params, "cost", s)
        return a_r, a_c

    # -- losses ----------------------------------------------------------

    def value_loss(self, params, channel, s, a_vec, mask):
        """In-sample expectile regression of ``V(s)`` onto the target critic mean."""
        tau = self.cfg.tau if channel == "reward" else self.cfg.tau_c
        q = sg(self.q_mean(params, channel, s, a_vec, target=True))
        loss = expectile_value_loss(q, self.value(params, channel, s), tau)
        return jnp.sum(loss * mask) / jnp.maximum(jnp.sum(mask), 1.0)

    def lambda_returns(self, params, channel, rollout, signal):
        """TD(lambda) targets along an imagined rollout with the channel's ``V``."""
        lam = self.cfg.lambda_r if channel == "reward" else self.cfg.lambda_c
        values = self.value(params, channel, rollout["states"])
        disc = self.cfg.gamma * rollout["cont"][1:]
        return td_lambda(signal, values, disc, lam, self.cfg.bootstrap)

    def critic_loss(self, params, channel, rollout, returns, weight, data):
        """``L_Q1`` on imagined pairs plus ``L_Q2`` on dataset transitions.

        ``rollout``: imagined states ``(H+1, N, S)`` and actions ``(H, N, A)``;
        ``returns``: lambda-returns ``(H+1, N)``; ``weight``: ``(H, N)``
        rollout weights (cumulative continuation). ``data`` holds dataset
        ``s, a_vec`` at step ``t`` with ``signal, s_next, not_terminal, mask``
        where ``signal`` is the reward/cost received on reaching ``s_next``.
        """
        qk, _ = self.channel_keys(channel)
        bins = self.bins[channel]
        H = rollout["action_vec"].shape[0]
        if H > 0:
            logits = self.q_logits(params, qk, sg(rollout["states"][:-1]), sg(rollout["action_vec"]))
            nll1 = categorical_nll(logits, sg(returns[:-1]), bins)
            l1 = jnp.sum(nll1 * weight) / (H * nll1.shape[1])
        else:
            l1 = jnp.zeros(())
        target = data["signal"] + self.cfg.gamma * data["not_terminal"] * self.value(params, channel, data["s_next"])
        logits = self.q_logits(params, qk, data["s"], data["a_vec"])
        nll2 = categorical_nll(logits, sg(target), bins)
        l2 = jnp.sum(nll2 * data["mask"]) / jnp.maximum(jnp.sum(data["mask"]), 1.0)
        return l1 + l2, {"q1": l1, "q2": l2}

    def update_targets(self, params):
        decay = self.cfg.ema_decay
        out = dict(params)
        out["qr_target"] = ema_update(params["qr_target"], params["qr"], decay)
        out["qc_target"] = ema_update(params["qc_target"], params["qc"], decay)
        return out
