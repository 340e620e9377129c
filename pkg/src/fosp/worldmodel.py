"""Recurrent state-space world model with reward, cost and continuation heads.

Latent state ``s = concat(h, flatten(z))``: ``h`` is the deterministic GRU
state, ``z`` a stack of ``latents`` one-hot vectors of ``classes`` entries.
Arrays are time-major inside the model: ``(T, B, ...)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import jax
import jax.numpy as jnp

from fosp import approx
from fosp.envs import ActionSpace

sg = jax.lax.stop_gradient
LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class WorldModelConfig:
    obs_dim: int
    action_space: ActionSpace
    deter: int = 128
    latents: int = 8
    classes: int = 8
    hidden_units: int = 64
    hidden_layers: int = 2
    kl_scale: float = 0.1  # weight of the representation KL term
    free_bits: float = 1.0
    continue_head: bool = True
    unimix: float = 0.0

    @property
    def stoch(self) -> int:
        return self.latents * self.classes

    @property
    def state_dim(self) -> int:
        return self.deter + self.stoch


def action_vector(space: ActionSpace, action, dtype=jnp.float64):
    """Network-facing action encoding (one-hot for discrete spaces)."""
    if space.kind == "discrete":
        return jax.nn.one_hot(action, space.n, dtype=dtype)
    return jnp.asarray(action, dtype)


def sample_latent(logits, key, straight_through: bool = True, mode: bool = False, unimix: float = 0.0):
    """One-hot sample per latent row with a straight-through gradient.

    Returns ``(z, probs)``; the value of ``z`` is exactly one-hot while its
    gradient is that of ``probs``.
    """
    probs = jax.nn.softmax(logits, axis=-1)
    if unimix > 0:
        probs = (1 - unimix) * probs + unimix / logits.shape[-1]
    if mode:
        idx = jnp.argmax(probs, axis=-1)
    else:
        idx = jax.random.categorical(key, jnp.log(probs), axis=-1)
    onehot = jax.nn.one_hot(idx, logits.shape[-1], dtype=logits.dtype)
    if straight_through:
        return onehot + probs - sg(probs), probs
    return onehot, probs


def categorical_kl(p_logits, q_logits):
    """``KL(p || q)`` summed over latents; inputs ``(..., latents, classes)``."""
    lp = jax.nn.log_softmax(p_logits, -1)
    lq = jax.nn.log_softmax(q_logits, -1)
    return jnp.sum(jnp.exp(lp) * (lp - lq), axis=(-2, -1))


class WorldModel:
    """Parameter-free description of the model; all methods are pure."""

    def __init__(self, cfg: WorldModelConfig):
        self.cfg = cfg
        S, A = cfg.state_dim, cfg.action_space.size
        mlp = lambda i, o, **kw: approx.ApproximatorSpec(i, o, cfg.hidden_layers, cfg.hidden_units, **kw)
        self.specs = {
            "gru": approx.GruSpec(cfg.stoch + A, cfg.deter),
            "prior": mlp(cfg.deter, cfg.stoch, output_head="logits"),
            "posterior": mlp(cfg.deter + cfg.obs_dim, cfg.stoch, output_head="logits"),
            "obs": mlp(S, cfg.obs_dim),
            "reward": mlp(S, 1, out_scale=0.0),
            "cost": mlp(S, 1, out_scale=0.0),
        }
        if cfg.continue_head:
            self.specs["cont"] = mlp(S, 1, out_scale=0.0)

    def init(self, key, dtype=jnp.float64) -> dict:
        keys = jax.random.split(key, len(self.specs))
        return {name: approx.init_params(spec, k, dtype)
                for (name, spec), k in zip(sorted(self.specs.items()), keys)}

    # -- components ------------------------------------------------------

    def sequence_step(self, params, h, z, a_vec):
        """``h_t = f(z_{t-1}, h_{t-1}, a_{t-1})``; ``z`` flattened."""
        return approx.gru_step(self.specs["gru"], params["gru"], jnp.concatenate([z, a_vec], -1), h)

    def _shape(self, flat):
        return flat.reshape(flat.shape[:-1] + (self.cfg.latents, self.cfg.classes))

    def prior(self, params, h):
        return self._shape(approx.forward(self.specs["prior"], params["prior"], h))

    def posterior(self, params, h, x):
        spec = self.specs["posterior"]
        return self._shape(approx.forward(spec, params["posterior"], jnp.concatenate([h, x], -1)))

    def state(self, h, z):
        return jnp.concatenate([h, z.reshape(z.shape[:-2] + (-1,)) if z.ndim > h.ndim else z], -1)

    def decode(self, params, s) -> dict:
        out = {
            "obs_mean": approx.forward(self.specs["obs"], params["obs"], s),
            "reward_mean": approx.forward(self.specs["reward"], params["reward"], s)[..., 0],
            "cost_logit": approx.forward(self.specs["cost"], params["cost"], s)[..., 0],
        }
        if self.cfg.continue_head:
            out["cont_logit"] = approx.forward(self.specs["cont"], params["cont"], s)[..., 0]
        return out

    def cost_prob(self, params, s):
        return jax.nn.sigmoid(approx.forward(self.specs["cost"], params["cost"], s)[..., 0])

    def cont_prob(self, params, s):
        if not self.cfg.continue_head:
            return jnp.ones(s.shape[:-1], s.dtype)
        return jax.nn.sigmoid(approx.forward(self.specs["cont"], params["cont"], s)[..., 0])

    # -- sequences -------------------------------------------------------

    def observe(self, params, obs, act_vec, is_first, key, anchors=None, mode: bool = False):
        """Posterior states for time-major ``obs (T, B, D)``.

        ``h`` is zero at index 0 and wherever ``is_first`` is set. ``anchors``
        (``onehots``, ``probs`` from a previous call) freeze the sampled
        classes and the straight-through reference, which makes the latent
        path a smooth function of the parameters for finite-difference audits.
        """
        T, B = obs.shape[:2]
        cfg = self.cfg
        dtype = obs.dtype
        first = is_first.at[0].set(True) if T > 0 else is_first
        keys = jax.random.split(key, T)
        h0 = jnp.zeros((B, cfg.deter), dtype)
        z0 = jnp.zeros((B, cfg.stoch), dtype)
        a0 = jnp.zeros((B, act_vec.shape[-1]), dtype)
        if anchors is None:
            anchor_seq = (jnp.zeros((T, B, cfg.latents, cfg.classes), dtype),) * 2
        else:
            anchor_seq = anchors

        def step(carry, inp):
            h, z, a = carry
            x, a_t, f, k, oh_anchor, p_anchor = inp
            h = jnp.where(f[:, None], 0.0, self.sequence_step(params, h, z, a))
            post = self.posterior(params, h, x)
            if anchors is None:
                zt, probs = sample_latent(post, k, mode=mode, unimix=cfg.unimix)
                onehot = sg(zt)
            else:
                probs = jax.nn.softmax(post, -1)
                zt = oh_anchor + probs - p_anchor
                onehot = oh_anchor
            zf = zt.reshape(B, cfg.stoch)
            return (h, zf, a_t), (h, zf, post, onehot, sg(probs))

        _, (h, z, post, onehots, probs) = jax.lax.scan(
            step, (h0, z0, a0), (obs, act_vec, first, keys) + tuple(anchor_seq))
        return {"h": h, "z": z, "post_logits": post, "onehots": onehots, "probs": probs,
                "prior_logits": self.prior(params, h)}

    def model_loss(self, params, batch, key, anchors=None, kl_anchors=None):
        """KL-balanced sequence ELBO.

        ``batch`` is time-major with keys ``obs, act_vec, reward, cost,
        is_first, is_terminal``. Returns ``(loss, (components, states))``;
        the loss sums over time and averages over the batch, components are
        per-step means (KL values before the free-bits floor).

        ``kl_anchors`` (``post_logits``, ``prior_logits`` from a previous call)
        replace the stop-gradient side of each KL term by fixed values. The
        gradient is unchanged at the anchored point, and the loss becomes a
        function whose finite differences match it.
        """
        cfg = self.cfg
        states = self.observe(params, batch["obs"], batch["act_vec"], batch["is_first"], key, anchors)
        s = self.state(states["h"], states["z"])
        dec = self.decode(params, s)
        D = batch["obs"].shape[-1]
        obs_nll = 0.5 * jnp.sum((batch["obs"] - dec["obs_mean"]) ** 2, -1) + 0.5 * D * LOG_2PI
        reward_nll = 0.5 * (batch["reward"] - dec["reward_mean"]) ** 2 + 0.5 * LOG_2PI
        cost_nll = bernoulli_nll(dec["cost_logit"], batch["cost"])
        post, prior = states["post_logits"], states["prior_logits"]
        post_ref, prior_ref = (sg(post), sg(prior)) if kl_anchors is None else kl_anchors
        kl_dyn = categorical_kl(post_ref, prior)
        kl_rep = categorical_kl(post, prior_ref)
        per_step = (obs_nll + reward_nll + cost_nll + jnp.maximum(kl_dyn, cfg.free_bits)
                    + cfg.kl_scale * jnp.maximum(kl_rep, cfg.free_bits))
        comps = {"obs_nll": obs_nll, "reward_nll": reward_nll, "cost_nll": cost_nll,
                 "kl_dyn": kl_dyn, "kl_rep": kl_rep}
        if cfg.continue_head:
            cont_nll = bernoulli_nll(dec["cont_logit"], 1.0 - batch["is_terminal"].astype(s.dtype))
            per_step = per_step + cont_nll
            comps["cont_nll"] = cont_nll
        loss = jnp.mean(jnp.sum(per_step, axis=0))
        comps = {k: jnp.mean(v) for k, v in comps.items()}
        states["s"] = s
        return loss, (comps, states)

    def imagine(self, params, policy: Callable, h, z, horizon: int, key, mode: bool = False) -> dict:
        """Roll the prior forward ``horizon`` steps from flat start states.

        ``policy(s, key) -> (action_vec, action)``. Output arrays are
        time-major: ``states (H+1, N, S)``, ``action_vec (H, N, A)``,
        ``reward/cost (H, N)`` for arrivals at states 1..H (cost as Bernoulli
        probability), ``cont (H+1, N)`` continuation probability of every state.
        """
        s0 = self.state(h, z)

        def step(carry, k):
            h, z = carry
            k1, k2 = jax.random.split(k)
            s = self.state(h, z)
            a_vec, a = policy(s, k1)
            h = self.sequence_step(params, h, z, a_vec)
            zt, _ = sample_latent(self.prior(params, h), k2, straight_through=False, mode=mode,
                                  unimix=self.cfg.unimix)
            z = zt.reshape(zt.shape[:-2] + (-1,))
            return (h, z), (self.state(h, z), a_vec, a)

        keys = jax.random.split(key, horizon)
        _, (states, a_vecs, actions) = jax.lax.scan(step, (h, z), keys, length=horizon)
        states = jnp.concatenate([s0[None], states], 0)
        dec = self.decode(params, states[1:])
        return {
            "states": states,
            "action_vec": a_vecs,
            "action": actions,
            "reward": dec["reward_mean"],
            "cost": jax.nn.sigmoid(dec["cost_logit"]),
            "cont": self.cont_prob(params, states),
        }


def bernoulli_nll(logit, target):
    return jax.nn.softplus(logit) - target * logit
