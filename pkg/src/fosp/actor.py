"""Policy heads and the feasibility-weighted policy objectives.

Offline, the policy regresses onto dataset actions weighted by
``u exp(b1 A_r) + (1 - u) exp(-b2 A_c)``; online, onto its own imagined actions
with the signed weight ``u b1 A_r - (1 - u) b2 A_c``. Weights, advantages and
``u`` never carry gradient.
"""

from __future__ import annotations

import math

import jax
import jax.numpy as jnp

from fosp import approx
from fosp.envs import ActionSpace

sg = jax.lax.stop_gradient
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
W_MAX = 100.0
_ATANH_LIMIT = 1 - 1e-6


class PolicyHead:
    """Discrete softmax or tanh-squashed Gaussian policy over latent states."""

    def __init__(self, state_dim: int, space: ActionSpace, hidden_units: int = 64, hidden_layers: int = 2):
        self.space = space
        out = space.n if space.kind == "discrete" else 2 * space.dim
        self.spec = approx.ApproximatorSpec(state_dim, out, hidden_layers, hidden_units,
                                            output_head="logits" if space.kind == "discrete" else "linear",
                                            out_scale=0.1)

    @property
    def discrete(self) -> bool:
        return self.space.kind == "discrete"

    def init(self, key, dtype=jnp.float64):
        return approx.init_params(self.spec, key, dtype)

    def dist(self, params, s):
        """Logits, or ``(mean, log_std)`` with the log-std clamped."""
        out = approx.forward(self.spec, params, s)
        if self.discrete:
            return out
        mean, log_std = jnp.split(out, 2, axis=-1)
        return mean, jnp.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)

    def _squash(self, u):
        lo, hi = self.space.low, self.space.high
        return lo + (jnp.tanh(u) + 1) * 0.5 * (hi - lo)

    def sample(self, params, s, key, mode: bool = False):
        """Returns ``(action_vec, action)``; ``action_vec`` is network-facing."""
        d = self.dist(params, s)
        if self.discrete:
            a = jnp.argmax(d, -1) if mode else jax.random.categorical(key, d, -1)
            return jax.nn.one_hot(a, self.space.n, dtype=d.dtype), a
        mean, log_std = d
        u = mean if mode else mean + jnp.exp(log_std) * jax.random.normal(key, mean.shape, mean.dtype)
        a = self._squash(u)
        return a, a

    def log_prob(self, params, s, action):
        d = self.dist(params, s)
        if self.discrete:
            logp = jax.nn.log_softmax(d, -1)
            return jnp.take_along_axis(logp, jnp.asarray(action)[..., None].astype(jnp.int32), -1)[..., 0]
        mean, log_std = d
        lo, hi = self.space.low, self.space.high
        y = jnp.clip((action - lo) / (hi - lo) * 2 - 1, -_ATANH_LIMIT, _ATANH_LIMIT)
        u = jnp.arctanh(y)
        gauss = -0.5 * ((u - mean) / jnp.exp(log_std)) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
        jac = jnp.log(1 - y ** 2) + math.log(0.5 * (hi - lo))
        return jnp.sum(gauss - jac, -1)

    def log_prob_vec(self, params, s, action_vec):
        """Log-likelihood from the network-facing encoding."""
        if self.discrete:
            return jnp.sum(action_vec * jax.nn.log_softmax(self.dist(params, s), -1), -1)
        return self.log_prob(params, s, action_vec)

    def entropy(self, params, s):
        """Shannon entropy (discrete) or pre-squash Gaussian entropy."""
        return entropy(self.dist(params, s), self.discrete)

    def probs(self, params, s):
        return jax.nn.softmax(self.dist(params, s), -1)


def entropy(dist, discrete: bool = True):
    if discrete:
        logp = jax.nn.log_softmax(dist, -1)
        return -jnp.sum(jnp.exp(logp) * logp, -1)
    _, log_std = dist
    return jnp.sum(log_std + 0.5 * (1 + math.log(2 * math.pi)), -1)


def standardize(x, mask=None, eps: float = 1e-6):
    if mask is None:
        mask = jnp.ones_like(x)
    n = jnp.maximum(jnp.sum(mask), 1.0)
    mean = jnp.sum(x * mask) / n
    std = jnp.sqrt(jnp.sum(((x - mean) * mask) ** 2) / n)
    return (x - mean) / (std + eps)


def offline_weight(u, a_r, a_c, beta1: float = 10.0, beta2: float = 10.0, w_max: float = W_MAX,
                   return_clipped: bool = False):
    """``min(w_max, u exp(b1 A_r) + (1 - u) exp(-b2 A_c))`` evaluated in log space.

    With ``return_clipped`` also returns a mask of entries that hit the ceiling
    (including any that would have overflowed).
    """
    u = jnp.asarray(u)
    log_w = jnp.logaddexp(jnp.log(u) + beta1 * a_r, jnp.log1p(-u) - beta2 * a_c)
    clipped = ~(log_w <= math.log(w_max))
    w = jnp.where(clipped, w_max, jnp.exp(jnp.minimum(log_w, math.log(w_max))))
    return (w, clipped) if return_clipped else w


def online_weight(u, a_r, a_c, beta1: float = 10.0, beta2: float = 10.0):
    return u * beta1 * a_r - (1 - u) * beta2 * a_c


def _masked_mean(x, mask):
    return jnp.sum(x * mask) / jnp.maximum(jnp.sum(mask), 1e-12)


def offline_policy_loss(logp, ent, w, u, psi, eta: float, mask=None):
    """``-mean(w log pi + eta H) + Psi mean(u)`` over dataset steps.

    ``w``, ``u`` and ``psi`` are gradient-stopped here.
    """
    if mask is None:
        mask = jnp.ones_like(logp)
    fit = _masked_mean(sg(w) * logp + eta * ent, mask)
    return -fit + sg(psi) * _masked_mean(sg(u), mask)


def online_policy_loss(logp, ent, w, u, psi, eta: float, weight=None):
    """Score-function form over imagined steps: ``-mean(w log pi + eta H) + Psi mean(u)``."""
    if weight is None:
        weight = jnp.ones_like(logp)
    fit = jnp.sum(sg(weight) * (sg(w) * logp + eta * ent)) / logp.size
    return -fit + sg(psi) * jnp.mean(sg(u))
