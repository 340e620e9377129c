"""Offline-to-online policy expansion.

A frozen offline policy and a trainable online policy both propose an action
each step; one is picked with Boltzmann probabilities over critic values.
The frozen policy keeps reading latent states from its own frozen world model,
while the online policy reads from the fine-tuned copy.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from fosp import approx
from fosp.worldmodel import sample_latent


def selection_probs(q_values, alpha: float) -> np.ndarray:
    """Softmax of ``q / alpha`` computed with max subtraction (float64 numpy)."""
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    z = np.asarray(q_values, np.float64) / alpha
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=-1, keepdims=True)
    # the last entry is the complement so the row sums to one without round-off
    p[..., -1] = 1.0 - np.sum(p[..., :-1], axis=-1)
    return p


def select_action(q_beta, q_psi, alpha: float, rng: np.random.Generator, actions=None):
    """Pick index 0 (offline) or 1 (online) per Boltzmann probabilities.

    Returns ``(index, action)``; ``action`` is ``actions[index]`` when given.
    The two probabilities sum to one exactly because the second is formed as
    the complement of the first.
    """
    p = selection_probs([q_beta, q_psi], alpha)
    p_beta = float(p[0])
    idx = 0 if rng.random() < p_beta else 1
    return idx, (None if actions is None else actions[idx])


def checksum(tree) -> str:
    """SHA-256 over the bytes of every leaf (sorted by name)."""
    h = hashlib.sha256()
    for name, arr in sorted(approx.flatten_tree(tree).items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class FrozenParameterError(RuntimeError):
    pass


@dataclass
class PolicyPair:
    """Frozen offline policy (with its world model) and the online policy."""

    beta: dict  # {"actor": ..., "wm": ...}, never updated
    alpha: float = 10.0
    _checksum: str = field(default="", init=False)

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        self.beta = jax.tree_util.tree_map(lambda x: np.array(x, copy=True), self.beta)
        for leaf in jax.tree_util.tree_leaves(self.beta):
            leaf.setflags(write=False)
        self._checksum = checksum(self.beta)

    @property
    def beta_checksum(self) -> str:
        return self._checksum

    def verify(self) -> None:
        if checksum(self.beta) != self._checksum:
            raise FrozenParameterError("frozen offline parameters changed")


@jax.tree_util.register_dataclass
@dataclass
class DualModelState:
    """Recurrent states of both models tracking one observation stream."""

    h_beta: jnp.ndarray
    z_beta: jnp.ndarray
    h_psi: jnp.ndarray
    z_psi: jnp.ndarray
    first: jnp.ndarray  # scalar bool, true before the first observation

    @classmethod
    def reset(cls, deter: int, stoch: int, dtype=jnp.float64) -> "DualModelState":
        zh, zz = jnp.zeros((1, deter), dtype), jnp.zeros((1, stoch), dtype)
        return cls(zh, zz, zh, zz, jnp.ones((), bool))


def propose_actions(wm, actor, beta, psi, dual: DualModelState, obs, prev_action_vec, key,
                    mode: bool = False):
    """Advance both recurrent states on ``obs`` and draw one action from each policy.

    ``beta``/``psi`` are ``{"actor", "wm"}`` parameter dicts. Pure in its
    array arguments, so callers may ``jax.jit`` it with ``wm``/``actor``
    bound. Returns ``(a_beta, a_psi, s_beta, s_psi, dual')`` where actions
    are ``(action_vec, action)`` pairs.
    """
    obs = jnp.asarray(obs)[None]
    keys = jax.random.split(key, 4)

    def advance(p, h, z, k):
        h = jnp.where(dual.first, jnp.zeros_like(h), wm.sequence_step(p, h, z, prev_action_vec))
        zt, _ = sample_latent(wm.posterior(p, h, obs), k, straight_through=False, mode=mode)
        z = zt.reshape(1, -1)
        return h, z, wm.state(h, z)

    hb, zb, sb = advance(beta["wm"], dual.h_beta, dual.z_beta, keys[0])
    hp, zp, sp = advance(psi["wm"], dual.h_psi, dual.z_psi, keys[1])
    a_beta = actor.sample(beta["actor"], sb, keys[2], mode)
    a_psi = actor.sample(psi["actor"], sp, keys[3], mode)
    return a_beta, a_psi, sb, sp, DualModelState(hb, zb, hp, zp, jnp.zeros((), bool))


def transition_offline_to_online(params: dict, alpha: float = 10.0):
    """Split an offline parameter set into a policy pair and online parameters.

    The online actor and fine-tuning world model start as copies of the
    offline ones; critics, values, REF and targets carry over unchanged.
    """
    frozen = {"actor": params["actor"], "wm": params["wm"]}
    online = jax.tree_util.tree_map(lambda x: jnp.array(x, copy=True), params)
    pair = PolicyPair(frozen, alpha)
    return pair, online
