"""Reach-violation estimation and the augmented-Lagrangian cost penalty.

The learned function ``v(s)`` estimates whether following the current policy
from ``s`` eventually breaches the constraint; ``u_feasible = 1 - v`` is the
feasibility weight used by the policy objectives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from fosp import approx

sg = jax.lax.stop_gradient
MU_MAX = 1.0


def violation_indicator(cost_prob=None, *, hazard=None):
    """1 where the state breaches the constraint.

    Latent states pass the cost head's Bernoulli probability (``>= 0.5`` is a
    violation, ties count as unsafe); tabular states pass ``hazard``.
    """
    if hazard is not None:
        return np.asarray(hazard).astype(float)
    return (cost_prob >= 0.5).astype(jnp.result_type(cost_prob, jnp.float32))


def ref_target(violation, v_next, gamma_u: float):
    """``max(violation, gamma_u * v_next)`` with ``v_next`` treated as a constant."""
    return jnp.maximum(violation, gamma_u * sg(v_next))


def ref_network_spec(state_dim: int, hidden_units: int = 64, hidden_layers: int = 2):
    return approx.ApproximatorSpec(state_dim, 1, hidden_layers, hidden_units, output_head="unit_interval")


def ref_value(spec, params, s):
    return approx.forward(spec, params, s)[..., 0]


def ref_loss(spec, params, rollout, violation, gamma_u: float, weight=None, target_params=None):
    """Squared error of ``v(s_h)`` against the max-backup target, ``h < H``.

    ``rollout["states"]`` is ``(H+1, N, S)``; ``violation`` is ``(H+1, N)``
    for every state; the last state only serves as a bootstrap. If the
    rollout carries ``cont`` the bootstrap is multiplied by it, so a
    terminated branch stops propagating. ``target_params`` (default
    ``params``) evaluates the bootstrap, which makes the semi-gradient an
    exact gradient of the returned loss for a fixed target network.
    """
    states = sg(rollout["states"])
    H = states.shape[0] - 1
    if H == 0:
        return jnp.zeros((), states.dtype)
    v = ref_value(spec, params, states)
    nxt = v[1:] if target_params is None else ref_value(spec, target_params, states[1:])
    if "cont" in rollout:
        nxt = nxt * sg(rollout["cont"][1:])
    target = ref_target(violation[:-1], nxt, gamma_u)
    err = (v[:-1] - target) ** 2
    if weight is None:
        return jnp.mean(err)
    return jnp.sum(err * weight) / err.size


class LagrangianState(NamedTuple):
    lam: jnp.ndarray  # lambda_p >= 0
    mu: jnp.ndarray  # penalty coefficient > 0
    nu: float  # growth rate of mu per gradient step
    step: jnp.ndarray


def lagrangian_init(lam0: float = 0.01, mu0: float = 1e-6, nu: float = 5e-9) -> LagrangianState:
    if lam0 < 0 or mu0 <= 0 or nu < 0:
        raise ValueError("need lambda_p >= 0, mu > 0, nu >= 0")
    return LagrangianState(jnp.asarray(lam0, jnp.float64), jnp.asarray(mu0, jnp.float64), nu,
                           jnp.zeros((), jnp.int64))


def psi_penalty(v_c, lam, mu):
    """Piecewise penalty ``Psi`` and the next multiplier.

    ``lam + mu v_c >= 0``: ``Psi = lam v_c + mu v_c^2 / 2``, ``lam' = lam + mu v_c``;
    otherwise ``Psi = -lam^2 / (2 mu)``, ``lam' = 0``.
    """
    cond = lam + mu * v_c >= 0
    psi = jnp.where(cond, lam * v_c + 0.5 * mu * v_c ** 2, -lam ** 2 / (2 * mu))
    lam_next = jnp.where(cond, lam + mu * v_c, 0.0)
    return psi, lam_next


def advance_penalty(lag: LagrangianState, steps: int = 1) -> LagrangianState:
    """Compound ``mu`` by ``(1 + nu)`` per gradient step, clamped at ``MU_MAX``."""
    mu = jnp.minimum(lag.mu * (1.0 + lag.nu) ** steps, MU_MAX)
    return lag._replace(mu=jnp.maximum(mu, lag.mu), step=lag.step + steps)


def lagrangian_update(lag: LagrangianState, v_c):
    """One gradient step's worth: penalty at the current state, then advance."""
    psi, lam_next = psi_penalty(v_c, lag.lam, lag.mu)
    return psi, advance_penalty(lag._replace(lam=lam_next))


@dataclass(frozen=True)
class SafetyConfig:
    gamma_u: float = 0.99
    lam0: float = 0.01
    mu0: float = 1e-6
    nu: float = 5e-9
    ref_lr_scale: float = 3.0
