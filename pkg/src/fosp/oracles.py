"""Exact tabular ground truth used by tests, audits and acceptance checks.

Nothing here touches a learned component: value iteration, the zero-cost
constrained variant, the reach-violation fixed point, an explicit n-step
expansion of TD(lambda), expectiles by bisection and Monte-Carlo evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class InfeasibleError(RuntimeError):
    """No zero-cost policy exists from the start state."""


@dataclass
class TabularMdp:
    """Finite CMDP; ``r`` and ``c`` are expected per-(s, a) reward and cost."""

    P: np.ndarray  # (S, A, S)
    r: np.ndarray  # (S, A)
    c: np.ndarray  # (S, A)
    gamma: float
    hazard: np.ndarray  # (S,) bool
    start: int = 0
    terminal: np.ndarray | None = None  # (S,) bool, absorbing states
    horizon: int = 100

    def __post_init__(self):
        S, A, S2 = self.P.shape
        if S != S2 or self.r.shape != (S, A) or self.c.shape != (S, A) or self.hazard.shape != (S,):
            raise ValueError("inconsistent tabular shapes")
        if np.any(np.abs(self.P.sum(-1) - 1.0) > 1e-12) or np.any(self.P < 0):
            raise ValueError("transition rows must be distributions (sum to 1 within 1e-12)")
        if np.any(self.c < 0) or np.any(self.c > 1):
            raise ValueError("per-step cost must lie in [0, 1]")
        if self.terminal is None:
            self.terminal = np.zeros(S, bool)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def _greedy(Q: np.ndarray) -> np.ndarray:
    return np.argmax(Q, axis=1)


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_sweeps: int = 100_000):
    """Unconstrained optimum: returns ``(V*, Q*, greedy policy)``."""
    if not mdp.gamma < 1:
        raise ValueError("value iteration needs gamma < 1")
    V = np.zeros(mdp.n_states)
    for _ in range(max_sweeps):
        Q = mdp.r + mdp.gamma * mdp.P @ V
        V_new = Q.max(axis=1)
        done = np.max(np.abs(V_new - V)) < tol * (1 - mdp.gamma)
        V = V_new
        if done:
            break
    Q = mdp.r + mdp.gamma * mdp.P @ V
    return V, Q, _greedy(Q)


def zero_cost_sets(mdp: TabularMdp):
    """Largest set of states that can avoid hazards forever, and its safe actions.

    Safety backward induction: start from the non-hazard states and repeatedly
    drop states with no action whose support stays inside the set.
    """
    feasible = ~mdp.hazard.copy()
    support = mdp.P > 0
    while True:
        # action a is safe in s iff every reachable s' is feasible
        safe_actions = ~np.any(support & ~feasible[None, None, :], axis=2)
        new = feasible & safe_actions.any(axis=1)
        if np.array_equal(new, feasible):
            break
        feasible = new
    safe_actions &= feasible[:, None]
    return feasible, safe_actions


def constrained_value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_sweeps: int = 100_000):
    """Zero-cost optimum (threshold d = 0).

    Returns ``(V_safe, Q_safe, policy, feasible)``; ``V_safe``/``Q_safe`` are
    ``-inf`` outside the feasible set / safe action set. Infeasible states get
    the unconstrained greedy action so the policy is total.
    """
    feasible, safe_actions = zero_cost_sets(mdp)
    if not feasible[mdp.start]:
        raise InfeasibleError(f"start state {mdp.start} cannot avoid violations")
    V = np.where(feasible, 0.0, -np.inf)
    Vf = np.where(feasible, V, 0.0)
    for _ in range(max_sweeps):
        Q = np.where(safe_actions, mdp.r + mdp.gamma * mdp.P @ Vf, -np.inf)
        V_new = np.where(feasible, Q.max(axis=1), -np.inf)
        Vf_new = np.where(feasible, V_new, 0.0)
        done = np.max(np.abs(Vf_new - Vf)) < tol * (1 - mdp.gamma)
        Vf = Vf_new
        if done:
            break
    Q = np.where(safe_actions, mdp.r + mdp.gamma * mdp.P @ Vf, -np.inf)
    V = np.where(feasible, Q.max(axis=1), -np.inf)
    _, Q_star, pi_star = value_iteration(mdp, tol, max_sweeps)
    policy = np.where(feasible, _greedy(Q), pi_star)
    return V, Q, policy, feasible


def policy_matrix(policy, n_actions: int) -> np.ndarray:
    policy = np.asarray(policy)
    if policy.ndim == 1:
        return np.eye(n_actions)[policy]
    return policy


def exact_reach_violation(mdp: TabularMdp, policy, gamma_u: float, tol: float = 1e-12,
                          max_sweeps: int = 100_000) -> np.ndarray:
    """Fixed point of ``v(s) = 1 if hazard(s) else gamma_u * E[v(s')]``."""
    pi = policy_matrix(policy, mdp.n_actions)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    v = mdp.hazard.astype(float)
    for _ in range(max_sweeps):
        v_new = np.where(mdp.hazard, 1.0, gamma_u * P_pi @ v)
        done = np.max(np.abs(v_new - v)) < tol
        v = v_new
        if done:
            break
    return v


def reach_violation_residual(mdp: TabularMdp, policy, gamma_u: float, v: np.ndarray) -> float:
    pi = policy_matrix(policy, mdp.n_actions)
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    return float(np.max(np.abs(np.where(mdp.hazard, 1.0, gamma_u * P_pi @ v) - v)))


def bellman_residual(mdp: TabularMdp, V: np.ndarray) -> float:
    return float(np.max(np.abs((mdp.r + mdp.gamma * mdp.P @ V).max(axis=1) - V)))


def enumerate_td_lambda(rewards, values, gamma, lam) -> np.ndarray:
    """Lambda-returns by explicit mixture of n-step returns.

    ``rewards[k]`` is the reward on arriving at state ``k + 1``; ``values`` has
    one more entry than ``rewards``. ``gamma`` is a scalar or a per-step array
    (``gamma[k]`` discounts what follows arrival at state ``k + 1``).
    Returns ``R_0 .. R_H`` with ``R_H = V_H``.
    """
    r = np.asarray(rewards, float)
    V = np.asarray(values, float)
    H = len(r)
    if len(V) != H + 1:
        raise ValueError("values must have len(rewards) + 1 entries")
    g = np.broadcast_to(np.asarray(gamma, float), (H,))
    out = np.empty(H + 1)
    out[H] = V[H]
    for h in range(H):
        m = H - h

        def n_step(n):
            total, disc = 0.0, 1.0
            for k in range(1, n + 1):
                total += disc * r[h + k - 1]
                disc *= g[h + k - 1]
            return total + disc * V[h + n]

        if m == 1:
            out[h] = n_step(1)
            continue
        mix = sum((1 - lam) * lam ** (n - 1) * n_step(n) for n in range(1, m))
        out[h] = mix + lam ** (m - 1) * n_step(m)
    return out


def expectile_bisection(samples, tau: float, iters: int = 200) -> float:
    """Root of ``sum |tau - 1{x < e}| (x - e) = 0`` (the tau-expectile)."""
    x = np.sort(np.asarray(samples, float))
    if x.size == 0 or not 0 < tau < 1:
        raise ValueError("need >= 1 sample and tau in (0, 1)")

    def foc(e):
        w = np.where(x < e, 1 - tau, tau)
        return np.sum(w * (x - e))

    lo, hi = x[0], x[-1]
    if lo == hi:
        return float(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if foc(mid) > 0:
            lo = mid
        else:
            hi = mid
    # exact solve on the linear piece containing the root
    e = 0.5 * (lo + hi)
    w = np.where(x < e, 1 - tau, tau)
    e_exact = float(np.sum(w * x) / np.sum(w))
    if abs(foc(e_exact)) <= abs(foc(e)):
        e = e_exact
    return float(e)


def monte_carlo_eval(env, policy: Callable, episodes: int, seed: int):
    """Mean undiscounted reward and cost returns, and the cost regret.

    ``env`` is a ``TabularMdp`` (``policy`` maps a state index or is an action
    array) or an environment with ``reset``/``step`` (``policy`` maps an
    observation). Cost regret is the running average of per-episode cost
    after the last episode.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    rewards, costs = [], []
    if isinstance(env, TabularMdp):
        act = policy if callable(policy) else (lambda s, _p=np.asarray(policy): int(_p[s]))
        for _ in range(episodes):
            s, R, C = env.start, 0.0, 0.0
            for _t in range(env.horizon):
                a = act(s)
                R += env.r[s, a]
                C += env.c[s, a]
                s = int(rng.choice(env.n_states, p=env.P[s, a]))
                if env.terminal[s]:
                    break
            rewards.append(R)
            costs.append(C)
    else:
        for ep in range(episodes):
            obs = env.reset(int(rng.integers(2**31)))
            R = C = 0.0
            done = False
            while not done:
                obs, r, c, done = env.step(policy(obs))
                R += r
                C += c
            rewards.append(R)
            costs.append(C)
    running = np.cumsum(costs) / np.arange(1, len(costs) + 1)
    return float(np.mean(rewards)), float(np.mean(costs)), float(running[-1])
