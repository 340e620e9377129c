"""Desk-scale constrained MDPs and scripted behavior policies.

Two environments stand in for goal-reaching safety tasks: a gridworld with
hazard cells (exactly solvable by the oracles) and a continuous point robot
with hazard discs and a range sensor. Both emit a binary per-step cost that is
1 exactly when the post-transition state lies in a hazard.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from fosp import oracles


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "discrete" | "box"
    n: int = 0  # discrete: number of actions
    dim: int = 0  # box: dimensionality
    low: float = -1.0
    high: float = 1.0

    @property
    def size(self) -> int:
        """Width of the action vector fed to networks (one-hot for discrete)."""
        return self.n if self.kind == "discrete" else self.dim

    def contains(self, action) -> bool:
        if self.kind == "discrete":
            return isinstance(action, (int, np.integer)) and 0 <= int(action) < self.n
        a = np.asarray(action, float)
        return a.shape == (self.dim,) and bool(np.all(a >= self.low) & np.all(a <= self.high))


@dataclass(frozen=True)
class CmdpSpec:
    obs_dim: int
    action_space: ActionSpace
    cost_threshold: float = 0.0
    discount: float = 0.997
    horizon: int = 100

    def __post_init__(self):
        if self.cost_threshold < 0:
            raise ValueError("cost threshold must be >= 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0 < self.discount < 1:
            raise ValueError("discount must be in (0, 1)")


class InvalidActionError(ValueError):
    pass


# row, col deltas: up, down, left, right
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass
class GridworldCmdp:
    width: int = 5
    height: int = 5
    start: tuple[int, int] = (4, 2)
    goal: tuple[int, int] = (0, 2)
    hazards: frozenset = frozenset({(1, 2), (2, 2), (3, 2)})
    slip_probability: float = 0.0
    cost_threshold: float = 0.0
    discount: float = 0.997
    horizon: int = 100
    step_reward: float = -0.01
    goal_reward: float = 1.0
    # counts every call to step() on any instance; the offline phase must leave it untouched
    total_interactions = 0

    _pos: tuple[int, int] = field(default=None, init=False, repr=False)
    _t: int = field(default=0, init=False, repr=False)
    _rng: np.random.Generator = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.hazards = frozenset(tuple(h) for h in self.hazards)
        self.start, self.goal = tuple(self.start), tuple(self.goal)
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self._inside(cell):
                raise ValueError(f"{name} cell {cell} outside the grid")
            if cell in self.hazards:
                raise ValueError(f"{name} cell {cell} is a hazard")
        if not 0 <= self.slip_probability < 1:
            raise ValueError("slip probability must be in [0, 1)")
        if not self._safe_path_exists():
            raise ValueError("goal is not reachable along a hazard-free path")
        self.spec  # validates discount/horizon/threshold

    @property
    def spec(self) -> CmdpSpec:
        return CmdpSpec(self.width * self.height, ActionSpace("discrete", n=4),
                        self.cost_threshold, self.discount, self.horizon)

    def _inside(self, cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def _move(self, cell, action: int):
        dr, dc = MOVES[action]
        nxt = (cell[0] + dr, cell[1] + dc)
        return nxt if self._inside(nxt) else cell

    def _safe_path_exists(self) -> bool:
        seen, queue = {self.start}, deque([self.start])
        while queue:
            cell = queue.popleft()
            if cell == self.goal:
                return True
            for a in range(4):
                nxt = self._move(cell, a)
                if nxt not in seen and nxt not in self.hazards:
                    seen.add(nxt)
                    queue.append(nxt)
        return False

    def index(self, cell) -> int:
        return cell[0] * self.width + cell[1]

    def cell(self, index: int) -> tuple[int, int]:
        return divmod(int(index), self.width)

    def observe(self, cell=None) -> np.ndarray:
        obs = np.zeros(self.width * self.height)
        obs[self.index(self._pos if cell is None else cell)] = 1.0
        return obs

    @property
    def position(self) -> tuple[int, int]:
        return self._pos

    def reset(self, seed: int | None = None) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        self._pos = self.start
        self._t = 0
        self.reached_goal = False
        return self.observe()

    def step(self, action):
        """Returns ``(observation, reward, cost, terminal)``.

        ``terminal`` is true on reaching the goal or the horizon; ``reached_goal``
        distinguishes the two.
        """
        if self._pos is None:
            raise RuntimeError("call reset() before step()")
        if not isinstance(action, (int, np.integer)) or not 0 <= int(action) < 4:
            raise InvalidActionError(f"action {action!r} outside Discrete(4)")
        GridworldCmdp.total_interactions += 1
        action = int(action)
        if self.slip_probability > 0 and self._rng.random() < self.slip_probability:
            action = int(self._rng.choice([a for a in range(4) if a != action]))
        self._pos = self._move(self._pos, action)
        self._t += 1
        cost = 1.0 if self._pos in self.hazards else 0.0
        self.reached_goal = self._pos == self.goal
        reward = self.goal_reward if self.reached_goal else self.step_reward
        terminal = self.reached_goal or self._t >= self.horizon
        return self.observe(), reward, cost, terminal

    def state_index(self, observation) -> int:
        return int(np.argmax(observation))

    @cached_property
    def tabular(self) -> oracles.TabularMdp:
        return export_tabular(self)

    @cached_property
    def oracle_policies(self):
        """Q tables of the unconstrained and zero-cost optimal policies."""
        mdp = self.tabular
        _, q_star, _ = oracles.value_iteration(mdp)
        _, q_safe, _, _ = oracles.constrained_value_iteration(mdp)
        return {"unsafe": q_star, "safe": q_safe}


def export_tabular(env) -> oracles.TabularMdp:
    """Transition tensor, expected reward/cost tables and hazard indicator.

    The goal is absorbing with zero reward and cost. A slipped move goes to
    one of the three unintended directions uniformly.
    """
    if not isinstance(env, GridworldCmdp):
        raise TypeError("export_tabular supports GridworldCmdp only")
    S = env.width * env.height
    P = np.zeros((S, 4, S))
    hazard = np.zeros(S, bool)
    for h in env.hazards:
        hazard[env.index(h)] = True
    goal = env.index(env.goal)
    for s in range(S):
        cell = env.cell(s)
        for a in range(4):
            if s == goal:
                P[s, a, s] = 1.0
                continue
            for b in range(4):
                p = 1 - env.slip_probability if b == a else env.slip_probability / 3
                if p > 0:
                    P[s, a, env.index(env._move(cell, b))] += p
    arrive_r = np.full(S, env.step_reward)
    arrive_r[goal] = env.goal_reward
    r = P @ arrive_r
    c = P @ hazard.astype(float)
    r[goal] = 0.0
    c[goal] = 0.0
    terminal = np.zeros(S, bool)
    terminal[goal] = True
    return oracles.TabularMdp(P, r, c, env.discount, hazard, start=env.index(env.start),
                              terminal=terminal, horizon=env.horizon)


def hazard_grid(**kw) -> GridworldCmdp:
    """5x5 grid whose direct route to the goal crosses a column of hazards."""
    return GridworldCmdp(**kw)


def shifted_hazard_grid(**kw) -> GridworldCmdp:
    """Same task with the hazard column moved one cell left (cells never hazardous offline)."""
    kw.setdefault("hazards", frozenset({(1, 1), (2, 1), (3, 1)}))
    return GridworldCmdp(**kw)


def open_grid(size: int = 3, **kw) -> GridworldCmdp:
    kw.setdefault("start", (size - 1, 0))
    kw.setdefault("goal", (0, size - 1))
    return GridworldCmdp(width=size, height=size, hazards=frozenset(), **kw)


GRIDWORLDS = {"hazard": hazard_grid, "shifted": shifted_hazard_grid}


@dataclass
class PointGoalCmdp:
    """Point mass on ``[-1, 1]^2`` steering toward a goal disc past hazard discs.

    Observation: goal position relative to the agent, then ``lidar_bins``
    hazard-proximity readings in ``[0, 1]`` (1 = touching). Action: 2-D
    acceleration in ``[-1, 1]^2``.
    """

    goal_center: tuple[float, float] = (0.7, 0.7)
    goal_radius: float = 0.15
    hazards: tuple = ((0.0, 0.0, 0.25), (0.45, -0.25, 0.2), (-0.3, 0.45, 0.2))
    start_center: tuple[float, float] = (-0.7, -0.7)
    lidar_bins: int = 8
    lidar_range: float = 1.0
    max_speed: float = 1.0
    accel: float = 2.0
    dt: float = 0.1
    cost_threshold: float = 0.0
    discount: float = 0.997
    horizon: int = 200
    goal_bonus: float = 1.0
    total_interactions = 0

    def __post_init__(self):
        inside = lambda p, r=0.0: abs(p[0]) + r <= 1 and abs(p[1]) + r <= 1
        if not inside(self.goal_center, self.goal_radius):
            raise ValueError("goal disc outside arena")
        for hx, hy, hr in self.hazards:
            if not inside((hx, hy), hr):
                raise ValueError("hazard disc outside arena")
        self.pos = np.array(self.start_center, float)
        self.vel = np.zeros(2)
        self._t = 0

    @property
    def spec(self) -> CmdpSpec:
        return CmdpSpec(2 + self.lidar_bins, ActionSpace("box", dim=2),
                        self.cost_threshold, self.discount, self.horizon)

    def _goal_dist(self) -> float:
        return float(np.linalg.norm(np.asarray(self.goal_center) - self.pos))

    def in_hazard(self, pos=None) -> bool:
        p = self.pos if pos is None else pos
        return any(np.hypot(p[0] - hx, p[1] - hy) <= hr for hx, hy, hr in self.hazards)

    def lidar(self) -> np.ndarray:
        bins = np.zeros(self.lidar_bins)
        width = 2 * np.pi / self.lidar_bins
        for hx, hy, hr in self.hazards:
            d = np.array([hx, hy]) - self.pos
            dist = max(0.0, np.linalg.norm(d) - hr)
            k = int((np.arctan2(d[1], d[0]) % (2 * np.pi)) // width) % self.lidar_bins
            bins[k] = max(bins[k], np.clip(1.0 - dist / self.lidar_range, 0.0, 1.0))
        return bins

    def observe(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.goal_center) - self.pos, self.lidar()])

    def reset(self, seed: int | None = None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        while True:
            pos = np.asarray(self.start_center) + rng.uniform(-0.15, 0.15, 2)
            if not self.in_hazard(pos):
                break
        self.pos = pos
        self.vel = np.zeros(2)
        self._t = 0
        return self.observe()

    def step(self, action):
        a = np.asarray(action, float)
        if a.shape != (2,) or not np.all(np.isfinite(a)) or np.any(np.abs(a) > 1 + 1e-9):
            raise InvalidActionError(f"action {action!r} outside Box([-1, 1]^2)")
        PointGoalCmdp.total_interactions += 1
        before = self._goal_dist()
        self.vel = self.vel + self.accel * self.dt * np.clip(a, -1, 1)
        speed = np.linalg.norm(self.vel)
        if speed > self.max_speed:
            self.vel *= self.max_speed / speed
        self.pos = self.pos + self.dt * self.vel
        for i in range(2):
            if abs(self.pos[i]) > 1:
                self.pos[i] = np.clip(self.pos[i], -1, 1)
                self.vel[i] = 0.0
        self._t += 1
        after = self._goal_dist()
        self.reached_goal = after <= self.goal_radius
        reward = (before - after) + (self.goal_bonus if self.reached_goal else 0.0)
        cost = 1.0 if self.in_hazard() else 0.0
        terminal = self.reached_goal or self._t >= self.horizon
        return self.observe(), reward, cost, terminal


BEHAVIORS = ("random", "safe", "unsafe")


def behavior_action(kind: str, env, observation, rng: np.random.Generator, epsilon: float = 0.1):
    """Scripted data-collection policies.

    Gridworld: ``safe``/``unsafe`` are epsilon-greedy over the zero-cost and
    unconstrained optimal Q tables, breaking ties among optimal actions at
    random. Point-goal: ``unsafe`` steers straight at the goal, ``safe`` adds
    a repulsive field around hazards; ``epsilon`` is the Gaussian noise scale.
    """
    if kind not in BEHAVIORS:
        raise ValueError(f"unknown behavior {kind!r}")
    if isinstance(env, GridworldCmdp):
        if kind == "random" or rng.random() < epsilon:
            return int(rng.integers(4))
        q = env.oracle_policies[kind][env.state_index(observation)]
        if not np.isfinite(q.max()):  # infeasible state under the safe table
            q = env.oracle_policies["unsafe"][env.state_index(observation)]
        best = np.flatnonzero(q >= q.max() - 1e-9)
        return int(rng.choice(best))
    if isinstance(env, PointGoalCmdp):
        if kind == "random":
            return rng.uniform(-1, 1, 2)
        to_goal = np.asarray(env.goal_center) - env.pos
        a = 3.0 * to_goal - 1.5 * env.vel
        if kind == "safe":
            for hx, hy, hr in env.hazards:
                d = env.pos - np.array([hx, hy])
                gap = np.linalg.norm(d) - hr
                if gap < 0.3:
                    n = d / max(np.linalg.norm(d), 1e-9)
                    tangent = np.array([-n[1], n[0]])
                    if tangent @ to_goal < 0:
                        tangent = -tangent
                    push = (0.3 - gap) / 0.3
                    a = a + 4.0 * push * n + 3.0 * push * tangent
        a = a + epsilon * rng.standard_normal(2)
        return np.clip(a, -1, 1)
    raise TypeError(f"unsupported environment {type(env).__name__}")
