"""Trajectory storage, the behavior-mixture dataset and sequence batching.

Record convention: step ``t`` holds observation ``x_t``, the action taken at
``x_t`` (a zero placeholder on a trajectory's last record), and the reward and
cost received on *arriving* at ``x_t`` (zero on the first record).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from fosp import envs

DATA_MAGIC = b"FOSPDATA"
DATA_VERSION = 1
# tag byte per trajectory; the tuple form of ``counts`` follows this order
BEHAVIOR_TAGS = {"unsafe": 0, "safe": 1, "random": 2}
ONLINE_TAG = 255

_FIRST, _TERMINAL = 1, 2


class DataFormatError(ValueError):
    """Malformed trajectory file."""


class SamplingError(ValueError):
    pass


@dataclass
class Trajectory:
    observations: np.ndarray  # (L, obs_dim)
    actions: np.ndarray  # (L,) int for discrete, (L, act_dim) for box
    rewards: np.ndarray  # (L,)
    costs: np.ndarray  # (L,)
    is_first: np.ndarray  # (L,) bool
    is_terminal: np.ndarray  # (L,) bool
    tag: int = ONLINE_TAG

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def reward_return(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def cost_return(self) -> float:
        return float(np.sum(self.costs))


def rollout(env, policy, seed: int, tag: int = ONLINE_TAG) -> Trajectory:
    """Run one episode; ``policy(observation) -> action``."""
    obs = env.reset(seed)
    xs, acts, rs, cs, terms = [obs], [], [0.0], [0.0], [False]
    done = False
    while not done:
        a = policy(obs)
        obs, r, c, done = env.step(a)
        acts.append(a)
        xs.append(obs)
        rs.append(r)
        cs.append(c)
        terms.append(bool(getattr(env, "reached_goal", False)))
    return make_trajectory(env.spec.action_space, xs, acts, rs, cs, terms, tag)


def make_trajectory(space: envs.ActionSpace, xs, acts, rs, cs, terms, tag=ONLINE_TAG) -> Trajectory:
    L = len(xs)
    if space.kind == "discrete":
        actions = np.zeros(L, np.int64)
        actions[:L - 1] = np.asarray(acts, np.int64)
    else:
        actions = np.zeros((L, space.dim))
        if L > 1:
            actions[:L - 1] = np.asarray(acts, float)
    first = np.zeros(L, bool)
    first[0] = True
    return Trajectory(np.asarray(xs, float), actions, np.asarray(rs, float), np.asarray(cs, float),
                      first, np.asarray(terms, bool), tag)


def pad_terminal(traj: Trajectory, length: int) -> Trajectory:
    """Extend a terminated trajectory to ``length`` records with absorbing steps.

    Appended records repeat the final observation with zero reward and cost
    and ``is_terminal`` set, the tabular convention for the goal. Training
    masks transitions that start at a terminal record, so the placeholder
    actions never enter a loss. Truncated (non-terminal) or long enough
    trajectories are returned unchanged.
    """
    L = len(traj)
    if L >= length or L == 0 or not traj.is_terminal[-1]:
        return traj
    k = length - L
    rep = lambda arr: np.concatenate([arr, np.repeat(arr[-1:], k, axis=0)])
    zeros = lambda arr: np.concatenate([arr, np.zeros((k,) + arr.shape[1:], arr.dtype)])
    return Trajectory(rep(traj.observations), zeros(traj.actions), zeros(traj.rewards), zeros(traj.costs),
                      np.concatenate([traj.is_first, np.zeros(k, bool)]),
                      np.concatenate([traj.is_terminal, np.ones(k, bool)]), traj.tag)


@dataclass
class TrajectoryFile:
    obs_dim: int
    act_dim: int  # number of actions for discrete, vector width for box
    action_kind: str  # "discrete" | "box"
    trajectories: list[Trajectory] = field(default_factory=list)

    @property
    def tags(self) -> list[int]:
        return [t.tag for t in self.trajectories]

    def to_bytes(self) -> bytes:
        kind = 0 if self.action_kind == "discrete" else 1
        out = bytearray(DATA_MAGIC)
        out += struct.pack("<HIIBI", DATA_VERSION, self.obs_dim, self.act_dim, kind,
                           len(self.trajectories))
        width = 1 if kind == 0 else self.act_dim
        for tr in self.trajectories:
            L = len(tr)
            if not tr.is_first[0]:
                raise DataFormatError("trajectory does not start with is_first")
            if tr.observations.shape != (L, self.obs_dim):
                raise DataFormatError("observation width does not match header")
            out += struct.pack("<IB", L, tr.tag)
            rec = np.zeros((L, self.obs_dim + width + 2), "<f4")
            rec[:, :self.obs_dim] = tr.observations
            rec[:, self.obs_dim:self.obs_dim + width] = np.asarray(tr.actions, float).reshape(L, width)
            rec[:, -2] = tr.rewards
            rec[:, -1] = tr.costs
            flags = (tr.is_first * _FIRST | tr.is_terminal * _TERMINAL).astype(np.uint8)
            for row, fl in zip(rec, flags):
                out += row.tobytes() + bytes([fl])
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TrajectoryFile":
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(data):
                raise DataFormatError(f"truncated trajectory file reading {what} at offset {pos}")
            chunk = data[pos:pos + n]
            pos += n
            return chunk

        if take(8, "magic") != DATA_MAGIC:
            raise DataFormatError("bad magic bytes (not a FOSPDATA file)")
        version, obs_dim, act_dim, kind, count = struct.unpack("<HIIBI", take(15, "header"))
        if version != DATA_VERSION:
            raise DataFormatError(f"unsupported data version {version}")
        if kind not in (0, 1):
            raise DataFormatError(f"bad action-kind flag {kind}")
        width = 1 if kind == 0 else act_dim
        rec_bytes = 4 * (obs_dim + width + 2) + 1
        out = cls(obs_dim, act_dim, "discrete" if kind == 0 else "box")
        for _ in range(count):
            L, tag = struct.unpack("<IB", take(5, "trajectory header"))
            raw = np.frombuffer(take(L * rec_bytes, "step records"), np.uint8).reshape(L, rec_bytes)
            vals = raw[:, :-1].copy().view("<f4").astype(np.float64)
            flags = raw[:, -1]
            acts = vals[:, obs_dim:obs_dim + width]
            actions = acts[:, 0].astype(np.int64) if kind == 0 else acts
            tr = Trajectory(vals[:, :obs_dim], actions, vals[:, -2], vals[:, -1],
                            (flags & _FIRST) > 0, (flags & _TERMINAL) > 0, tag)
            if L == 0 or not tr.is_first[0]:
                raise DataFormatError(f"trajectory ending at offset {pos} does not start with is_first")
            out.trajectories.append(tr)
        if pos != len(data):
            raise DataFormatError(f"trailing bytes after offset {pos}")
        return out

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TrajectoryFile":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def empty_file(env) -> TrajectoryFile:
    space = env.spec.action_space
    return TrajectoryFile(env.spec.obs_dim, space.n if space.kind == "discrete" else space.dim,
                          space.kind)


def generate_dataset(env, counts, seed: int, epsilon: float = 0.1) -> TrajectoryFile:
    """Behavior-mixture dataset.

    ``counts`` is ``{"unsafe": n, "safe": n, "random": n}`` or a tuple in that
    order. Trajectories are generated behavior by behavior and tagged.
    """
    if not isinstance(counts, dict):
        counts = dict(zip(BEHAVIOR_TAGS, counts))
    if any(n < 0 for n in counts.values()):
        raise ValueError("counts must be >= 0")
    if isinstance(env, envs.GridworldCmdp) and any(counts.get(k, 0) for k in ("safe", "unsafe")):
        env.oracle_policies  # raises InfeasibleError on a grid with no zero-cost policy
    rng = np.random.default_rng(seed)
    out = empty_file(env)
    for kind, tag in BEHAVIOR_TAGS.items():
        for _ in range(counts.get(kind, 0)):
            policy = lambda obs, k=kind: envs.behavior_action(k, env, obs, rng, epsilon)
            out.trajectories.append(rollout(env, policy, int(rng.integers(2**31)), tag))
    return out


class ReplayBuffer:
    """FIFO trajectory store shared by the offline and online phases."""

    def __init__(self, trajectories=(), capacity: int = 100_000):
        self.capacity = capacity
        self.trajectories: list[Trajectory] = []
        self.inserted = 0
        for tr in trajectories:
            self.add(tr)

    def add(self, trajectory: Trajectory) -> None:
        self.trajectories.append(trajectory)
        self.inserted += 1
        if len(self.trajectories) > self.capacity:
            self.trajectories.pop(0)

    def __len__(self) -> int:
        return len(self.trajectories)


def sample_batch(buffer, B: int, T: int, rng: np.random.Generator) -> dict:
    """``B`` contiguous length-``T`` segments, never crossing trajectories.

    A trajectory is drawn uniformly among those of length >= ``T`` (keeping the
    behavior mixture intact), then a start offset uniformly among its valid
    ones. ``action_valid`` is false on a trajectory's last record.
    """
    trajs = buffer.trajectories if isinstance(buffer, (ReplayBuffer, TrajectoryFile)) else buffer
    eligible = [i for i, tr in enumerate(trajs) if len(tr) >= T]
    if not eligible:
        raise SamplingError(f"no trajectory has length >= T={T}")
    picks = rng.integers(len(eligible), size=B)
    idx = np.asarray(eligible)[picks]
    offsets = np.array([rng.integers(len(trajs[i]) - T + 1) for i in idx])
    sl = lambda arr, i, o: arr[o:o + T]
    get = lambda name: np.stack([sl(getattr(trajs[i], name), i, o) for i, o in zip(idx, offsets)])
    valid = np.stack([np.arange(o, o + T) < len(trajs[i]) - 1 for i, o in zip(idx, offsets)])
    return {
        "obs": get("observations"),
        "action": get("actions"),
        "reward": get("rewards"),
        "cost": get("costs"),
        "is_first": get("is_first"),
        "is_terminal": get("is_terminal"),
        "action_valid": valid,
        "traj_index": idx,
        "offset": offsets,
    }
