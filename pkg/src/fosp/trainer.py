"""Offline training, offline-to-online fine-tuning and evaluation.

One gradient step updates, in order: the world model, then (on imagined
rollouts from the posterior states of the batch) the lambda-returns, the
state values, the critics, the policy and the reach-violation estimator.
"""

from __future__ import annotations

import functools
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from fosp import actor as actor_mod
from fosp import approx, datastore, envs, expansion, safety
from fosp.config import ConfigError, ExperimentConfig
from fosp.valuecrit import CriticBundle, CriticConfig, cost_bins, reward_bins
from fosp.worldmodel import WorldModel, WorldModelConfig, sample_latent

sg = jax.lax.stop_gradient
log = logging.getLogger("fosp")

UPDATE_SEQUENCE = ("model", "imagine", "td_lambda", "value", "critic", "policy", "ref")


class NumericalAbort(FloatingPointError):
    """A training loss went non-finite; carries the component breakdown."""

    def __init__(self, message: str, components: dict):
        super().__init__(message)
        self.components = components


def configure_logging() -> None:
    level = os.environ.get("FOSP_LOG_LEVEL", "info").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "INFO"
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(getattr(logging, level))


def make_env(name: str, slip: float = 0.0):
    if name in envs.GRIDWORLDS:
        return envs.GRIDWORLDS[name](slip_probability=slip)
    if name == "open":
        return envs.open_grid(slip_probability=slip)
    if name == "pointgoal":
        return envs.PointGoalCmdp()
    raise ConfigError(f"unknown environment {name!r}")


def to_env_action(space: envs.ActionSpace, action):
    if space.kind == "discrete":
        return int(action)
    return np.asarray(action, np.float64).reshape(space.dim)


# --------------------------------------------------------------------------- agent


class Agent:
    """All network specs plus the jitted update and acting functions."""

    def __init__(self, cfg: ExperimentConfig, obs_dim: int, space: envs.ActionSpace, bins_r):
        self.cfg = cfg
        self.space = space
        self.obs_dim = obs_dim
        self.dtype = jnp.float64 if cfg.precision == "float64" else jnp.float32
        self.wm = WorldModel(WorldModelConfig(
            obs_dim, space, deter=cfg.D_h, latents=cfg.N_l, classes=cfg.C_l,
            hidden_units=cfg.mlp_units, hidden_layers=cfg.mlp_layers, kl_scale=cfg.beta,
            free_bits=cfg.free_bits, continue_head=cfg.continue_head))
        S = self.wm.cfg.state_dim
        self.actor = actor_mod.PolicyHead(S, space, cfg.mlp_units, cfg.mlp_layers)
        self.critics = CriticBundle(CriticConfig(
            S, space.size, tuple(float(b) for b in bins_r), tuple(cost_bins(cfg.H)),
            cfg.mlp_units, cfg.mlp_layers, cfg.gamma, cfg.lambda_r, cfg.lambda_c, cfg.tau,
            cfg.tau_c, cfg.ema_decay, cfg.td_bootstrap))
        self.ref_spec = safety.ref_network_spec(S, cfg.mlp_units, cfg.mlp_layers)
        self.last_trace: list[str] = []
        self._train = {
            False: jax.jit(functools.partial(self._train_step, online=False)),
            True: jax.jit(functools.partial(self._train_step, online=True)),
        }
        self._act = jax.jit(self._act_step, static_argnames="mode")
        self._propose = jax.jit(self._propose_step, static_argnames="mode")

    # -- state -----------------------------------------------------------

    def init_state(self, seed: int) -> dict:
        cfg, dt = self.cfg, self.dtype
        k = jax.random.split(jax.random.PRNGKey(seed), 4)
        crit = self.critics.init(k[2], dt)
        params = {
            "wm": self.wm.init(k[0], dt),
            "actor": self.actor.init(k[1], dt),
            "critic": crit,
            "ref": approx.init_params(self.ref_spec, k[3], dt),
        }
        opt = {
            "wm": approx.adam_init(params["wm"], cfg.l_wm),
            "actor": approx.adam_init(params["actor"], cfg.l_ac),
            "q": approx.adam_init({"qr": crit["qr"], "qc": crit["qc"]}, cfg.l_ac),
            "v": approx.adam_init({"vr": crit["vr"], "vc": crit["vc"]}, cfg.l_ac),
            "ref": approx.adam_init(params["ref"], cfg.ref_lr_scale * cfg.l_ac),
        }
        lag = safety.lagrangian_init(cfg.lambda_p_0, cfg.mu_0, cfg.nu)
        return {"params": params, "opt": opt, "lag": lag, "step": 0}

    def prepare_batch(self, b: dict) -> dict:
        """Numpy batch (batch-major) -> time-major arrays in the working dtype."""
        dt = self.dtype
        tm = lambda x: jnp.asarray(np.swapaxes(x, 0, 1))
        valid = b["action_valid"]
        if self.space.kind == "discrete":
            av = np.eye(self.space.n)[b["action"]] * valid[..., None]
        else:
            av = b["action"] * valid[..., None]
        return {
            "obs": tm(b["obs"]).astype(dt),
            "act_vec": tm(av).astype(dt),
            "reward": tm(b["reward"]).astype(dt),
            "cost": tm(b["cost"]).astype(dt),
            "is_first": tm(b["is_first"]),
            "is_terminal": tm(b["is_terminal"]),
            "action_valid": tm(valid),
        }

    # -- update ----------------------------------------------------------

    def _mark(self, name: str) -> None:
        self.last_trace.append(name)

    @staticmethod
    def transitions(s, batch) -> dict:
        """Dataset transitions ``(s_t, a_t) -> s_{t+1}`` flattened over time and batch."""
        flat = lambda x: x.reshape((-1,) + x.shape[2:])
        mask = batch["action_valid"][:-1] & ~batch["is_first"][1:] & ~batch["is_terminal"][:-1]
        return {
            "s": flat(s[:-1]),
            "a_vec": flat(batch["act_vec"][:-1]),
            "s_next": flat(s[1:]),
            "reward": flat(batch["reward"][1:]),
            "cost": flat(batch["cost"][1:]),
            "not_terminal": flat(1.0 - batch["is_terminal"][1:].astype(s.dtype)),
            "mask": flat(mask.astype(s.dtype)),
        }

    def _train_step(self, state, batch, key, online: bool):
        cfg = self.cfg
        self.last_trace = []
        p, opt, lag = state["params"], state["opt"], state["lag"]
        keys = jax.random.split(key, 3)
        metrics = {}
        step = functools.partial(approx.optimizer_step, clip_norm=cfg.grad_clip)

        # world model
        (wm_loss, (comps, post)), g = jax.value_and_grad(self.wm.model_loss, has_aux=True)(
            p["wm"], batch, keys[0])
        wm_p, wm_opt = step(p["wm"], g, opt["wm"])
        metrics.update({"model_loss": wm_loss, **comps})
        self._mark("model")

        # imagination from every posterior state of the batch
        s_post = sg(post["s"])
        h0 = sg(post["h"]).reshape(-1, self.wm.cfg.deter)
        z0 = sg(post["z"]).reshape(-1, self.wm.cfg.stoch)
        actor_p = p["actor"]
        roll = self.wm.imagine(wm_p, lambda s, k: self.actor.sample(actor_p, s, k), h0, z0, cfg.H, keys[1])
        roll = jax.tree_util.tree_map(sg, roll)
        weight = jnp.cumprod(roll["cont"][:-1], 0)
        self._mark("imagine")

        crit = p["critic"]
        ret_r = self.critics.lambda_returns(crit, "reward", roll, roll["reward"])
        ret_c = self.critics.lambda_returns(crit, "cost", roll, roll["cost"])
        self._mark("td_lambda")

        data = self.transitions(s_post, batch)
        mask = data["mask"]

        def v_loss(vp):
            c = {**crit, **vp}
            return (self.critics.value_loss(c, "reward", data["s"], data["a_vec"], mask)
                    + self.critics.value_loss(c, "cost", data["s"], data["a_vec"], mask))

        vl, g = jax.value_and_grad(v_loss)({"vr": crit["vr"], "vc": crit["vc"]})
        vp, v_opt = step({"vr": crit["vr"], "vc": crit["vc"]}, g, opt["v"])
        crit = {**crit, **vp}
        metrics["value_loss"] = vl
        self._mark("value")

        data_r = {**data, "signal": data["reward"]}
        data_c = {**data, "signal": data["cost"]}

        def q_loss(qp):
            c = {**crit, **qp}
            lr, _ = self.critics.critic_loss(c, "reward", roll, ret_r, weight, data_r)
            lc, _ = self.critics.critic_loss(c, "cost", roll, ret_c, weight, data_c)
            return lr + lc, (lr, lc)

        (ql, (qlr, qlc)), g = jax.value_and_grad(q_loss, has_aux=True)({"qr": crit["qr"], "qc": crit["qc"]})
        qp, q_opt = step({"qr": crit["qr"], "qc": crit["qc"]}, g, opt["q"])
        crit = self.critics.update_targets({**crit, **qp})
        metrics.update({"critic_loss_reward": qlr, "critic_loss_cost": qlc})
        self._mark("critic")

        # policy
        flat_post = s_post.reshape(-1, s_post.shape[-1])
        v_c = jnp.mean(self.critics.value(crit, "cost", flat_post))
        psi, lag_next = safety.lagrangian_update(lag, v_c)
        if online:
            s_pi, a_pi = roll["states"][:-1], roll["action_vec"]
            a_r, a_c = self.critics.advantages(crit, s_pi, a_pi)
            u = 1.0 - safety.ref_value(self.ref_spec, p["ref"], s_pi)
            w = actor_mod.online_weight(u, a_r, a_c, cfg.beta_1, cfg.beta_2)
            clipped = jnp.zeros_like(w, bool)

            def pi_loss(ap):
                logp = self.actor.log_prob_vec(ap, s_pi, a_pi)
                ent = self.actor.entropy(ap, s_pi)
                return actor_mod.online_policy_loss(logp, ent, w, u, psi, cfg.eta, weight), ent
        else:
            s_pi, a_pi = data["s"], data["a_vec"]
            a_r, a_c = self.critics.advantages(crit, s_pi, a_pi)
            u = 1.0 - safety.ref_value(self.ref_spec, p["ref"], s_pi)
            if cfg.standardize_advantages:
                a_r, a_c = actor_mod.standardize(a_r, mask), actor_mod.standardize(a_c, mask)
            w, clipped = actor_mod.offline_weight(u, a_r, a_c, cfg.beta_1, cfg.beta_2, cfg.w_max,
                                                  return_clipped=True)

            def pi_loss(ap):
                logp = self.actor.log_prob_vec(ap, s_pi, a_pi)
                ent = self.actor.entropy(ap, s_pi)
                return actor_mod.offline_policy_loss(logp, ent, w, u, psi, cfg.eta, mask), ent

        (pl, ent), g = jax.value_and_grad(pi_loss, has_aux=True)(p["actor"])
        actor_p, actor_opt = step(p["actor"], g, opt["actor"])
        metrics.update({"policy_loss": pl, "entropy": jnp.mean(ent), "w_mean": jnp.mean(w),
                        "w_max": jnp.max(w), "w_clip_rate": jnp.mean(clipped.astype(w.dtype)),
                        "psi": psi, "v_c": v_c, "u_feasible": jnp.mean(u)})
        self._mark("policy")

        # reach-violation estimator
        viol = safety.violation_indicator(self.wm.cost_prob(wm_p, roll["states"]))
        rl, g = jax.value_and_grad(
            lambda rp: safety.ref_loss(self.ref_spec, rp, roll, viol, cfg.gamma_u))(p["ref"])
        ref_p, ref_opt = step(p["ref"], g, opt["ref"])
        metrics["ref_loss"] = rl
        self._mark("ref")

        metrics.update({"lambda_p": lag_next.lam, "mu": lag_next.mu,
                        "imagined_cost": jnp.mean(jnp.sum(roll["cost"] * weight, 0))})
        new_state = {
            "params": {"wm": wm_p, "actor": actor_p, "critic": crit, "ref": ref_p},
            "opt": {"wm": wm_opt, "actor": actor_opt, "q": q_opt, "v": v_opt, "ref": ref_opt},
            "lag": lag_next,
            "step": state["step"] + 1,
        }
        return new_state, metrics

    def train_step(self, state, batch, key, online: bool = False):
        """One jitted update; raises ``NumericalAbort`` on any non-finite metric."""
        new_state, metrics = self._train[online](state, batch, key)
        metrics = {k: float(v) for k, v in metrics.items()}
        bad = {k: v for k, v in metrics.items() if not np.isfinite(v)}
        if bad:
            raise NumericalAbort(f"non-finite training quantities: {sorted(bad)}", metrics)
        return new_state, metrics

    # -- acting ----------------------------------------------------------

    def _act_step(self, actor_p, wm_p, h, z, prev_a, obs, first, key, mode: bool = True):
        k1, k2 = jax.random.split(key)
        h = jnp.where(first, jnp.zeros_like(h), self.wm.sequence_step(wm_p, h, z, prev_a))
        zt, _ = sample_latent(self.wm.posterior(wm_p, h, obs[None]), k1, straight_through=False, mode=mode)
        z = zt.reshape(1, -1)
        s = self.wm.state(h, z)
        a_vec, a = self.actor.sample(actor_p, s, k2, mode)
        return a_vec, a, h, z

    def policy(self, actor_p, wm_p, seed: int = 0, mode: bool = True) -> "LatentPolicy":
        return LatentPolicy(self, actor_p, wm_p, seed, mode)

    def _propose_step(self, beta, psi, crit, lam, dual, obs, prev_a, key, mode: bool = False):
        a_b, a_p, s_b, s_p, dual = expansion.propose_actions(
            self.wm, self.actor, beta, psi, dual, obs.astype(self.dtype), prev_a, key, mode)
        q = jnp.stack([self.critics.q_mean(crit, "reward", s_p, a_b[0])[0],
                       self.critics.q_mean(crit, "reward", s_p, a_p[0])[0]])
        if self.cfg.cost_aware_selection:
            q = q - lam * jnp.stack([self.critics.q_mean(crit, "cost", s_p, a_b[0])[0],
                                     self.critics.q_mean(crit, "cost", s_p, a_p[0])[0]])
        return a_b, a_p, q, dual

    # -- checkpoints -----------------------------------------------------

    def state_segments(self, state, extra: dict | None = None) -> dict:
        opt = {k: {"m": o.first_moment, "v": o.second_moment, "count": o.step_count, "lr": o.learning_rate}
               for k, o in state["opt"].items()}
        lag = state["lag"]
        tree = {
            "params": state["params"],
            "opt": opt,
            "lag": {"lam": lag.lam, "mu": lag.mu, "nu": np.float64(lag.nu), "step": lag.step},
            "meta": {
                "step": np.float64(state["step"]),
                "reward_bins": np.asarray(self.critics.bins["reward"]),
                "config": np.frombuffer(self.cfg.to_text().encode(), np.uint8).astype(np.float64),
                "config_digest": np.frombuffer(self.cfg.digest(), np.uint8).astype(np.float64),
            },
        }
        if extra:
            tree.update(extra)
        return approx.flatten_tree(tree)

    def state_from_segments(self, seg: dict) -> dict:
        dt = self.dtype
        tree = approx.unflatten_tree(seg)
        cast = lambda t: jax.tree_util.tree_map(lambda x: jnp.asarray(x, dt), t)
        opt = {k: approx.OptimizerState(cast(o["m"]), cast(o["v"]), jnp.asarray(o["count"], jnp.int64),
                                        jnp.asarray(o["lr"], jnp.float64))
               for k, o in tree["opt"].items()}
        lag = safety.LagrangianState(jnp.asarray(tree["lag"]["lam"]), jnp.asarray(tree["lag"]["mu"]),
                                     float(tree["lag"]["nu"]), jnp.asarray(tree["lag"]["step"], jnp.int64))
        return {"params": cast(tree["params"]), "opt": opt, "lag": lag, "step": int(tree["meta"]["step"])}


def config_from_segments(seg: dict) -> ExperimentConfig:
    return ExperimentConfig.from_text(bytes(seg["meta/config"].astype(np.uint8)).decode())


class LatentPolicy:
    """Stateful acting wrapper: filters observations through the world model."""

    def __init__(self, agent: Agent, actor_p, wm_p, seed: int = 0, mode: bool = True):
        self.agent, self.actor_p, self.wm_p, self.mode = agent, actor_p, wm_p, mode
        self.key = jax.random.PRNGKey(seed)
        self.reset()

    def reset(self) -> None:
        wm = self.agent.wm.cfg
        dt = self.agent.dtype
        self.h = jnp.zeros((1, wm.deter), dt)
        self.z = jnp.zeros((1, wm.stoch), dt)
        self.prev = jnp.zeros((1, self.agent.space.size), dt)
        self.first = True

    def __call__(self, obs):
        self.key, k = jax.random.split(self.key)
        a_vec, a, self.h, self.z = self.agent._act(
            self.actor_p, self.wm_p, self.h, self.z, self.prev, jnp.asarray(obs, self.agent.dtype),
            self.first, k, mode=self.mode)
        self.prev = a_vec
        self.first = False
        return to_env_action(self.agent.space, np.asarray(a)[0])


def run_episodes(env, policy, episodes: int, seed: int):
    """Mean reward, mean cost and cost regret; ``policy.reset()`` per episode."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rng = np.random.default_rng(seed)
    rewards, costs = [], []
    for _ in range(episodes):
        policy.reset()
        obs = env.reset(int(rng.integers(2**31)))
        R = C = 0.0
        done = False
        while not done:
            obs, r, c, done = env.step(policy(obs))
            R += r
            C += c
        rewards.append(R)
        costs.append(C)
    running = np.cumsum(costs) / np.arange(1, episodes + 1)
    return float(np.mean(rewards)), float(np.mean(costs)), float(running[-1])


# --------------------------------------------------------------------------- metrics


class MetricsWriter:
    """Append-only JSON-lines file; the sole writer of its path."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# --------------------------------------------------------------------------- phases


def load_dataset(cfg: ExperimentConfig, path) -> datastore.TrajectoryFile:
    if not path:
        raise ConfigError("a dataset is required (--dataset PATH)")
    if not Path(path).exists():
        raise ConfigError(f"--dataset path does not exist: {path}")
    data = datastore.TrajectoryFile.load(path)
    env = make_env(cfg.env, cfg.slip)
    space = env.spec.action_space
    width = space.n if space.kind == "discrete" else space.dim
    if data.obs_dim != env.spec.obs_dim or data.act_dim != width or data.action_kind != space.kind:
        raise ConfigError("dataset dimensions do not match the configured environment")
    return data


def generate(cfg: ExperimentConfig, out) -> datastore.TrajectoryFile:
    env = make_env(cfg.env, cfg.slip)
    data = datastore.generate_dataset(env, cfg.count_tuple, cfg.seed, cfg.behavior_epsilon)
    data.save(out)
    return data


@dataclass
class OfflineResult:
    agent: Agent
    state: dict
    metrics: list = field(default_factory=list)
    evaluation: tuple | None = None


def train_offline(cfg: ExperimentConfig, data: datastore.TrajectoryFile, out_dir=None,
                  evaluate_env: bool = True) -> OfflineResult:
    """Offline phase: gradient steps on the static dataset only."""
    env = make_env(cfg.env, cfg.slip)
    space = env.spec.action_space
    bins = reward_bins([t.reward_return for t in data.trajectories])
    agent = Agent(cfg, env.spec.obs_dim, space, bins)
    state = agent.init_state(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    key = jax.random.PRNGKey(cfg.seed + 1)
    writer = MetricsWriter(Path(out_dir) / "metrics.jsonl") if out_dir else None
    ckpt = Path(out_dir) / "offline.ckpt" if out_dir else None
    trajs = [datastore.pad_terminal(t, cfg.T) for t in data.trajectories]
    interactions_before = _interaction_count()
    records = []
    last_good = state
    try:
        for i in range(cfg.N_offline):
            batch = agent.prepare_batch(datastore.sample_batch(trajs, cfg.B, cfg.T, rng))
            state, m = agent.train_step(state, batch, jax.random.fold_in(key, i), online=False)
            if (i + 1) % cfg.log_every == 0 or i + 1 == cfg.N_offline:
                rec = {"phase": "offline", "step": i + 1, **m}
                records.append(rec)
                if writer:
                    writer.write(rec)
                log.info("offline step %d model %.3f policy %.3f lambda_p %.4g", i + 1,
                         m["model_loss"], m["policy_loss"], m["lambda_p"])
            last_good = state
    except NumericalAbort:
        if ckpt:
            approx.save_checkpoint(ckpt, agent.state_segments(last_good))
        if writer:
            writer.close()
        raise
    if _interaction_count() != interactions_before:
        raise RuntimeError("offline phase interacted with the environment")
    result = OfflineResult(agent, state, records)
    if evaluate_env:
        pol = agent.policy(state["params"]["actor"], state["params"]["wm"], cfg.seed)
        result.evaluation = run_episodes(env, pol, cfg.eval_episodes, cfg.seed)
        rec = {"phase": "offline", "step": cfg.N_offline, "eval_reward": result.evaluation[0],
               "eval_cost": result.evaluation[1], "eval_cost_regret": result.evaluation[2]}
        records.append(rec)
        if writer:
            writer.write(rec)
    if ckpt:
        approx.save_checkpoint(ckpt, agent.state_segments(state))
    if writer:
        writer.close()
        _write_summary(Path(out_dir) / "summary.json", records)
    return result


def _interaction_count() -> int:
    return envs.GridworldCmdp.total_interactions + envs.PointGoalCmdp.total_interactions


def _write_summary(path, records) -> None:
    summary = {}
    for rec in records:
        summary.update(rec)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)


def restore(segments: dict, cfg: ExperimentConfig | None = None):
    """Rebuild the agent and training state stored in checkpoint segments."""
    stored = config_from_segments(segments)
    cfg = cfg or stored
    env = make_env(cfg.env, cfg.slip)
    agent = Agent(cfg, env.spec.obs_dim, env.spec.action_space, segments["meta/reward_bins"])
    return agent, agent.state_from_segments(segments)


@dataclass
class OnlineResult:
    agent: Agent
    state: dict
    pair: expansion.PolicyPair
    before: tuple
    after: tuple
    metrics: list = field(default_factory=list)
    cost_regret: float = 0.0


def finetune_online(cfg: ExperimentConfig, segments: dict, data: datastore.TrajectoryFile | None = None,
                    out_dir=None) -> OnlineResult:
    """Online phase on ``cfg.finetune_env`` starting from an offline checkpoint."""
    stored = config_from_segments(segments)
    if stored.env != cfg.env and make_env(stored.env).spec.obs_dim != make_env(cfg.env).spec.obs_dim:
        raise ConfigError("checkpoint environment does not match the configuration")
    agent, state = restore(segments, cfg)
    env = make_env(cfg.finetune_env, cfg.slip)
    if env.spec.obs_dim != agent.obs_dim or env.spec.action_space != agent.space:
        raise ConfigError("fine-tuning environment does not match the checkpoint")
    pair, params = expansion.transition_offline_to_online(state["params"], cfg.alpha)
    state = {**state, "params": params}
    buffer = datastore.ReplayBuffer([datastore.pad_terminal(t, cfg.T) for t in data.trajectories]
                                    if data is not None else ())
    offline_count = len(buffer)
    online_trajs: list = []
    rng = np.random.default_rng(cfg.seed + 7)
    key = jax.random.PRNGKey(cfg.seed + 11)
    writer = MetricsWriter(Path(out_dir) / "metrics_online.jsonl") if out_dir else None
    records: list = []

    def emit(rec):
        records.append(rec)
        if writer:
            writer.write(rec)

    def eval_pair(use_beta: bool):
        src = pair.beta if use_beta else state["params"]
        pol = agent.policy(src["actor"], src["wm"], cfg.seed)
        return run_episodes(make_env(cfg.finetune_env, cfg.slip), pol, cfg.eval_episodes, cfg.seed + 3)

    before = eval_pair(True)
    emit({"phase": "online", "episode": 0, "eval_reward": before[0], "eval_cost": before[1],
          "eval_cost_regret": before[2], "policy": "frozen"})
    costs = []
    space = agent.space
    for ep in range(cfg.N_online):
        dual = expansion.DualModelState.reset(agent.wm.cfg.deter, agent.wm.cfg.stoch, agent.dtype)
        prev = jnp.zeros((1, space.size), agent.dtype)
        obs = env.reset(int(rng.integers(2**31)))
        xs, acts, rs, cs, terms = [obs], [], [0.0], [0.0], [False]
        picks_beta = 0
        done = False
        t = 0
        psi_p = {"actor": state["params"]["actor"], "wm": state["params"]["wm"]}
        while not done:
            k = jax.random.fold_in(jax.random.fold_in(key, ep), t)
            a_b, a_p, q, dual = agent._propose(pair.beta, psi_p, state["params"]["critic"], state["lag"].lam,
                                               dual, jnp.asarray(obs), prev, k)
            idx, (a_vec, a) = expansion.select_action(float(q[0]), float(q[1]), cfg.alpha, rng,
                                                      actions=(a_b, a_p))
            picks_beta += idx == 0
            prev = a_vec
            act = to_env_action(space, np.asarray(a)[0])
            obs, r, c, done = env.step(act)
            acts.append(act)
            xs.append(obs)
            rs.append(r)
            cs.append(c)
            terms.append(bool(getattr(env, "reached_goal", False)))
            t += 1
        traj = datastore.pad_terminal(datastore.make_trajectory(space, xs, acts, rs, cs, terms), cfg.T)
        buffer.add(traj)
        online_trajs.append(traj)
        costs.append(traj.cost_return)
        rec = {"phase": "online", "episode": ep + 1, "episode_reward": traj.reward_return,
               "episode_cost": traj.cost_return, "cost_regret": float(np.mean(costs)),
               "selection_ratio": picks_beta / t}
        last_m = {}
        for j in range(cfg.updates_per_episode):
            trajs = _mixed_sample(buffer, online_trajs, cfg, rng)
            batch = agent.prepare_batch(trajs)
            kk = jax.random.fold_in(jax.random.fold_in(key, 10_000_000 + ep), j)
            state, last_m = agent.train_step(state, batch, kk, online=True)
        rec.update({k: v for k, v in last_m.items()})
        pair.verify()
        if (ep + 1) % cfg.eval_every == 0 or ep + 1 == cfg.N_online:
            ev = eval_pair(False)
            rec.update({"eval_reward": ev[0], "eval_cost": ev[1], "eval_cost_regret": ev[2]})
        emit(rec)
        log.info("online episode %d reward %.3f cost %.1f beta-picks %.2f", ep + 1, traj.reward_return,
                 traj.cost_return, picks_beta / t)
    after = eval_pair(False) if cfg.N_online > 0 else before
    emit({"phase": "online", "episode": cfg.N_online, "eval_reward": after[0], "eval_cost": after[1],
          "eval_cost_regret": after[2], "policy": "online", "offline_trajectories": offline_count})
    if out_dir:
        frozen = {"frozen": pair.beta}
        approx.save_checkpoint(Path(out_dir) / "online.ckpt", agent.state_segments(state, frozen))
        writer.close()
        _write_summary(Path(out_dir) / "summary_online.json", records)
    return OnlineResult(agent, state, pair, before, after, records,
                        float(np.mean(costs)) if costs else 0.0)


def _mixed_sample(buffer, online_trajs, cfg, rng):
    if cfg.online_fraction <= 0 or not online_trajs:
        return datastore.sample_batch(buffer, cfg.B, cfg.T, rng)
    n_on = int(round(cfg.B * cfg.online_fraction))
    eligible = [t for t in online_trajs if len(t) >= cfg.T]
    if n_on == 0 or not eligible:
        return datastore.sample_batch(buffer, cfg.B, cfg.T, rng)
    a = datastore.sample_batch(eligible, n_on, cfg.T, rng)
    b = datastore.sample_batch(buffer, cfg.B - n_on, cfg.T, rng) if cfg.B > n_on else None
    if b is None:
        return a
    return {k: np.concatenate([a[k], b[k]]) for k in a}


def world_model_fidelity(agent: Agent, wm_params, trajectories) -> dict:
    """One-step prediction accuracy of the cost indicator and the reward sign.

    Each trajectory is filtered with posterior modes up to step ``t``; the
    prediction for ``t + 1`` decodes the recurrent state after action ``a_t``
    together with the prior's mode latent, so the next observation is never
    seen. Trajectories are concatenated into one sequence; ``is_first``
    resets keep them independent and transitions into a new trajectory are
    skipped.
    """
    trajs = list(trajectories)
    if not trajs:
        raise ValueError("need at least one trajectory")
    wm, dt = agent.wm, agent.dtype
    cat = lambda name: np.concatenate([getattr(t, name) for t in trajs])
    actions = cat("actions")
    if agent.space.kind == "discrete":
        act_vec = np.eye(agent.space.n)[actions]
    else:
        act_vec = actions
    valid = np.concatenate([np.arange(len(t)) < len(t) - 1 for t in trajs])
    act_vec = act_vec * valid[:, None]
    obs = jnp.asarray(cat("observations")[:, None], dt)
    states = wm.observe(wm_params, obs, jnp.asarray(act_vec[:, None], dt), jnp.asarray(cat("is_first")[:, None]),
                        jax.random.PRNGKey(0), mode=True)
    h_next = states["h"][1:, 0]
    prior = wm.prior(wm_params, h_next)
    z_prior = jax.nn.one_hot(jnp.argmax(prior, -1), wm.cfg.classes, dtype=dt).reshape(h_next.shape[0], -1)
    dec = wm.decode(wm_params, wm.state(h_next, z_prior))
    keep = valid[:-1] & ~cat("is_first")[1:]
    cost_hat = np.asarray(jax.nn.sigmoid(dec["cost_logit"]) >= 0.5)[keep]
    reward_hat = np.asarray(dec["reward_mean"])[keep]
    cost, reward = cat("costs")[1:][keep], cat("rewards")[1:][keep]
    return {
        "cost_accuracy": float(np.mean(cost_hat == (cost >= 0.5))),
        "reward_sign_accuracy": float(np.mean(np.sign(reward_hat) == np.sign(reward))),
        "transitions": int(keep.sum()),
    }


def evaluate(segments: dict, env, episodes: int, seed: int, which: str = "auto"):
    """``(Reward, Cost, CostRegret)`` of a checkpoint's policy with mode actions.

    ``which="frozen"`` evaluates the frozen offline policy of an online
    checkpoint; ``"auto"`` uses the trained policy.
    """
    agent, state = restore(segments)
    if which == "frozen":
        tree = approx.unflatten_tree(segments)["frozen"]
        src = jax.tree_util.tree_map(lambda x: jnp.asarray(x, agent.dtype), tree)
    else:
        src = state["params"]
    pol = agent.policy(src["actor"], src["wm"], seed)
    return run_episodes(env, pol, episodes, seed)
