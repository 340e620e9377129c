"""Experiment configuration and its flat text format.

One ``key = value`` pair per line, ``#`` starts a comment. Hyperparameter
keys use the usual symbol names (``B``, ``T``, ``H``, ``l_wm``, ``beta``,
``nu``, ``mu_0``, ...). Unknown keys and malformed values are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


# Hyperparameter table names accepted as aliases of the symbol keys. "Learning
# rate" names two different symbols (l_wm, l_ac), so that bare name is refused.
TABLE_NAMES = {
    "N_l": "Number of latent",
    "C_l": "Classes per latent",
    "B": "Batch size",
    "T": "Batch length",
    "l_wm": "Learning rate",
    "beta": "Coefficient of KL-divergence",
    "H": "Generation horizon",
    "nu": "Penalty term",
    "mu_0": "Initial Penalty multiplier",
    "lambda_p_0": "Initial Lagrangian multiplier",
    "gamma": "Discount horizon",
    "lambda_r": "Reward lambda",
    "lambda_c": "Cost lambda",
    "tau": "Expectile",
    "beta_1": "AWR temperature",
    "beta_2": "AWR temperature",
    "gamma_u": "REF discount",
    "alpha": "PEX temperature",
    "eta": "Actor entropy regularize",
    "l_ac": "Learning rate",
    "mlp_layers": "Number of MLP layers",
    "mlp_units": "Number of MLP layer units",
}


def _aliases() -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for key, name in TABLE_NAMES.items():
        out.setdefault(name, []).append(key)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    # environment and data
    env: str = "hazard"  # hazard | shifted | open | pointgoal
    finetune_env: str = "shifted"
    slip: float = 0.0
    dataset: str = ""
    counts: str = "200,200,200"  # unsafe, safe, random trajectories
    behavior_epsilon: float = 0.1
    seed: int = 0
    # world model
    N_l: int = 8
    C_l: int = 8
    D_h: int = 128
    B: int = 64
    T: int = 16
    l_wm: float = 1e-4
    beta: float = 0.1
    H: int = 15
    free_bits: float = 1.0
    continue_head: bool = True
    # augmented Lagrangian
    nu: float = 5e-9
    mu_0: float = 1e-6
    lambda_p_0: float = 0.01
    # actor critic
    gamma: float = 0.997
    lambda_r: float = 0.95
    lambda_c: float = 0.95
    tau: float = 0.8
    tau_c: float = 0.8
    beta_1: float = 10.0
    beta_2: float = 10.0
    gamma_u: float = 0.99
    alpha: float = 10.0
    eta: float = 3e-4
    l_ac: float = 3e-5
    ref_lr_scale: float = 3.0
    ema_decay: float = 0.98
    w_max: float = 100.0
    standardize_advantages: bool = False
    td_bootstrap: str = "next"  # next | same
    cost_aware_selection: bool = False
    # networks (the full-scale setting is 5 layers of 512 units)
    mlp_layers: int = 2
    mlp_units: int = 64
    grad_clip: float = 100.0
    precision: str = "float64"  # float64 | float32
    # schedule
    N_offline: int = 20_000
    N_online: int = 200
    updates_per_episode: int = 16
    online_fraction: float = 0.0  # 0 samples the merged buffer uniformly
    eval_every: int = 10
    eval_episodes: int = 10
    log_every: int = 100

    def __post_init__(self):
        for name in ("l_wm", "l_ac", "beta_1", "beta_2", "alpha", "mu_0", "ema_decay", "w_max"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("gamma", "gamma_u"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in (0, 1)")
        for name in ("lambda_r", "lambda_c"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0 < self.tau < 1 or not 0 < self.tau_c < 1:
            raise ConfigError("expectiles must lie in (0, 1)")
        if self.nu < 0 or self.lambda_p_0 < 0 or self.eta < 0:
            raise ConfigError("nu, lambda_p_0 and eta must be >= 0")
        if min(self.B, self.T, self.N_l, self.C_l, self.D_h, self.mlp_units) < 1 or self.H < 0:
            raise ConfigError("sizes must be positive")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.td_bootstrap not in ("next", "same"):
            raise ConfigError(f"unknown td_bootstrap {self.td_bootstrap!r}")
        if not 0 <= self.online_fraction <= 1:
            raise ConfigError("online_fraction must lie in [0, 1]")
        self.count_tuple  # validates

    @property
    def count_tuple(self) -> tuple[int, int, int]:
        try:
            parts = tuple(int(x) for x in self.counts.split(","))
        except ValueError as err:
            raise ConfigError(f"counts must be three integers, got {self.counts!r}") from err
        if len(parts) != 3 or min(parts) < 0:
            raise ConfigError(f"counts must be three non-negative integers, got {self.counts!r}")
        return parts

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = ["# FOSP experiment configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            note = f"  # {TABLE_NAMES[f.name]}" if f.name in TABLE_NAMES else ""
            lines.append(f"{f.name} = {_format(v)}{note}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        aliases = _aliases()
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            targets = [key] if key in types else aliases.get(key, [])
            if not targets:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key == "Learning rate":
                raise ConfigError(f"line {lineno}: 'Learning rate' is ambiguous, use l_wm or l_ac")
            for target in targets:
                kw[target] = _parse(value, types[target], target, lineno)
        return cls(**kw)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode()).digest()


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(value: str, typ, key: str, lineno: int):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if value.lower() not in ("true", "false"):
                raise ValueError(value)
            return value.lower() == "true"
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value
    except ValueError as err:
        raise ConfigError(f"line {lineno}: bad value {value!r} for {key} ({typ})") from err


def desk_config(**overrides) -> ExperimentConfig:
    """Compact single-core setting used for the gridworld experiments.

    Smaller networks, batch and latent stack than the defaults, float32
    arithmetic, and learning rates raised tenfold so that 2e4 gradient steps
    suffice.
    """
    base = dict(D_h=32, N_l=4, C_l=8, mlp_units=32, mlp_layers=2, B=16, T=8, H=15,
                l_wm=1e-3, l_ac=3e-4, precision="float32")
    base.update(overrides)
    return ExperimentConfig(**base)
