"""Flat ``key = value`` run configuration.

One file configures a whole run. Lines are ``key = value``; ``#`` starts a
comment. Unknown keys and malformed values are rejected with the offending
line number before any compute starts.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


ENVS = ("coopnav", "rovertower")
REWARD_VARIANTS = ("repeated", "piecewise", "single", "single_active")
ABLATIONS = ("full", "no_graph_transformer")


@dataclass
class RunConfig:
    # environment
    env: str = "coopnav"
    n_agents: int = 3
    n_obstacles: int = 3
    world_size_km: float = 2.0
    episode_len: int = 125
    reward_variant: str = "single_active"
    collision_penalty: float = 5.0
    goal_radius: float | None = None  # metres; None means 0.05 * world size
    dist_scale: float = 1.0
    goal_bonus: float = 5.0
    post_goal_bonus: float = 0.5
    agent_radius: float = 25.0
    obstacle_radius: float = 25.0
    min_separation: float = 500.0
    # dynamics
    omega_n: float = 0.00113
    dt: float = 10.0
    u_mag: float = 0.1
    damping: float = 0.25
    # schedule and graph
    mu_train_lo: int = 1
    mu_train_hi: int = 5
    mu_eval_lo: int = 2
    mu_eval_hi: int = 6
    max_active: int = 0  # 0 means no cap on simultaneously acting agents
    comm_radius_frac: float = 0.25
    seed: int = 1
    # network
    hidden_size: int = 64
    n_heads: int = 3
    embed_dim: int = 8
    # optimisation
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    value_clip: float = 0.2
    huber_delta: float = 10.0
    grad_clip_norm: float = 10.0
    adam_eps: float = 1e-5
    weight_decay: float = 0.0
    learning_rate: float = 5e-4
    entropy_coef: float = 0.01
    value_coef: float = 1.0
    ppo_epochs: int = 10
    num_envs: int = 64
    buffer_len: int = 125
    chunk_len: int = 10
    minibatch_count: int = 1
    # run
    run_dir: str = "runs/default"
    total_env_steps: int = 2_000_000
    eval_episodes: int = 100
    ckpt_interval: int = 10
    ablation: str = "full"

    @property
    def world_size_m(self) -> float:
        return self.world_size_km * 1000.0

    @property
    def delta(self) -> float:
        """Goal radius in metres."""
        if self.goal_radius is None:
            return 0.05 * self.world_size_m
        return self.goal_radius

    @property
    def comm_radius(self) -> float:
        return self.comm_radius_frac * self.world_size_m

    def replace(self, **kw) -> "RunConfig":
        cfg = dataclasses.replace(self, **kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.env in ENVS, f"env must be one of {ENVS}")
        need(self.reward_variant in REWARD_VARIANTS, f"reward_variant must be one of {REWARD_VARIANTS}")
        need(self.ablation in ABLATIONS, f"ablation must be one of {ABLATIONS}")
        need(self.n_agents >= 1, "n_agents must be >= 1")
        need(self.n_obstacles >= 0, "n_obstacles must be >= 0")
        need(self.world_size_km > 0, "world_size_km must be positive")
        need(self.episode_len >= 1, "episode_len must be >= 1")
        need(self.buffer_len == self.episode_len, "buffer_len must equal episode_len (one episode per rollout)")
        need(1 <= self.mu_train_lo <= self.mu_train_hi, "need 1 <= mu_train_lo <= mu_train_hi")
        need(1 <= self.mu_eval_lo <= self.mu_eval_hi, "need 1 <= mu_eval_lo <= mu_eval_hi")
        need(self.max_active >= 0, "max_active must be >= 0")
        need(self.goal_bonus > self.post_goal_bonus >= 0, "need goal_bonus > post_goal_bonus >= 0")
        need(self.collision_penalty >= 0, "collision_penalty must be >= 0")
        need(self.goal_radius is None or self.goal_radius > 0, "goal_radius must be positive")
        need(self.comm_radius_frac > 0, "comm_radius_frac must be positive")
        need(self.dt > 0 and self.omega_n >= 0 and self.u_mag >= 0, "need dt > 0, omega_n >= 0, u_mag >= 0")
        need(0 <= self.damping < 1, "damping must lie in [0, 1)")
        need(0 < self.gamma <= 1, "gamma must lie in (0, 1]")
        need(0 <= self.gae_lambda <= 1, "gae_lambda must lie in [0, 1]")
        need(self.hidden_size >= 1 and self.n_heads >= 1 and self.embed_dim >= 1, "network sizes must be >= 1")
        need(self.num_envs >= 1 and self.chunk_len >= 1 and self.minibatch_count >= 1, "num_envs, chunk_len, minibatch_count must be >= 1")
        need(self.ppo_epochs >= 1, "ppo_epochs must be >= 1")
        need(self.total_env_steps >= 0 and self.eval_episodes >= 0, "step and episode budgets must be >= 0")
        need(self.ckpt_interval >= 1, "ckpt_interval must be >= 1")
        need(self.learning_rate > 0 and self.adam_eps > 0, "learning_rate and adam_eps must be positive")
        if self.env == "rovertower":
            need(self.n_obstacles == 0, "rovertower has no obstacles; set n_obstacles = 0")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    f = _FIELDS[name]
    typ = f.type
    if raw.lower() in ("none", "auto") and "None" in str(typ):
        return None
    if typ in ("int",):
        return int(raw.replace("_", ""))
    if typ in ("float", "float | None"):
        return float(raw)
    if typ in ("bool",):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    lines = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _coerce(key, raw)
            lines[key] = lineno
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    cfg = RunConfig(**values)
    try:
        cfg.validate()
    except ConfigError as exc:
        # point at the first offending key that was set in the file
        hits = [lines[k] for k in lines if re.search(rf"\b{k}\b", str(exc))]
        where = f"{source}:{min(hits)}" if hits else source
        raise ConfigError(f"{where}: {exc}") from None
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from None
    return parse_config(text, source=str(path))
