"""Cooperative Navigation (CW satellites) and Rover-Tower worlds.

Entity ids follow one ordering everywhere: decision-making agents first
(satellites, or rovers then towers), then obstacles, then goals. Positions are
metres in a frame centred on the world square; observations and rewards use
kilometres so that feature magnitudes stay O(1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .dynamics import OrbitalParams, action_decode, cw_step_batch, mpe_step_batch, N_ACTIONS

KINDS = ("agent", "obstacle", "goal", "tower")
KIND_INDEX = {k: i for i, k in enumerate(KINDS)}

POS_UNIT = 1000.0  # metres per observation unit
VEL_UNIT = 10.0  # m/s per observation unit


class InfeasibleConfigurationError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class EntitySpec:
    id: int
    kind: str
    radius: float


@dataclass
class WorldState:
    scenario: str
    entities: list[EntitySpec]
    states: np.ndarray  # (n_entities, 4): x, y, vx, vy
    goal_of: dict[int, int]  # navigating agent -> goal entity id
    n_agents: int  # decision-making agents, ids 0..n_agents-1
    episode_len: int
    pairing: dict[int, int] | None = None  # rover -> tower
    last_message: dict[int, int] | None = None  # rover -> last message from its tower
    t: int = 0
    finished: set[int] = field(default_factory=set)

    def __post_init__(self):
        self.kinds = np.array([KIND_INDEX[e.kind] for e in self.entities], dtype=np.int64)
        self.radii = np.array([e.radius for e in self.entities], dtype=float)
        self._body = {i: i for i in range(self.n_agents)}
        if self.pairing is not None:
            for rover, tower in self.pairing.items():
                self._body[tower] = rover

    @property
    def agent_ids(self) -> range:
        return range(self.n_agents)

    def body_of(self, agent_id: int) -> int:
        """Entity whose distance to goal scores ``agent_id`` (a tower scores via its rover)."""
        return self._body[agent_id]

    def goal_distance(self, agent_id: int) -> float:
        body = self.body_of(agent_id)
        return float(np.linalg.norm(self.states[body, :2] - self.states[self.goal_of[body], :2]))

    def ids_of(self, kind: str) -> np.ndarray:
        return np.flatnonzero(self.kinds == KIND_INDEX[kind])

    def copy(self) -> "WorldState":
        return WorldState(
            scenario=self.scenario,
            entities=list(self.entities),
            states=self.states.copy(),
            goal_of=dict(self.goal_of),
            n_agents=self.n_agents,
            episode_len=self.episode_len,
            pairing=None if self.pairing is None else dict(self.pairing),
            last_message=None if self.last_message is None else dict(self.last_message),
            t=self.t,
            finished=set(self.finished),
        )


@dataclass(frozen=True)
class RewardConfig:
    variant: str = "single_active"
    goal_bonus: float = 5.0
    post_goal_bonus: float = 0.5
    collision_penalty: float = 5.0
    goal_radius: float = 100.0  # metres
    dist_scale: float = 1.0

    @classmethod
    def from_run(cls, cfg) -> "RewardConfig":
        return cls(
            variant=cfg.reward_variant,
            goal_bonus=cfg.goal_bonus,
            post_goal_bonus=cfg.post_goal_bonus,
            collision_penalty=cfg.collision_penalty,
            goal_radius=cfg.delta,
            dist_scale=cfg.dist_scale,
        )


@dataclass
class CollisionReport:
    kappa: np.ndarray  # per decision agent, 0/1
    pairs: list[tuple[int, int]]


@dataclass
class RewardHistory:
    """Per-agent latches: ``reached`` once the goal was first reached, ``phi`` once a single bonus was paid."""

    reached: np.ndarray
    phi: np.ndarray

    @classmethod
    def fresh(cls, n_agents: int) -> "RewardHistory":
        return cls(np.zeros(n_agents, dtype=bool), np.zeros(n_agents, dtype=bool))

    def copy(self) -> "RewardHistory":
        return RewardHistory(self.reached.copy(), self.phi.copy())


@lru_cache(maxsize=32)
def orbital_params(omega_n: float, dt: float, u_mag: float) -> OrbitalParams:
    return OrbitalParams.build(omega_n, dt, u_mag)


def _place_separated(rng, n_points, is_agent, half, sep, tries=100):
    """Sequentially place points so every agent point is >= sep from all earlier points.

    Goal points only need separation from agent points. Returns None on failure.
    """
    placed = np.empty((0, 2))
    placed_agent = np.empty(0, dtype=bool)
    for k in range(n_points):
        cand = rng.uniform(-half, half, size=(tries, 2))
        if len(placed):
            d = np.linalg.norm(cand[:, None, :] - placed[None, :, :], axis=-1)
            relevant = np.ones(len(placed), dtype=bool) if is_agent[k] else placed_agent
            ok = np.all(d[:, relevant] >= sep, axis=1)
            idx = np.flatnonzero(ok)
            if idx.size == 0:
                return None
            p = cand[idx[0]]
        else:
            p = cand[0]
        placed = np.vstack([placed, p])
        placed_agent = np.append(placed_agent, is_agent[k])
    return placed


def _place_clear(rng, n_points, avoid, clearance, half, tries=100):
    out = np.empty((0, 2))
    for _ in range(n_points):
        cand = rng.uniform(-half, half, size=(tries, 2))
        d = np.linalg.norm(cand[:, None, :] - avoid[None, :, :], axis=-1)
        idx = np.flatnonzero(np.all(d >= clearance[None, :], axis=1))
        if idx.size == 0:
            return None
        out = np.vstack([out, cand[idx[0]]])
    return out


def reset_coopnav(cfg, rng: np.random.Generator, max_attempts: int = 1000) -> WorldState:
    """Fresh satellite layout: agents and goals pairwise >= ``min_separation`` apart."""
    n, m = cfg.n_agents, cfg.n_obstacles
    half = cfg.world_size_m / 2.0
    is_agent = np.array([True] * n + [False] * n)
    for _ in range(max_attempts):
        pts = _place_separated(rng, 2 * n, is_agent, half, cfg.min_separation)
        if pts is None:
            continue
        # obstacles must not start in contact with an agent or cover a goal
        clearance = np.concatenate(
            [
                np.full(n, cfg.agent_radius + cfg.obstacle_radius),
                np.full(n, cfg.delta + cfg.obstacle_radius),
            ]
        )
        obs = _place_clear(rng, m, pts, clearance, half) if m else np.empty((0, 2))
        if obs is None:
            continue
        break
    else:
        raise InfeasibleConfigurationError(
            f"no valid layout for {n} agents in a {cfg.world_size_km} km world after {max_attempts} attempts"
        )
    entities = (
        [EntitySpec(i, "agent", cfg.agent_radius) for i in range(n)]
        + [EntitySpec(n + j, "obstacle", cfg.obstacle_radius) for j in range(m)]
        + [EntitySpec(n + m + i, "goal", cfg.delta) for i in range(n)]
    )
    states = np.zeros((2 * n + m, 4))
    states[:n, :2] = pts[:n]
    states[n : n + m, :2] = obs
    states[n + m :, :2] = pts[n:]
    return WorldState(
        scenario="coopnav",
        entities=entities,
        states=states,
        goal_of={i: n + m + i for i in range(n)},
        n_agents=n,
        episode_len=cfg.episode_len,
    )


def reset_rovertower(cfg, rng: np.random.Generator, n_towers: int | None = None, max_attempts: int = 1000) -> WorldState:
    """Rovers 0..R-1, towers R..2R-1, goals 2R..3R-1, with a random rover-tower pairing."""
    r = cfg.n_agents
    n_towers = r if n_towers is None else n_towers
    if n_towers != r:
        raise ConfigurationError(f"rover-tower needs equal counts, got {r} rovers and {n_towers} towers")
    half = cfg.world_size_m / 2.0
    perm = rng.permutation(r)
    is_agent = np.array([True] * r + [False] * r)
    for _ in range(max_attempts):
        pts = _place_separated(rng, 2 * r, is_agent, half, cfg.min_separation)
        if pts is not None:
            break
    else:
        raise InfeasibleConfigurationError(f"no valid rover layout after {max_attempts} attempts")
    towers = rng.uniform(-half, half, size=(r, 2))
    entities = (
        [EntitySpec(i, "agent", cfg.agent_radius) for i in range(r)]
        + [EntitySpec(r + i, "tower", cfg.agent_radius) for i in range(r)]
        + [EntitySpec(2 * r + i, "goal", cfg.delta) for i in range(r)]
    )
    states = np.zeros((3 * r, 4))
    states[:r, :2] = pts[:r]
    states[r : 2 * r, :2] = towers
    states[2 * r :, :2] = pts[r:]
    return WorldState(
        scenario="rovertower",
        entities=entities,
        states=states,
        goal_of={i: 2 * r + i for i in range(r)},
        n_agents=2 * r,
        episode_len=cfg.episode_len,
        pairing={i: r + int(perm[i]) for i in range(r)},
        last_message={i: 0 for i in range(r)},
    )


def reset(cfg, rng: np.random.Generator) -> WorldState:
    if cfg.env == "coopnav":
        return reset_coopnav(cfg, rng)
    return reset_rovertower(cfg, rng)


# observations

OBS_LEN = {"coopnav": 6, "rover": 7, "tower": 4}


def observe(world: WorldState, agent_id: int) -> np.ndarray:
    """Local observation in km and tens of m/s.

    satellite: [p, v, goal - p]; rover: [v, one-hot(last message)];
    tower: [rover p - tower p, rover goal - tower p].
    """
    if not 0 <= agent_id < world.n_agents:
        raise KeyError(f"unknown agent id {agent_id}")
    s = world.states
    if world.scenario == "coopnav":
        p, v = s[agent_id, :2], s[agent_id, 2:]
        g = s[world.goal_of[agent_id], :2]
        return np.concatenate([p / POS_UNIT, v / VEL_UNIT, (g - p) / POS_UNIT])
    if world.entities[agent_id].kind == "agent":
        onehot = np.zeros(N_ACTIONS)
        onehot[world.last_message[agent_id]] = 1.0
        return np.concatenate([s[agent_id, 2:] / VEL_UNIT, onehot])
    rover = world.body_of(agent_id)
    tp = s[agent_id, :2]
    return np.concatenate([(s[rover, :2] - tp) / POS_UNIT, (s[world.goal_of[rover], :2] - tp) / POS_UNIT])


def obs_dim(scenario: str) -> int:
    return OBS_LEN["coopnav"] if scenario == "coopnav" else OBS_LEN["rover"] + 2


def padded_observation(world: WorldState, agent_id: int) -> np.ndarray:
    """Fixed-length actor input; rover-tower appends a rover/tower flag pair so one network serves both."""
    o = observe(world, agent_id)
    if world.scenario == "coopnav":
        return o
    out = np.zeros(obs_dim(world.scenario))
    out[: len(o)] = o
    out[-2 if world.entities[agent_id].kind == "agent" else -1] = 1.0
    return out


def global_state(world: WorldState) -> np.ndarray:
    """Centralised critic features: every navigating body's p, v, goal and finished flag, plus static entities."""
    s = world.states
    parts = []
    for body, goal in world.goal_of.items():
        parts.append(s[body, :2] / POS_UNIT)
        parts.append(s[body, 2:] / VEL_UNIT)
        parts.append(s[goal, :2] / POS_UNIT)
        parts.append([1.0 if body in world.finished else 0.0])
        if world.last_message is not None:
            onehot = np.zeros(N_ACTIONS)
            onehot[world.last_message[body]] = 1.0
            parts.append(onehot)
    for kind in ("obstacle", "tower"):
        for e in world.ids_of(kind):
            parts.append(s[e, :2] / POS_UNIT)
    return np.concatenate([np.asarray(p, dtype=float) for p in parts])


def global_state_dim(cfg) -> int:
    if cfg.env == "coopnav":
        return 7 * cfg.n_agents + 2 * cfg.n_obstacles
    return 12 * cfg.n_agents + 2 * cfg.n_agents


# physics

def apply_actions(world: WorldState, actions: dict[int, int], cfg) -> np.ndarray:
    """Turn acting agents' discrete actions into per-entity accelerations.

    Inactive agents apply no control. Tower actions are messages written into
    the paired rover's observation rather than forces.
    """
    controls = np.zeros((len(world.entities), 2))
    for i, a in actions.items():
        kind = world.entities[i].kind
        if kind == "tower":
            if not 0 <= int(a) < N_ACTIONS:
                raise ValueError(f"tower message must be in 0..{N_ACTIONS - 1}, got {a}")
            world.last_message[world.body_of(i)] = int(a)
        else:
            controls[i] = action_decode(a, cfg.u_mag)
    return controls


def step_physics(world: WorldState, controls: np.ndarray, cfg) -> None:
    """Advance moving bodies one step in place; finished bodies stay parked."""
    movers = np.array([b for b in world.goal_of if b not in world.finished], dtype=np.int64)
    if movers.size:
        s, u = world.states[movers], controls[movers]
        with np.errstate(over="ignore", invalid="ignore"):  # checked just below
            if world.scenario == "coopnav":
                new = cw_step_batch(s, u, orbital_params(cfg.omega_n, cfg.dt, cfg.u_mag))
            else:
                new = mpe_step_batch(s, u, cfg.dt, cfg.damping)
        if not np.all(np.isfinite(new)):
            raise FloatingPointError(f"non-finite state at t={world.t}")
        world.states[movers] = new
    world.t += 1


def park(world: WorldState, agent_id: int) -> None:
    """Death-mask an agent in the world: it stops moving and stops colliding."""
    world.finished.add(agent_id)
    body = world.body_of(agent_id)
    world.states[body, 2:] = 0.0


# collisions, goals, rewards

def detect_collisions(world: WorldState) -> CollisionReport:
    """Agent-agent and agent-obstacle overlaps among unfinished agents."""
    movers = [i for i in world.agent_ids if world.entities[i].kind == "agent" and i not in world.finished]
    others = movers + list(world.ids_of("obstacle"))
    kappa = np.zeros(world.n_agents, dtype=np.int64)
    pairs = []
    if not movers:
        return CollisionReport(kappa, pairs)
    P = world.states[others, :2]
    R = world.radii[others]
    d = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)
    hit = d < R[:, None] + R[None, :]
    for a in range(len(movers)):
        for b in range(a + 1, len(others)):
            if hit[a, b]:
                i, j = others[a], others[b]
                pairs.append((i, j))
                kappa[i] = 1
                if j < world.n_agents:
                    kappa[j] = 1
    return CollisionReport(kappa, pairs)


def goal_reached(world: WorldState, agent_id: int, delta: float) -> bool:
    return world.goal_distance(agent_id) <= delta


def compute_reward(
    world: WorldState,
    active_set,
    collisions: CollisionReport,
    cfg: RewardConfig,
    history: RewardHistory,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent reward terms and the shared totals delivered to each agent.

    ``history`` holds the latches as of the previous step; agents with
    ``history.reached`` set are already death-masked. Distances enter in km.
    """
    n = world.n_agents
    r = np.zeros(n)
    rovertower = world.scenario == "rovertower"
    for i in range(n):
        d_m = world.goal_distance(i)
        d_km = d_m / POS_UNIT
        within = d_m <= cfg.goal_radius
        if history.reached[i]:
            if cfg.variant == "repeated":
                r[i] = -cfg.dist_scale * d_km + (cfg.goal_bonus if within else 0.0)
            elif cfg.variant == "piecewise":
                r[i] = -cfg.dist_scale * d_km + cfg.post_goal_bonus
            continue
        goal_term = 0.0
        if within:
            if cfg.variant in ("repeated", "piecewise"):
                goal_term = cfg.goal_bonus
            elif not history.phi[i]:
                goal_term = cfg.goal_bonus
        penalty = 0.0 if rovertower else collisions.kappa[i] * cfg.collision_penalty
        r[i] = -cfg.dist_scale * d_km + goal_term - penalty
    if cfg.variant == "single_active":
        active = sorted(active_set)
        total = float(np.sum(r[active])) if active else 0.0
        delivered = np.zeros(n)
        delivered[active] = total
    else:
        delivered = np.full(n, float(np.sum(r)))
    return r, delivered


def update_history(world: WorldState, history: RewardHistory, cfg: RewardConfig) -> tuple[RewardHistory, list[int]]:
    """Latch goal arrivals after rewards are computed; returns the newly arrived agents."""
    new = history.copy()
    arrived = []
    for i in range(world.n_agents):
        if not history.reached[i] and goal_reached(world, i, cfg.goal_radius):
            new.reached[i] = True
            if cfg.variant in ("single", "single_active"):
                new.phi[i] = True
            arrived.append(i)
    return new, arrived
