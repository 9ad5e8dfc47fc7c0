"""Evaluation metrics and attention reports.

All metrics are pure functions of :class:`EpisodeLog` records:

* ``f_comm``: directed agent-agent edges summed over steps, over n(n-1)T.
  Rover-Tower counts tower transmissions over T times the number of pairs.
* success rate: percentage of episodes in which every agent reached its goal.
* episode fraction: first-goal step over T per agent (1 if never reached),
  averaged over agents, then episodes.
* average collisions: colliding pairs per step summed, over n, over episodes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRICS_HEADER = ["seed", "episodes", "f_comm", "success_pct", "frac_T", "avg_col"]


class UndefinedMetricError(ValueError):
    pass


@dataclass
class EpisodeLog:
    scenario: str
    n_agents: int  # navigating agents (satellites or rovers)
    T_steps: int
    active_sets: list[set[int]] = field(default_factory=list)
    edge_counts: list[int] = field(default_factory=list)
    collision_events: list[int] = field(default_factory=list)
    messages: list[int] = field(default_factory=list)
    first_goal_step: list[int | None] = field(default_factory=list)

    @classmethod
    def empty(cls, world, T_steps: int) -> "EpisodeLog":
        n = len(world.goal_of)
        return cls(world.scenario, n, T_steps, first_goal_step=[None] * n)

    def record_step(self, world, active: set[int], edge_count: int, collisions: int) -> None:
        self.active_sets.append(set(active))
        self.edge_counts.append(edge_count)
        self.collision_events.append(collisions)
        self.messages.append(sum(1 for i in active if world.entities[i].kind == "tower"))

    def record_arrival(self, world, agent_id: int, step: int) -> None:
        if agent_id in world.goal_of and self.first_goal_step[agent_id] is None:
            self.first_goal_step[agent_id] = step


def f_comm(log: EpisodeLog, n: int | None = None) -> float:
    n = log.n_agents if n is None else n
    if log.scenario == "rovertower":
        return sum(log.messages) / (log.T_steps * n)
    if n < 2:
        raise UndefinedMetricError("communication frequency needs at least two agents")
    return sum(log.edge_counts) / (n * (n - 1) * log.T_steps)


def success_rate(logs: list[EpisodeLog]) -> float:
    ok = sum(all(s is not None for s in lg.first_goal_step) for lg in logs)
    return 100.0 * ok / len(logs)


def episode_fraction(logs: list[EpisodeLog]) -> float:
    per_episode = [
        np.mean([1.0 if s is None else s / lg.T_steps for s in lg.first_goal_step]) for lg in logs
    ]
    return float(np.mean(per_episode))


def avg_collisions(logs: list[EpisodeLog], n: int | None = None) -> float:
    n = logs[0].n_agents if n is None else n
    return sum(sum(lg.collision_events) for lg in logs) / n / len(logs)


@dataclass
class Metrics:
    seed: int
    episodes: int
    f_comm: float
    success_pct: float
    frac_T: float
    avg_col: float

    @classmethod
    def from_logs(cls, logs: list[EpisodeLog], seed: int) -> "Metrics":
        fc = [f_comm(lg) for lg in logs] if logs[0].scenario == "rovertower" or logs[0].n_agents >= 2 else [0.0]
        avg_col = float("nan") if logs[0].scenario == "rovertower" else avg_collisions(logs)
        return cls(seed, len(logs), float(np.mean(fc)), success_rate(logs), episode_fraction(logs), avg_col)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerow([self.seed, self.episodes] + [repr(float(x)) for x in (self.f_comm, self.success_pct, self.frac_T, self.avg_col)])
        return buf.getvalue()


def read_metrics(path: str | Path) -> Metrics:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    r = rows[1]
    return Metrics(int(r[0]), int(r[1]), *(float(x) for x in r[2:]))


def run_evaluation(policy, cfg, value_stats, episodes: int | None = None, seed: int | None = None,
                   record_attention: bool = False):
    """Greedy episodes with the evaluation interval range; returns (logs, rollouts)."""
    from .trainer import collect, episode_rng

    episodes = cfg.eval_episodes if episodes is None else episodes
    seed = cfg.seed if seed is None else seed
    logs, rolls = [], []
    for start in range(0, episodes, cfg.num_envs):
        idx = range(start, min(start + cfg.num_envs, episodes))
        rngs = [episode_rng(seed, "eval", k, 0) for k in idx]
        roll = collect(policy, cfg, rngs, value_stats, greedy=True,
                       mu_range=(cfg.mu_eval_lo, cfg.mu_eval_hi), record_attention=record_attention)
        logs.extend(roll.logs)
        rolls.append(roll)
    return logs, rolls


def evaluate(policy, cfg, value_stats, episodes: int | None = None, seed: int | None = None) -> Metrics:
    logs, _ = run_evaluation(policy, cfg, value_stats, episodes, seed)
    return Metrics.from_logs(logs, cfg.seed if seed is None else seed)


# attention reports

def dump_attention(policy, cfg, value_stats, agent_id: int, tau_points: list[int], path: str | Path | None = None,
                   seed: int | None = None) -> dict:
    """Layer-2 attention of ``agent_id`` over the other agents at its requested action indices.

    Runs one greedy episode. Each entry holds, per head, the ego's attention
    weight on every other agent node present in its graph, plus the graph's
    edge list in entity ids. Requested indices the agent never reached (it
    finished earlier, or the episode ended) are marked absent.
    """
    from .trainer import collect, episode_rng

    seed = cfg.seed if seed is None else seed
    roll = collect(policy, cfg, [episode_rng(seed, "inspect", 0, 0)], value_stats, greedy=True,
                   mu_range=(cfg.mu_eval_lo, cfg.mu_eval_hi), record_attention=True)
    buf = next(b for b in roll.buffers if b.agent == agent_id)
    by_tau = {tr.tau_index - 1: tr for tr in buf.transitions}
    n_taken = len(buf.transitions)
    named = {"first": 0, "middle": n_taken // 2, "last": n_taken - 1}
    entries = []
    for tau in tau_points:
        tau = named[tau] if isinstance(tau, str) else int(tau)
        tr = by_tau.get(tau)
        if tr is None:
            entries.append({"tau": tau, "absent": True})
            continue
        g = tr.graph
        entries.append(
            {
                "tau": tau,
                "absent": False,
                "t": tr.t,
                "agents": tr.attention["agents"],
                "weights": tr.attention["weights"],
                "connected": tr.attention["connected"],
                "edges": [[int(g.entity_ids[s]), int(g.entity_ids[d]), float(w)] for s, d, w in zip(g.src, g.dst, g.dist)],
            }
        )
    report = {
        "format": "asyncomarl.attention.v1",
        "agent": agent_id,
        "seed": seed,
        "node_order": "agents by id, then obstacles, then goals",
        "actions_taken": len(buf.transitions),
        "entries": entries,
    }
    if path is not None:
        Path(path).write_text(json.dumps(report, indent=1) + "\n")
    return report


def read_attention_report(path: str | Path) -> dict:
    report = json.loads(Path(path).read_text())
    if report.get("format") != "asyncomarl.attention.v1":
        raise ValueError(f"{path}: not an attention report")
    return report
