"""Asynchronous agent scheduling.

Every agent acts at t=0 and then once every ``mu`` environment steps, where
``mu`` is drawn once per episode. ``tau_index`` counts the actions an agent
has taken, so replay data can be keyed by the agent's own action sequence
instead of by global step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfigurationError(ValueError):
    pass


@dataclass
class AgentClock:
    agent_id: int
    mu: int
    last_action_t: int = -1
    tau_index: int = 0
    active: bool = False
    finished: bool = False

    def __post_init__(self):
        if self.mu < 1:
            raise ConfigurationError(f"mu must be >= 1, got {self.mu}")


def sample_intervals(rng: np.random.Generator, lo: int, hi: int, n: int) -> list[int]:
    """Draw ``n`` action intervals uniformly from ``{lo, ..., hi}``."""
    if lo < 1 or hi < lo:
        raise ConfigurationError(f"interval range must satisfy 1 <= lo <= hi, got [{lo}, {hi}]")
    if n < 1:
        raise ConfigurationError(f"need at least one agent, got n={n}")
    return [int(m) for m in rng.integers(lo, hi + 1, size=n)]


def make_clocks(mus: list[int]) -> list[AgentClock]:
    return [AgentClock(agent_id=i, mu=int(m)) for i, m in enumerate(mus)]


def would_act(clock: AgentClock, t: int) -> bool:
    """Scheduling predicate used by :func:`tick`, without side effects."""
    if clock.finished:
        return False
    return t == 0 or clock.last_action_t < 0 or t - clock.last_action_t >= clock.mu


def tick(clocks: list[AgentClock], t: int, max_active: int = 0) -> set[int]:
    """Advance the schedule to step ``t`` and return the ids that act now.

    With ``max_active > 0`` at most that many agents act; the longest-waiting
    eligible agents go first (ties by id) and the rest stay eligible.
    """
    eligible = [c for c in clocks if would_act(c, t)]
    if max_active and len(eligible) > max_active:
        eligible = sorted(eligible, key=lambda c: (c.last_action_t, c.agent_id))[:max_active]
    chosen = {c.agent_id for c in eligible}
    for c in clocks:
        if c.agent_id in chosen:
            c.last_action_t = t
            c.tau_index += 1
            c.active = True
        else:
            c.active = False
    return chosen


def mark_finished(clock: AgentClock) -> AgentClock:
    clock.finished = True
    clock.active = False
    return clock


def acting_steps(mu: int, horizon: int) -> list[int]:
    """Steps in ``[0, horizon)`` at which an agent with interval ``mu`` acts."""
    return list(range(0, horizon, mu))
