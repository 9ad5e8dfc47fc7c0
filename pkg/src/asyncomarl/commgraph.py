"""Per-agent dynamic communication graphs.

Nodes are ordered agents (by id, finished agents removed), then obstacles,
then goals. Edges point *into* agent nodes: from another agent when both act
this step and are within the communication radius, and from an obstacle or
goal when it is merely within range. Edge weight is the Euclidean distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import KIND_INDEX, POS_UNIT, VEL_UNIT, WorldState
from .timebase import AgentClock

AGENT_KINDS = (KIND_INDEX["agent"], KIND_INDEX["tower"])


class DimensionError(ValueError):
    pass


class GraphConstructionError(ValueError):
    pass


@dataclass(frozen=True)
class NodeFeature:
    rel_p: np.ndarray
    rel_v: np.ndarray
    rel_goal_p: np.ndarray
    entity_type: str


@dataclass(frozen=True)
class EdgeRecord:
    src: int
    dst: int
    dist: float


@dataclass
class CommGraph:
    entity_ids: np.ndarray  # node index -> world entity id
    kinds: np.ndarray  # node index -> KIND_INDEX value
    features: np.ndarray  # (N, 6): rel_p, rel_v, rel_goal_p in metres and m/s
    src: np.ndarray
    dst: np.ndarray
    dist: np.ndarray  # metres
    A: np.ndarray
    D: np.ndarray
    A_masked: np.ndarray
    lam: float
    ego: int  # node index of the ego agent
    active: np.ndarray  # per-node d_i

    @property
    def n_nodes(self) -> int:
        return len(self.entity_ids)

    @property
    def is_agent(self) -> np.ndarray:
        return np.isin(self.kinds, AGENT_KINDS)

    @property
    def edges(self) -> list[EdgeRecord]:
        return [EdgeRecord(int(s), int(d), float(w)) for s, d, w in zip(self.src, self.dst, self.dist)]

    @property
    def nodes(self) -> list[NodeFeature]:
        from .envs import KINDS

        return [
            NodeFeature(f[0:2].copy(), f[2:4].copy(), f[4:6].copy(), KINDS[k])
            for f, k in zip(self.features, self.kinds)
        ]

    def live_mask(self) -> np.ndarray:
        """``mask[dst, src]``: edge survives the activity mask."""
        m = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        keep = self.D[self.src, self.dst] > 0
        m[self.dst[keep], self.src[keep]] = True
        return m


def activity_matrix(clocks: list[AgentClock], n_static: int = 0) -> np.ndarray:
    """``D[i, j] = d_i * d_j`` over agents followed by ``n_static`` always-on entities."""
    d = np.array([1.0 if (c.active and not c.finished) else 0.0 for c in clocks] + [1.0] * n_static)
    return np.outer(d, d)


def mask_adjacency(A: np.ndarray, D: np.ndarray) -> np.ndarray:
    A = np.asarray(A)
    D = np.asarray(D)
    if A.shape != D.shape:
        raise DimensionError(f"adjacency {A.shape} and activity {D.shape} differ in shape")
    return A * D


def adjacency_from_edges(edges, n: int) -> np.ndarray:
    A = np.zeros((n, n))
    seen = set()
    for e in edges:
        src, dst, dist = (e.src, e.dst, e.dist) if isinstance(e, EdgeRecord) else e
        if not (0 <= src < n and 0 <= dst < n):
            raise GraphConstructionError(f"edge ({src}, {dst}) out of range for {n} nodes")
        if (src, dst) in seen:
            raise GraphConstructionError(f"duplicate edge ({src}, {dst})")
        seen.add((src, dst))
        A[src, dst] = dist
    return A


def node_order(world: WorldState) -> np.ndarray:
    agents = [i for i in world.agent_ids if i not in world.finished]
    static = [e.id for e in world.entities[world.n_agents :] if e.kind == "obstacle"]
    goals = [e.id for e in world.entities[world.n_agents :] if e.kind == "goal"]
    return np.array(agents + static + goals, dtype=np.int64)


def _goal_positions(world: WorldState, ids: np.ndarray) -> np.ndarray:
    """Per-node goal position; obstacles and goals alias their own position."""
    s = world.states
    out = s[ids, :2].copy()
    for k, e in enumerate(ids):
        e = int(e)
        if e < world.n_agents:
            out[k] = s[world.goal_of[world.body_of(e)], :2]
    return out


def build_graph(world: WorldState, clocks: list[AgentClock], lam: float, ego: int) -> CommGraph:
    """Graph of the world as seen from agent ``ego`` at the current step."""
    ids = node_order(world)
    kinds = world.kinds[ids]
    is_agent = ids < world.n_agents
    d = np.ones(len(ids))
    d[is_agent] = [1.0 if clocks[i].active and not clocks[i].finished else 0.0 for i in ids[is_agent]]

    s = world.states
    p = s[ids, :2]
    v = s[ids, 2:]
    ego_p, ego_v = s[ego, :2], s[ego, 2:]
    feats = np.concatenate([p - ego_p, v - ego_v, _goal_positions(world, ids) - ego_p], axis=1)

    dist = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)  # dist[src, dst]
    near = dist <= lam
    np.fill_diagonal(near, False)
    both_active = (d[:, None] > 0) & (d[None, :] > 0)
    allowed = np.where(is_agent[:, None], both_active, True) & is_agent[None, :]
    src, dst = np.nonzero(near & allowed)
    w = dist[src, dst]

    n = len(ids)
    A = np.zeros((n, n))
    A[src, dst] = w
    D = np.outer(d, d)
    ego_node = int(np.flatnonzero(ids == ego)[0])
    return CommGraph(
        entity_ids=ids,
        kinds=kinds,
        features=feats,
        src=src,
        dst=dst,
        dist=w,
        A=A,
        D=D,
        A_masked=mask_adjacency(A, D),
        lam=lam,
        ego=ego_node,
        active=d,
    )


def agent_edge_count(world: WorldState, active: set[int], lam: float) -> int:
    """Directed agent-agent edges at this step (identical for every ego)."""
    live = [i for i in sorted(active) if i not in world.finished]
    if len(live) < 2:
        return 0
    p = world.states[live, :2]
    dist = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    return int(np.sum(dist <= lam) - len(live))


def connected_agents(graph: CommGraph) -> np.ndarray:
    """Agent node indices with a live edge into the ego."""
    live = graph.live_mask()
    return np.flatnonzero(live[graph.ego] & graph.is_agent)


@dataclass
class DenseGraph:
    """Padded arrays for batched attention; distances and features in observation units."""

    features: np.ndarray  # (N_max, 6)
    kinds: np.ndarray  # (N_max,)
    node_mask: np.ndarray  # (N_max,) bool
    agent_mask: np.ndarray  # (N_max,) bool
    adj: np.ndarray  # (N_max, N_max) bool, adj[dst, src]
    dist: np.ndarray  # (N_max, N_max), dist[dst, src]
    ego: int


def to_dense(graph: CommGraph, n_max: int) -> DenseGraph:
    n = graph.n_nodes
    feats = np.zeros((n_max, 6))
    feats[:n, 0:2] = graph.features[:, 0:2] / POS_UNIT
    feats[:n, 2:4] = graph.features[:, 2:4] / VEL_UNIT
    feats[:n, 4:6] = graph.features[:, 4:6] / POS_UNIT
    kinds = np.zeros(n_max, dtype=np.int64)
    kinds[:n] = graph.kinds
    node_mask = np.zeros(n_max, dtype=bool)
    node_mask[:n] = True
    agent_mask = np.zeros(n_max, dtype=bool)
    agent_mask[:n] = graph.is_agent
    adj = np.zeros((n_max, n_max), dtype=bool)
    adj[:n, :n] = graph.live_mask()
    dist = np.zeros((n_max, n_max))
    dist[graph.dst, graph.src] = graph.dist / POS_UNIT
    return DenseGraph(feats, kinds, node_mask, agent_mask, adj, dist, graph.ego)
