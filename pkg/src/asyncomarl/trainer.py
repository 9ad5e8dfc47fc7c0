"""Asynchronous rollouts and recurrent PPO updates.

Each agent keeps its own buffer of transitions recorded only at the steps
where it acts, so buffers are ragged and indexed by the agent's own action
count. Advantages are computed per buffer, pooled for normalisation, then
every buffer is cut into fixed-length chunks whose recurrent states restart
from the hidden state stored with the chunk's first transition.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from . import envs
from .commgraph import agent_edge_count, build_graph, connected_agents, to_dense
from .evalkit import EpisodeLog
from .neuralcore import (
    AsyncPolicy,
    build_policy,
    graph_batch,
    load_checkpoint,
    load_model_arrays,
    model_arrays,
    save_checkpoint,
)
from .timebase import AgentClock, make_clocks, mark_finished, sample_intervals, tick, would_act

log = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ["update", "env_steps", "mean_episode_reward", "policy_loss", "value_loss", "entropy", "grad_norm"]


class RolloutDivergence(RuntimeError):
    pass


class UpdateRejected(RuntimeError):
    pass


# running statistics

class RunningStats:
    """Exact streaming mean and variance (parallel-merge form)."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    @property
    def var(self) -> float:
        return self.m2 / self.count if self.count else 1.0

    def update(self, values) -> None:
        x = np.asarray(values, dtype=float).ravel()
        if x.size == 0:
            return
        n_b = x.size
        mean_b = float(x.mean())
        m2_b = float(((x - mean_b) ** 2).sum())
        n = self.count + n_b
        delta = mean_b - self.mean
        self.mean += delta * n_b / n
        self.m2 += m2_b + delta * delta * self.count * n_b / n
        self.count = n

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / math.sqrt(self.var + 1e-8)

    def denormalize(self, y):
        return np.asarray(y, dtype=float) * math.sqrt(self.var + 1e-8) + self.mean

    def to_array(self) -> np.ndarray:
        return np.array([self.count, self.mean, self.m2], dtype=float)

    @classmethod
    def from_array(cls, a) -> "RunningStats":
        s = cls()
        s.count, s.mean, s.m2 = int(a[0]), float(a[1]), float(a[2])
        return s


def normalize_stream(values, running_stats: RunningStats) -> np.ndarray:
    """Fold ``values`` into the running statistics, then standardise them."""
    running_stats.update(values)
    return running_stats.normalize(values)


# advantages

def gae(rewards, values, bootstrap, gamma: float, lam: float, dones=None):
    """Generalised advantage estimates and returns.

    Accepts one sequence ``(T,)`` or a batch ``(B, T)``; the recursion runs
    backwards in time and is vectorised over the batch. ``bootstrap`` is the
    value after the last step (ignored where that step is done).
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    squeeze = r.ndim == 1
    r, v = np.atleast_2d(r), np.atleast_2d(v)
    d = np.zeros_like(r) if dones is None else np.atleast_2d(np.asarray(dones, dtype=float))
    b = np.broadcast_to(np.asarray(bootstrap, dtype=float), (r.shape[0],))
    T = r.shape[1]
    adv = np.zeros_like(r)
    next_v = b.copy()
    next_a = np.zeros(r.shape[0])
    for t in range(T - 1, -1, -1):
        cont = 1.0 - d[:, t]
        delta = r[:, t] + gamma * next_v * cont - v[:, t]
        next_a = delta + gamma * lam * cont * next_a
        adv[:, t] = next_a
        next_v = v[:, t]
    ret = adv + v
    if squeeze:
        return adv[0], ret[0]
    return adv, ret


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# rollouts

@dataclass
class Transition:
    env: int
    agent: int
    tau_index: int
    t: int
    o: np.ndarray
    graph: object  # CommGraph snapshot
    dense: object  # DenseGraph used by the encoder
    state: np.ndarray
    a: int
    logp: float
    r: float
    V: float
    done: bool
    h_actor: np.ndarray
    h_critic: np.ndarray
    attention: dict | None = None


@dataclass
class AgentBuffer:
    env: int
    agent: int
    transitions: list[Transition] = field(default_factory=list)
    bootstrap: float = 0.0

    def __len__(self):
        return len(self.transitions)


@dataclass
class RolloutResult:
    buffers: list[AgentBuffer]
    logs: list[EpisodeLog]
    worlds: list[envs.WorldState]


def node_capacity(cfg) -> int:
    if cfg.env == "coopnav":
        return 2 * cfg.n_agents + cfg.n_obstacles
    return 3 * cfg.n_agents


def episode_rng(seed: int, stream: str, index: int, env: int) -> np.random.Generator:
    tag = {"train": 0, "eval": 1, "inspect": 2}[stream]
    return np.random.default_rng([seed, tag, index, env])


@torch.no_grad()
def collect(
    policy: AsyncPolicy,
    cfg,
    rngs: list[np.random.Generator],
    value_stats: RunningStats,
    greedy: bool = False,
    sampler: torch.Generator | None = None,
    mu_range: tuple[int, int] | None = None,
    record_attention: bool = False,
) -> RolloutResult:
    """Run one episode in each environment and return per-agent buffers and logs."""
    dtype = next(policy.parameters()).dtype
    lo, hi = mu_range or (cfg.mu_train_lo, cfg.mu_train_hi)
    rcfg = envs.RewardConfig.from_run(cfg)
    lam = cfg.comm_radius
    n_max = node_capacity(cfg)
    H = policy.hidden

    worlds, clocks, hists, logs = [], [], [], []
    for rng in rngs:
        w = envs.reset(cfg, rng)
        worlds.append(w)
        clocks.append(make_clocks(sample_intervals(rng, lo, hi, w.n_agents)))
        hists.append(envs.RewardHistory.fresh(w.n_agents))
        logs.append(EpisodeLog.empty(w, cfg.episode_len))
    n_env = len(worlds)
    A = worlds[0].n_agents
    h_a = np.zeros((n_env, A, H))
    h_c = np.zeros((n_env, A, H))
    buffers = {(e, i): AgentBuffer(e, i) for e in range(n_env) for i in range(A)}

    for t in range(cfg.episode_len):
        items = []
        actives = []
        for e, w in enumerate(worlds):
            active = tick(clocks[e], t, cfg.max_active)
            actives.append(active)
            if not active:
                continue
            state = envs.global_state(w)
            for i in sorted(active):
                g = build_graph(w, clocks[e], lam, i)
                items.append((e, i, g, to_dense(g, n_max), envs.padded_observation(w, i), state))
        actions = [dict() for _ in worlds]
        if items:
            out = _policy_step(policy, items, h_a, h_c, dtype, greedy, sampler, record_attention)
            for k, (e, i, g, dg, o, s) in enumerate(items):
                actions[e][i] = out["a"][k]
                tr = Transition(
                    env=e, agent=i, tau_index=clocks[e][i].tau_index, t=t, o=o, graph=g, dense=dg, state=s,
                    a=out["a"][k], logp=out["logp"][k], r=0.0,
                    V=float(value_stats.denormalize(out["v"][k])), done=False,
                    h_actor=h_a[e, i].copy(), h_critic=h_c[e, i].copy(),
                    attention=out["att"][k] if record_attention else None,
                )
                buffers[(e, i)].transitions.append(tr)
                h_a[e, i] = out["h_a"][k]
                h_c[e, i] = out["h_c"][k]

        for e, w in enumerate(worlds):
            active = actives[e]
            controls = envs.apply_actions(w, actions[e], cfg)
            try:
                envs.step_physics(w, controls, cfg)
            except FloatingPointError as exc:
                raise RolloutDivergence(f"env {e}: {exc}") from None
            coll = envs.detect_collisions(w)
            _, delivered = envs.compute_reward(w, active, coll, rcfg, hists[e])
            hists[e], arrived = envs.update_history(w, hists[e], rcfg)
            for i in active:
                buffers[(e, i)].transitions[-1].r = float(delivered[i])
            logs[e].record_step(w, active, agent_edge_count(w, active, lam), len(coll.pairs))
            for i in arrived:
                mark_finished(clocks[e][i])
                envs.park(w, i)
                if buffers[(e, i)].transitions:
                    buffers[(e, i)].transitions[-1].done = True
                logs[e].record_arrival(w, i, t + 1)

    _bootstrap(policy, cfg, worlds, clocks, buffers, h_a, h_c, value_stats, dtype, lam, n_max)
    ordered = [buffers[(e, i)] for e in range(n_env) for i in range(A)]
    return RolloutResult(ordered, logs, worlds)


def _policy_step(policy, items, h_a, h_c, dtype, greedy, sampler, record_attention):
    gb = graph_batch([it[3] for it in items], dtype)
    o = torch.as_tensor(np.stack([it[4] for it in items]), dtype=dtype).unsqueeze(1)
    s = torch.as_tensor(np.stack([it[5] for it in items]), dtype=dtype).unsqueeze(1)
    ha = torch.as_tensor(np.stack([h_a[it[0], it[1]] for it in items]), dtype=dtype)
    hc = torch.as_tensor(np.stack([h_c[it[0], it[1]] for it in items]), dtype=dtype)
    enc = policy.encode(gb)
    logits, ha2 = policy.actor_forward(o, enc.x_agg.unsqueeze(1), ha)
    v, hc2 = policy.critic_forward(s, o, enc.X_agg.unsqueeze(1), hc)
    logits = logits[:, 0]
    logp_all = F.log_softmax(logits, dim=-1)
    if greedy:
        a = logits.argmax(dim=-1)
    else:
        a = torch.multinomial(logp_all.exp(), 1, generator=sampler).squeeze(-1)
    out = {
        "a": [int(x) for x in a],
        "logp": logp_all.gather(-1, a.unsqueeze(-1)).squeeze(-1).double().numpy(),
        "v": v[:, 0].double().numpy(),
        "h_a": ha2.double().numpy(),
        "h_c": hc2.double().numpy(),
    }
    if record_attention:
        alpha = enc.alpha[1].double().numpy()  # (B, heads, N, N)
        att = []
        for k, it in enumerate(items):
            g, dg = it[2], it[3]
            row = alpha[k, :, dg.ego, : g.n_nodes]
            agents = [j for j in np.flatnonzero(g.is_agent) if j != g.ego]
            att.append(
                {
                    "agents": [int(g.entity_ids[j]) for j in agents],
                    "weights": row[:, agents].tolist(),
                    "connected": [int(g.entity_ids[j]) for j in connected_agents(g)],
                }
            )
        out["att"] = att
    return out


def _bootstrap(policy, cfg, worlds, clocks, buffers, h_a, h_c, value_stats, dtype, lam, n_max):
    """Critic value at the post-episode state for agents still running."""
    items = []
    for e, w in enumerate(worlds):
        pending = [i for i in w.agent_ids if not clocks[e][i].finished and buffers[(e, i)].transitions]
        if not pending:
            continue
        peek = [AgentClock(c.agent_id, c.mu, c.last_action_t, c.tau_index, would_act(c, cfg.episode_len), c.finished)
                for c in clocks[e]]
        state = envs.global_state(w)
        for i in pending:
            peek[i].active = True
            g = build_graph(w, peek, lam, i)
            items.append((e, i, to_dense(g, n_max), envs.padded_observation(w, i), state))
    if not items:
        return
    gb = graph_batch([it[2] for it in items], dtype)
    o = torch.as_tensor(np.stack([it[3] for it in items]), dtype=dtype).unsqueeze(1)
    s = torch.as_tensor(np.stack([it[4] for it in items]), dtype=dtype).unsqueeze(1)
    hc = torch.as_tensor(np.stack([h_c[it[0], it[1]] for it in items]), dtype=dtype)
    enc = policy.encode(gb)
    v, _ = policy.critic_forward(s, o, enc.X_agg.unsqueeze(1), hc)
    vals = value_stats.denormalize(v[:, 0].double().numpy())
    for k, (e, i, *_rest) in enumerate(items):
        buffers[(e, i)].bootstrap = float(vals[k])


# updates

@dataclass
class ChunkBatch:
    o: torch.Tensor
    state: torch.Tensor
    graphs: dict
    a: torch.Tensor
    logp: torch.Tensor
    adv: torch.Tensor
    ret: torch.Tensor  # normalised targets
    v_old: torch.Tensor  # normalised
    mask: torch.Tensor
    h_a0: torch.Tensor
    h_c0: torch.Tensor

    @property
    def n_chunks(self) -> int:
        return self.o.shape[0]

    def select(self, idx: torch.Tensor) -> "ChunkBatch":
        L = self.o.shape[1]
        flat = (idx.unsqueeze(1) * L + torch.arange(L)).reshape(-1)
        return ChunkBatch(
            o=self.o[idx], state=self.state[idx], graphs={k: v[flat] for k, v in self.graphs.items()},
            a=self.a[idx], logp=self.logp[idx], adv=self.adv[idx], ret=self.ret[idx], v_old=self.v_old[idx],
            mask=self.mask[idx], h_a0=self.h_a0[idx], h_c0=self.h_c0[idx],
        )


def compute_targets(buffers: list[AgentBuffer], cfg) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for b in buffers:
        tr = b.transitions
        r = np.array([x.r for x in tr])
        v = np.array([x.V for x in tr])
        d = np.array([x.done for x in tr], dtype=float)
        boot = 0.0 if tr[-1].done else b.bootstrap
        out.append(gae(r, v, boot, cfg.gamma, cfg.gae_lambda, d))
    return out


def build_chunks(buffers: list[AgentBuffer], targets, value_stats: RunningStats, cfg, dtype) -> ChunkBatch:
    L = cfg.chunk_len
    adv_all = normalize_advantages(np.concatenate([a for a, _ in targets]))
    rows = []
    pos = 0
    for b, (a, ret) in zip(buffers, targets):
        n = len(b)
        adv = adv_all[pos : pos + n]
        pos += n
        for start in range(0, n, L):
            rows.append((b.transitions[start : start + L], adv[start : start + L], ret[start : start + L]))
    C = len(rows)
    tmpl = rows[0][0][0]
    od, sd, H = len(tmpl.o), len(tmpl.state), len(tmpl.h_actor)
    o = np.zeros((C, L, od))
    st = np.zeros((C, L, sd))
    act = np.zeros((C, L), dtype=np.int64)
    logp = np.zeros((C, L))
    adv = np.zeros((C, L))
    ret = np.zeros((C, L))
    vold = np.zeros((C, L))
    mask = np.zeros((C, L))
    ha0 = np.zeros((C, H))
    hc0 = np.zeros((C, H))
    dense = []
    pad = None
    for c, (trs, ad, rt) in enumerate(rows):
        k = len(trs)
        o[c, :k] = [x.o for x in trs]
        st[c, :k] = [x.state for x in trs]
        act[c, :k] = [x.a for x in trs]
        logp[c, :k] = [x.logp for x in trs]
        adv[c, :k] = ad
        ret[c, :k] = value_stats.normalize(rt)
        vold[c, :k] = value_stats.normalize([x.V for x in trs])
        mask[c, :k] = 1.0
        ha0[c] = trs[0].h_actor
        hc0[c] = trs[0].h_critic
        dense.extend(x.dense for x in trs)
        if k < L:
            if pad is None:
                pad = _padding_graph(trs[0].dense)
            dense.extend([pad] * (L - k))
    T = lambda x: torch.as_tensor(x, dtype=dtype)
    return ChunkBatch(
        o=T(o), state=T(st), graphs=graph_batch(dense, dtype), a=torch.as_tensor(act), logp=T(logp),
        adv=T(adv), ret=T(ret), v_old=T(vold), mask=T(mask), h_a0=T(ha0), h_c0=T(hc0),
    )


def _padding_graph(like):
    from .commgraph import DenseGraph

    n = len(like.kinds)
    return DenseGraph(
        np.zeros((n, 6)), np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool), np.zeros(n, dtype=bool),
        np.zeros((n, n), dtype=bool), np.zeros((n, n)), 0,
    )


def huber(x: torch.Tensor, delta: float) -> torch.Tensor:
    a = x.abs()
    return torch.where(a <= delta, 0.5 * x * x, delta * (a - 0.5 * delta))


def ppo_losses(policy: AsyncPolicy, batch: ChunkBatch, cfg) -> dict[str, torch.Tensor]:
    C, L = batch.a.shape
    enc = policy.encode(batch.graphs)
    x_agg = enc.x_agg.view(C, L, -1)
    X_agg = enc.X_agg.view(C, L, -1)
    logits, _ = policy.actor_forward(batch.o, x_agg, batch.h_a0)
    values, _ = policy.critic_forward(batch.state, batch.o, X_agg, batch.h_c0)
    logp_all = F.log_softmax(logits, dim=-1)
    logp = logp_all.gather(-1, batch.a.unsqueeze(-1)).squeeze(-1)
    m = batch.mask
    denom = m.sum().clamp_min(1.0)
    ratio = torch.exp(logp - batch.logp)
    surr1 = ratio * batch.adv
    surr2 = torch.clamp(ratio, 1 - cfg.clip_ratio, 1 + cfg.clip_ratio) * batch.adv
    policy_loss = -(torch.min(surr1, surr2) * m).sum() / denom
    v_clip = batch.v_old + (values - batch.v_old).clamp(-cfg.value_clip, cfg.value_clip)
    vl = torch.max(huber(batch.ret - values, cfg.huber_delta), huber(batch.ret - v_clip, cfg.huber_delta))
    value_loss = (vl * m).sum() / denom
    entropy = (-(logp_all.exp() * logp_all).sum(-1) * m).sum() / denom
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    return {"total": total, "policy": policy_loss, "value": value_loss, "entropy": entropy}


def ppo_update(policy: AsyncPolicy, optimizer, buffers: list[AgentBuffer], value_stats: RunningStats, cfg,
               generator: torch.Generator) -> dict[str, float]:
    """Clipped policy/value update over chunked per-agent buffers."""
    buffers = [b for b in buffers if len(b)]
    if not buffers:
        raise UpdateRejected("no transitions to learn from")
    dtype = next(policy.parameters()).dtype
    targets = compute_targets(buffers, cfg)
    value_stats.update(np.concatenate([ret for _, ret in targets]))
    batch = build_chunks(buffers, targets, value_stats, cfg, dtype)
    params = [p for p in policy.parameters() if p.requires_grad]
    sums = {"policy": 0.0, "value": 0.0, "entropy": 0.0, "total": 0.0, "grad_norm": 0.0}
    steps = 0
    for _ in range(cfg.ppo_epochs):
        perm = torch.randperm(batch.n_chunks, generator=generator)
        for idx in torch.tensor_split(perm, cfg.minibatch_count):
            if idx.numel() == 0:
                continue
            losses = ppo_losses(policy, batch.select(idx), cfg)
            if not torch.isfinite(losses["total"]):
                raise UpdateRejected(f"non-finite loss {losses['total'].item()}")
            optimizer.zero_grad()
            losses["total"].backward()
            gn = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm)
            if not torch.isfinite(gn):
                raise UpdateRejected("non-finite gradient norm")
            optimizer.step()
            for k in ("policy", "value", "entropy", "total"):
                sums[k] += losses[k].item()
            sums["grad_norm"] += gn.item()
            steps += 1
    return {k: v / steps for k, v in sums.items()}


def make_optimizer(policy: AsyncPolicy, cfg) -> torch.optim.Adam:
    return torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate, eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


# checkpoints and the outer loop

@dataclass
class TrainState:
    policy: AsyncPolicy
    optimizer: torch.optim.Optimizer
    value_stats: RunningStats
    update: int = 0
    env_steps: int = 0


def new_train_state(cfg) -> TrainState:
    torch.manual_seed(cfg.seed)
    policy = build_policy(cfg, envs.obs_dim(cfg.env), envs.global_state_dim(cfg))
    return TrainState(policy, make_optimizer(policy, cfg), RunningStats())


def state_arrays(ts: TrainState) -> dict[str, np.ndarray]:
    arrays = model_arrays(ts.policy)
    arrays["value_stats"] = ts.value_stats.to_array()
    arrays["counters"] = np.array([ts.update, ts.env_steps], dtype=float)
    opt = ts.optimizer.state_dict()
    for pid, st in opt["state"].items():
        arrays[f"adam/{pid}/step"] = np.array([float(st["step"])])
        arrays[f"adam/{pid}/exp_avg"] = st["exp_avg"].double().numpy()
        arrays[f"adam/{pid}/exp_avg_sq"] = st["exp_avg_sq"].double().numpy()
    return arrays


def save_train_state(path, ts: TrainState) -> None:
    save_checkpoint(path, state_arrays(ts))


def load_train_state(path, cfg) -> TrainState:
    arrays = load_checkpoint(path)
    ts = new_train_state(cfg)
    load_model_arrays(ts.policy, arrays)
    if "value_stats" in arrays:
        ts.value_stats = RunningStats.from_array(arrays["value_stats"])
    if "counters" in arrays:
        ts.update, ts.env_steps = (int(x) for x in arrays["counters"])
    params = list(ts.policy.parameters())
    state = {}
    for pid, p in enumerate(params):
        key = f"adam/{pid}/exp_avg"
        if key in arrays:
            state[pid] = {
                "step": torch.tensor(arrays[f"adam/{pid}/step"][0]),
                "exp_avg": torch.as_tensor(arrays[key], dtype=p.dtype).reshape(p.shape),
                "exp_avg_sq": torch.as_tensor(arrays[f"adam/{pid}/exp_avg_sq"], dtype=p.dtype).reshape(p.shape),
            }
    if state:
        sd = ts.optimizer.state_dict()
        sd["state"] = state
        ts.optimizer.load_state_dict(sd)
    return ts


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def train(cfg, run_dir: str | Path, resume: str | Path | None = None, progress=None) -> TrainState:
    """Collect/update until ``total_env_steps``; writes ``train_log.csv`` and checkpoints in ``run_dir``."""
    torch.set_num_threads(1)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ts = load_train_state(resume, cfg) if resume else new_train_state(cfg)
    log_path = run_dir / "train_log.csv"
    fresh = not (resume and log_path.exists())
    with open(log_path, "w" if fresh else "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(TRAIN_LOG_HEADER)
        while ts.env_steps < cfg.total_env_steps:
            rngs = [episode_rng(cfg.seed, "train", ts.update, e) for e in range(cfg.num_envs)]
            sampler = torch.Generator().manual_seed(cfg.seed * 1_000_003 + ts.update)
            roll = collect(ts.policy, cfg, rngs, ts.value_stats, sampler=sampler)
            report = ppo_update(ts.policy, ts.optimizer, roll.buffers, ts.value_stats, cfg, sampler)
            ts.update += 1
            ts.env_steps += cfg.num_envs * cfg.episode_len
            ep_rewards = [sum(tr.r for tr in b.transitions) for b in roll.buffers if len(b)]
            row = [ts.update, ts.env_steps, float(np.mean(ep_rewards)), report["policy"], report["value"],
                   report["entropy"], report["grad_norm"]]
            writer.writerow([_fmt(x) for x in row])
            fh.flush()
            if progress is not None:
                progress(ts, roll, report)
            if ts.update % cfg.ckpt_interval == 0:
                save_train_state(run_dir / f"ckpt_{ts.update:06d}.bin", ts)
    save_train_state(run_dir / "final.bin", ts)
    return ts
