"""Learnable computation: entity embedding, graph transformer, actor, critic.

Graphs arrive as padded dense batches (see :class:`asyncomarl.commgraph.DenseGraph`):
``adj[b, i, j]`` is true when node ``j`` sends to node ``i``. Each graph
transformer layer computes

    x_i' = W1 x_i + mean_h sum_{j in N(i)} alpha^h_ij W2^h x_j
    alpha^h_ij = softmax_j( <Wq^h x_i, Wk^h x_j + We^h e_ij> / sqrt(d) )

with the softmax taken over in-neighbours only, so an isolated node maps to
``W1 x_i`` exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .envs import KINDS

N_KINDS = len(KINDS)
NODE_FEATURES = 6


class CheckpointError(ValueError):
    pass


def _masked_softmax(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``mask``; fully masked rows give zeros."""
    neg = torch.finfo(scores.dtype).min
    s = scores.masked_fill(~mask, neg)
    m = s.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(s - m) * mask
    z = e.sum(dim=-1, keepdim=True)
    return e / torch.where(z > 0, z, torch.ones_like(z))


class GraphTransformerLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.out_dim = out_dim
        self.root = nn.Linear(in_dim, out_dim, bias=False)  # W1
        self.query = nn.Linear(in_dim, heads * out_dim, bias=False)
        self.key = nn.Linear(in_dim, heads * out_dim, bias=False)
        self.value = nn.Linear(in_dim, heads * out_dim, bias=False)  # W2, one block per head
        self.edge = nn.Linear(1, heads * out_dim, bias=False)

    def forward(self, x: torch.Tensor, adj: torch.Tensor, dist: torch.Tensor):
        """Returns updated node states ``(B, N, out)`` and attention ``(B, heads, N, N)``."""
        B, N, _ = x.shape
        H, d = self.heads, self.out_dim
        q = self.query(x).view(B, N, H, d).transpose(1, 2)
        k = self.key(x).view(B, N, H, d).transpose(1, 2)
        v = self.value(x).view(B, N, H, d).transpose(1, 2)
        w_e = self.edge.weight.view(H, d)
        # <q_i, W_e e_ij> = e_ij * <q_i, w_e> since edge features are scalar distances
        qe = torch.einsum("bhnd,hd->bhn", q, w_e)
        scores = (q @ k.transpose(-1, -2) + dist.unsqueeze(1) * qe.unsqueeze(-1)) / math.sqrt(d)
        alpha = _masked_softmax(scores, adj.unsqueeze(1))
        agg = (alpha @ v).mean(dim=1)
        return self.root(x) + agg, alpha


@dataclass
class Encoding:
    x_agg: torch.Tensor  # (B, hidden): ego node after layer 2
    X_agg: torch.Tensor  # (B, hidden): mean over agent nodes
    alpha: list[torch.Tensor]  # per layer (B, heads, N, N)


class GraphEncoder(nn.Module):
    def __init__(self, hidden: int, heads: int, embed_dim: int):
        super().__init__()
        self.embed = nn.Embedding(N_KINDS, embed_dim)
        self.layer1 = GraphTransformerLayer(NODE_FEATURES + embed_dim, hidden, heads)
        self.layer2 = GraphTransformerLayer(hidden, hidden, heads)

    def embed_entity(self, kind: str) -> torch.Tensor:
        if kind not in KINDS:
            raise KeyError(f"unknown entity kind {kind!r}")
        return self.embed.weight[KINDS.index(kind)]

    def node_states(self, feats, kinds, adj, dist):
        x0 = torch.cat([feats, self.embed(kinds)], dim=-1)
        x1, a1 = self.layer1(x0, adj, dist)
        x2, a2 = self.layer2(torch.relu(x1), adj, dist)
        return x2, [a1, a2]

    def forward(self, feats, kinds, adj, dist, agent_mask, ego) -> Encoding:
        x2, alphas = self.node_states(feats, kinds, adj, dist)
        x_agg = x2[torch.arange(x2.shape[0]), ego]
        w = agent_mask.to(x2.dtype).unsqueeze(-1)
        X_agg = (x2 * w).sum(dim=1) / w.sum(dim=1).clamp_min(1.0)
        return Encoding(x_agg, X_agg, alphas)


class RecurrentHead(nn.Module):
    """Two-layer ReLU MLP, a GRU over the agent's own action sequence, and a linear output."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.gru = nn.GRU(hidden, hidden, batch_first=True)
        self.out = nn.Linear(hidden, out_dim)

    def forward(self, x: torch.Tensor, h: torch.Tensor):
        """``x``: (B, L, in), ``h``: (B, hidden) -> outputs (B, L, out), final state (B, hidden)."""
        z = torch.relu(self.fc2(torch.relu(self.fc1(x))))
        y, h_out = self.gru(z, h.unsqueeze(0).contiguous())
        return self.out(y), h_out.squeeze(0)


class AsyncPolicy(nn.Module):
    """Shared graph encoder feeding a decentralised actor and a centralised critic."""

    def __init__(self, obs_dim: int, state_dim: int, hidden: int = 64, heads: int = 3, embed_dim: int = 8,
                 n_actions: int = 5, use_graph: bool = True):
        super().__init__()
        self.obs_dim, self.state_dim, self.hidden = obs_dim, state_dim, hidden
        self.n_actions = n_actions
        self.use_graph = use_graph
        self.encoder = GraphEncoder(hidden, heads, embed_dim)
        self.actor = RecurrentHead(obs_dim + hidden, hidden, n_actions)
        self.critic = RecurrentHead(state_dim + obs_dim + hidden, hidden, 1)

    def encode(self, g) -> Encoding:
        enc = self.encoder(g["feats"], g["kinds"], g["adj"], g["dist"], g["agent_mask"], g["ego"])
        if not self.use_graph:
            zero = torch.zeros_like(enc.x_agg)
            return Encoding(zero, zero, enc.alpha)
        return enc

    def actor_forward(self, o, x_agg, h):
        """Logits over actions for (B, L) sequences and the final recurrent state."""
        if o.shape[-1] != self.obs_dim:
            raise ValueError(f"observation width {o.shape[-1]} != {self.obs_dim}")
        return self.actor(torch.cat([o, x_agg], dim=-1), h)

    def critic_forward(self, state, o, X_agg, h):
        if state.shape[-1] != self.state_dim:
            raise ValueError(f"state width {state.shape[-1]} != {self.state_dim}")
        v, h_out = self.critic(torch.cat([state, o, X_agg], dim=-1), h)
        return v.squeeze(-1), h_out


def orthogonal_init(model: nn.Module, head_gain: float = 0.01) -> None:
    """Orthogonal weights, zero biases; the policy output layer is scaled by ``head_gain``."""
    for name, p in model.named_parameters():
        if p.dim() >= 2:
            gain = head_gain if name == "actor.out.weight" else 1.0
            nn.init.orthogonal_(p, gain=gain)
        else:
            nn.init.zeros_(p)


def build_policy(cfg, obs_dim: int, state_dim: int, dtype=torch.float32) -> AsyncPolicy:
    model = AsyncPolicy(obs_dim, state_dim, cfg.hidden_size, cfg.n_heads, cfg.embed_dim,
                        use_graph=cfg.ablation == "full")
    orthogonal_init(model)
    return model.to(dtype)


def graph_batch(dense_graphs, dtype=torch.float32) -> dict[str, torch.Tensor]:
    """Stack :class:`DenseGraph` records into tensors for :meth:`AsyncPolicy.encode`."""
    return {
        "feats": torch.as_tensor(np.stack([g.features for g in dense_graphs]), dtype=dtype),
        "kinds": torch.as_tensor(np.stack([g.kinds for g in dense_graphs])),
        "adj": torch.as_tensor(np.stack([g.adj for g in dense_graphs])),
        "dist": torch.as_tensor(np.stack([g.dist for g in dense_graphs]), dtype=dtype),
        "agent_mask": torch.as_tensor(np.stack([g.agent_mask for g in dense_graphs])),
        "ego": torch.as_tensor(np.array([g.ego for g in dense_graphs], dtype=np.int64)),
    }


def grad_check(loss_fn, params: list[torch.Tensor], eps: float = 1e-6, grad_fn=None) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``loss_fn()`` must return a scalar tensor built from ``params``. The gap
    for each entry is ``|g - g_fd| / max(|g|, |g_fd|, 1e-6)``. ``grad_fn``
    substitutes the analytic gradients, which lets the harness itself be tested.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    if grad_fn is None:
        for p in params:
            p.grad = None
        loss_fn().backward()
        analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    else:
        analytic = [g.detach().clone() for g in grad_fn()]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + eps
                up = loss_fn().item()
                flat[k] = orig - eps
                down = loss_fn().item()
                flat[k] = orig
                fd = (up - down) / (2 * eps)
                a = gflat[k].item()
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    return worst


# checkpoints

MAGIC = b"ACMARLCK"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays.

    Layout: 8-byte magic, u32 format version, u32 array count, then per array
    (u16 name length, utf-8 name, u8 ndim, u64 dims...), then every array's data
    as row-major little-endian float64 in table order.
    """
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(arrays))
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        key = name.encode("utf-8")
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
        blobs.append(a.tobytes(order="C"))
    for b in blobs:
        out += b
    Path(path).write_bytes(bytes(out))


def _parse_checkpoint(raw: bytes, path):
    version, count = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 16
    table = []
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        table.append((name, shape))
    arrays = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return arrays, pos


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    try:
        arrays, pos = _parse_checkpoint(raw, path)
    except CheckpointError:
        raise
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return arrays


def model_arrays(model: nn.Module, prefix: str = "model/") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().double().numpy() for k, v in model.state_dict().items()}


def load_model_arrays(model: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "model/") -> None:
    state = model.state_dict()
    for k, v in state.items():
        key = prefix + k
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks {key}")
        if tuple(arrays[key].shape) != tuple(v.shape):
            raise CheckpointError(f"{key}: checkpoint shape {arrays[key].shape} != model shape {tuple(v.shape)}")
        state[k] = torch.as_tensor(arrays[key], dtype=v.dtype)
    extra = [k for k in arrays if k.startswith(prefix) and k[len(prefix):] not in state]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected entries {extra[:3]}")
    model.load_state_dict(state)
