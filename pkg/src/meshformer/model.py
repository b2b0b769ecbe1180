"""Mesh transformer: message-passing encoder, GRU cluster pooling, coarse attention, residual decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .clustering import ClusterAssignment, ClusterGeometry, same_size_kmeans, cluster_geometry
from .mesh import NUM_NODE_TYPES, MeshFrame, NormStats, directed_edges

ATTENTION_MODES = ("full", "one_ring", "average", "gnn_coarse")
PE_EXPONENTS = tuple(range(-3, 4))


@dataclass
class ModelConfig:
    hidden: int = 128
    gnn_layers: int = 4
    token_width: int = 512
    attention_blocks: int = 4
    heads: int = 4
    pe_exponents: tuple[int, ...] = PE_EXPONENTS
    cluster_size: int = 10
    attention_mode: str = "full"
    pressure_channels: int = 1

    def __post_init__(self):
        self.pe_exponents = tuple(int(i) for i in self.pe_exponents)
        self.attention_mode = self.attention_mode.replace("-", "_")
        for name in ("hidden", "gnn_layers", "token_width", "attention_blocks", "heads", "cluster_size", "pressure_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.token_width % self.heads:
            raise ValueError(f"token_width {self.token_width} is not divisible by heads {self.heads}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {self.attention_mode!r}, expected one of {ATTENTION_MODES}")

    @property
    def pe_dim(self) -> int:
        return 4 * len(self.pe_exponents)

    @property
    def local_dim(self) -> int:
        return 2 * self.pe_dim

    @property
    def out_dim(self) -> int:
        return 2 + self.pressure_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pe_exponents"] = list(self.pe_exponents)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def positional_encoding(x, exponents: Sequence[int] = PE_EXPONENTS):
    """Per band i: cos(2^i pi x0), cos(2^i pi x1), sin(2^i pi x0), sin(2^i pi x1).

    Works on numpy arrays or torch tensors of shape (..., 2).
    """
    if isinstance(x, torch.Tensor):
        freqs = torch.tensor([2.0**i * math.pi for i in exponents], dtype=x.dtype, device=x.device)
        ang = x[..., None, :] * freqs[:, None]  # (..., bands, 2)
        out = torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)
        return out.reshape(*x.shape[:-1], 4 * len(exponents))
    x = np.asarray(x, dtype=np.float64)
    freqs = np.array([2.0**i * np.pi for i in exponents])
    ang = x[..., None, :] * freqs[:, None]
    out = np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)
    return out.reshape(*x.shape[:-1], 4 * len(exponents))


# --------------------------------------------------------------------------- prepared graph inputs


@dataclass
class GraphInputs:
    """Geometry-only tensors of one frame, reusable across forward passes."""

    num_nodes: int
    node_onehot: torch.Tensor  # (N, 4)
    local_enc: torch.Tensor  # (N, 2 * pe_dim)
    recv: torch.Tensor  # (2E,)
    send: torch.Tensor  # (2E,)
    edge_geom: torch.Tensor  # (2E, 3): x_i - x_j, |x_i - x_j|
    labels: np.ndarray  # (N,)
    num_clusters: int
    bary_enc: torch.Tensor  # (K, pe_dim)
    adjacency: torch.Tensor  # (K, K) bool
    coarse_recv: torch.Tensor
    coarse_send: torch.Tensor
    coarse_geom: torch.Tensor
    positions: np.ndarray = field(repr=False, default=None)


def prepare_inputs(
    frame: MeshFrame,
    assignment: ClusterAssignment,
    geometry: ClusterGeometry | None = None,
    exponents: Sequence[int] = PE_EXPONENTS,
    dtype=torch.float64,
) -> GraphInputs:
    geometry = geometry or cluster_geometry(frame, assignment)
    pos = np.asarray(frame.positions, dtype=np.float64)
    labels = assignment.assignment
    bary = np.asarray(geometry.barycenters, dtype=np.float64)
    local = np.concatenate([positional_encoding(pos, exponents), positional_encoding(bary[labels] - pos, exponents)], 1)
    onehot = np.eye(NUM_NODE_TYPES)[frame.node_types.astype(np.int64)]
    recv, send = directed_edges(frame.edges)
    rel = pos[recv] - pos[send]
    edge_geom = np.concatenate([rel, np.linalg.norm(rel, axis=1, keepdims=True)], 1)
    adj = np.asarray(geometry.adjacency, dtype=bool)
    cr, cs = np.nonzero(adj & ~np.eye(len(adj), dtype=bool))
    crel = bary[cr] - bary[cs]
    coarse_geom = np.concatenate([crel, np.linalg.norm(crel, axis=1, keepdims=True)], 1)

    def t(a):
        return torch.as_tensor(np.asarray(a), dtype=dtype)

    def ti(a):
        return torch.as_tensor(np.asarray(a, dtype=np.int64))

    return GraphInputs(
        num_nodes=len(pos),
        node_onehot=t(onehot),
        local_enc=t(local),
        recv=ti(recv),
        send=ti(send),
        edge_geom=t(edge_geom),
        labels=np.asarray(labels, dtype=np.int64),
        num_clusters=int(assignment.num_clusters),
        bary_enc=t(positional_encoding(bary, exponents)),
        adjacency=torch.as_tensor(adj),
        coarse_recv=ti(cr),
        coarse_send=ti(cs),
        coarse_geom=t(coarse_geom.reshape(-1, 3)),
        positions=pos,
    )


def pooling_order(labels: np.ndarray, num_clusters: int, order_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Members of every cluster in a seeded random order, padded with -1: (K, S_max), counts."""
    labels = np.asarray(labels, dtype=np.int64)
    keys = np.random.default_rng(order_seed).random(len(labels))
    order = np.lexsort((keys, labels))
    counts = np.bincount(labels, minlength=num_clusters)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(len(labels)) - np.repeat(starts, counts)
    members = np.full((num_clusters, max(int(counts.max()), 1)), -1, dtype=np.int64)
    members[labels[order], slot] = order
    return members, counts


# --------------------------------------------------------------------------- building blocks


class MLP(nn.Sequential):
    """Linear layers with an activation between them, optionally followed by LayerNorm."""

    def __init__(self, dims: Sequence[int], activation=nn.ReLU, layer_norm: bool = False):
        layers: list[nn.Module] = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers.append(activation())
        if layer_norm:
            layers.append(nn.LayerNorm(dims[-1]))
        super().__init__(*layers)

    @property
    def first(self) -> nn.Linear:
        return self[0]

    @property
    def last_linear(self) -> nn.Linear:
        return [m for m in self if isinstance(m, nn.Linear)][-1]

    def forward_from_hidden(self, z: torch.Tensor) -> torch.Tensor:
        """Run everything after the first Linear, given its pre-activation output."""
        for m in list(self)[1:]:
            z = m(z)
        return z


class GraphLayer(nn.Module):
    """Residual message passing: edges see both endpoints, nodes sum incoming messages.

    The first Linear of the edge MLP acts on ``[h_recv, h_send, e]``; it is
    evaluated per node and gathered, which is algebraically the same map.
    """

    def __init__(self, node_in: int, edge_in: int, node_out: int, edge_out: int, hidden: int):
        super().__init__()
        self.node_in, self.edge_in = node_in, edge_in
        self.edge_mlp = MLP([2 * node_in + edge_in, hidden, hidden, edge_out], layer_norm=True)
        self.node_mlp = MLP([node_in + edge_out, hidden, hidden, node_out], layer_norm=True)

    def messages(self, h, e, recv, send):
        w = self.edge_mlp.first.weight
        b = self.edge_mlp.first.bias
        n = self.node_in
        z = (h @ w[:, :n].T)[recv] + (h @ w[:, n:2 * n].T)[send] + e @ w[:, 2 * n:].T + b
        return self.edge_mlp.forward_from_hidden(z)

    def forward(self, h, e, recv, send, num_nodes):
        eps = self.messages(h, e, recv, send)
        agg = torch.zeros(num_nodes, eps.shape[1], dtype=eps.dtype, device=eps.device).index_add_(0, recv, eps)
        return self.node_mlp(torch.cat([h, agg], dim=1)), eps


class GRUPool(nn.Module):
    """GRU over each cluster's members, batched across clusters; padded slots keep the state."""

    def __init__(self, input_size: int, width: int):
        super().__init__()
        self.width = width
        self.weight_ih = nn.Parameter(torch.empty(3 * width, input_size))
        self.weight_hh = nn.Parameter(torch.empty(3 * width, width))
        self.bias_ih = nn.Parameter(torch.zeros(3 * width))
        self.bias_hh = nn.Parameter(torch.zeros(3 * width))

    def forward(self, x: torch.Tensor, members: np.ndarray, counts: np.ndarray) -> torch.Tensor:
        k, steps = members.shape
        gi_all = x @ self.weight_ih.T + self.bias_ih
        h = torch.zeros(k, self.width, dtype=x.dtype, device=x.device)
        counts_t = torch.as_tensor(counts)
        for n in range(steps):
            active = counts_t > n
            idx = torch.as_tensor(np.where(members[:, n] >= 0, members[:, n], 0))
            gi = gi_all[idx]
            gh = h @ self.weight_hh.T + self.bias_hh
            i_r, i_z, i_n = gi.chunk(3, dim=1)
            h_r, h_z, h_n = gh.chunk(3, dim=1)
            r = torch.sigmoid(i_r + h_r)
            z = torch.sigmoid(i_z + h_z)
            cand = torch.tanh(i_n + r * h_n)
            h_new = (1 - z) * cand + z * h
            h = torch.where(active[:, None], h_new, h)
        return h


class AttentionBlock(nn.Module):
    """Pre-LN block: w1 = LN(w)|F(x̄); w3 = w + Linear(mix(w1)); out = w3 + MLP(LN(w3))."""

    def __init__(self, width: int, heads: int, pe_dim: int, mode: str):
        super().__init__()
        self.width, self.heads, self.mode = width, heads, mode
        self.ln1 = nn.LayerNorm(width)
        d_in = width + pe_dim
        if mode == "gnn_coarse":
            self.coarse = GraphLayer(d_in, 3, width, width, width)
        else:
            # average mode keeps q/k so checkpoints share one layout; they receive no gradient
            self.q = nn.Linear(d_in, width)
            self.k = nn.Linear(d_in, width)
            self.v = nn.Linear(d_in, width)
        self.out = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = MLP([width, width, width])

    def mix(self, w1: torch.Tensor, inputs: GraphInputs, flops: dict | None):
        k_tok, width, heads = w1.shape[0], self.width, self.heads
        d_in = w1.shape[1]
        if self.mode == "gnn_coarse":
            out, _ = self.coarse(w1, inputs.coarse_geom.to(w1.dtype), inputs.coarse_recv, inputs.coarse_send, k_tok)
            _count(flops, "coarse_gnn", _graph_layer_flops(self.coarse, k_tok, len(inputs.coarse_recv)))
            return out, None
        dh = width // heads
        v = self.v(w1).reshape(k_tok, heads, dh).transpose(0, 1)  # (H, K, dh)
        _count(flops, "projections", k_tok * d_in * width)
        if self.mode == "average":
            attn = torch.full((heads, k_tok, k_tok), 1.0 / k_tok, dtype=w1.dtype, device=w1.device)
        else:
            q = self.q(w1).reshape(k_tok, heads, dh).transpose(0, 1)
            kk = self.k(w1).reshape(k_tok, heads, dh).transpose(0, 1)
            _count(flops, "projections", 2 * k_tok * d_in * width)
            logits = q @ kk.transpose(1, 2) / math.sqrt(dh)
            _count(flops, "scores", heads * k_tok * k_tok * dh)
            if self.mode == "one_ring":
                logits = logits.masked_fill(~inputs.adjacency[None], float("-inf"))
            attn = torch.softmax(logits, dim=-1)
        mixed = attn @ v
        _count(flops, "weighted_sum", heads * k_tok * k_tok * dh)
        return mixed.transpose(0, 1).reshape(k_tok, width), attn

    def forward(self, w, bary_enc, inputs: GraphInputs, flops: dict | None = None):
        k_tok = w.shape[0]
        w1 = torch.cat([self.ln1(w), bary_enc], dim=1)
        w2, attn = self.mix(w1, inputs, flops)
        w3 = w + self.out(w2)
        w6 = w3 + self.mlp(self.ln2(w3))
        _count(flops, "output_linear", k_tok * self.width * self.width)
        _count(flops, "mlp", 2 * k_tok * self.width * self.width)
        return w6, attn


def _count(flops: dict | None, key: str, value: int):
    if flops is not None:
        flops[key] = flops.get(key, 0) + int(value)


def _graph_layer_flops(layer: GraphLayer, n_nodes: int, n_edges: int) -> int:
    per_edge = sum(m.in_features * m.out_features for m in layer.edge_mlp if isinstance(m, nn.Linear))
    per_node = sum(m.in_features * m.out_features for m in layer.node_mlp if isinstance(m, nn.Linear))
    return per_edge * n_edges + per_node * n_nodes


# --------------------------------------------------------------------------- the model


class MeshTransformer(nn.Module):
    def __init__(self, config: ModelConfig, norm: NormStats | None = None):
        super().__init__()
        c = self.config = config
        hid, width, local = c.hidden, c.token_width, c.local_dim
        self.node_encoder = MLP([2 + c.pressure_channels + NUM_NODE_TYPES, hid, hid])
        self.edge_encoder = MLP([3, hid, hid])
        self.processor = nn.ModuleList(GraphLayer(hid + local, hid, hid, hid, hid) for _ in range(c.gnn_layers))
        self.pool_gru = GRUPool(hid + local, width)
        self.cluster_mlp = MLP([width, width, width])
        self.blocks = nn.ModuleList(
            AttentionBlock(width, c.heads, c.pe_dim, c.attention_mode) for _ in range(c.attention_blocks)
        )
        self.final_norm = nn.LayerNorm(width)
        self.decoder_gnn = GraphLayer(hid + width + local, hid, hid, hid, hid)
        self.head = MLP([hid, hid, hid, c.out_dim], activation=nn.Tanh)
        self.norm = norm or NormStats.identity(c.pressure_channels)
        self.last_flops: dict = {}

    @property
    def dtype(self):
        return self.head.last_linear.weight.dtype

    # normalization at the model boundary
    def _norm_tensors(self, dtype):
        n = self.norm
        return (
            torch.as_tensor(np.asarray(n.v_mean), dtype=dtype),
            torch.as_tensor(float(n.v_std), dtype=dtype),
            torch.as_tensor(np.asarray(n.p_mean), dtype=dtype),
            torch.as_tensor(float(n.p_std), dtype=dtype),
        )

    def normalize(self, v, p):
        vm, vs, pm, ps = self._norm_tensors(v.dtype)
        return (v - vm) / vs, (p - pm) / ps

    def encode(self, inputs: GraphInputs, v_norm, p_norm):
        """Node/edge embeddings after the residual message-passing stack."""
        x = torch.cat([v_norm, p_norm, inputs.node_onehot.to(v_norm.dtype)], dim=1)
        eta = self.node_encoder(x)
        e = self.edge_encoder(inputs.edge_geom.to(v_norm.dtype))
        f = inputs.local_enc.to(v_norm.dtype)
        for layer in self.processor:
            h = torch.cat([eta, f], dim=1)
            d_eta, eps = layer(h, e, inputs.recv, inputs.send, inputs.num_nodes)
            e = e + eps
            eta = eta + d_eta
        return eta, e

    def pool(self, eta, inputs: GraphInputs, order_seed: int):
        members, counts = pooling_order(inputs.labels, inputs.num_clusters, order_seed)
        x = torch.cat([eta, inputs.local_enc.to(eta.dtype)], dim=1)
        state = self.pool_gru(x, members, counts)
        return self.cluster_mlp(state)

    def attend(self, w, inputs: GraphInputs, flops: dict | None = None):
        records = []
        bary = inputs.bary_enc.to(w.dtype)
        for block in self.blocks:
            w, attn = block(w, bary, inputs, flops)
            if attn is not None:
                records.append(attn)
        return self.final_norm(w), records

    def decode(self, eta, e, w, inputs: GraphInputs):
        """Normalized per-node increments (N, 2 + Pc)."""
        labels = torch.as_tensor(inputs.labels)
        h = torch.cat([eta, w[labels], inputs.local_enc.to(eta.dtype)], dim=1)
        d_eta, _ = self.decoder_gnn(h, e, inputs.recv, inputs.send, inputs.num_nodes)
        return self.head(eta + d_eta)

    def forward(self, inputs: GraphInputs, velocity, pressure, order_seed: int = 0, flops: dict | None = None):
        """One step ahead on the same geometry, in physical units.

        Returns ``(velocity_next, pressure_next, delta, attention)`` where
        ``delta`` holds the normalized increments.
        """
        v_n, p_n = self.normalize(velocity, pressure)
        eta, e = self.encode(inputs, v_n, p_n)
        w = self.pool(eta, inputs, order_seed)
        w, records = self.attend(w, inputs, flops)
        delta = self.decode(eta, e, w, inputs)
        _, vs, _, ps = self._norm_tensors(velocity.dtype)
        v_next = velocity + delta[:, :2] * vs
        p_next = pressure + delta[:, 2:] * ps
        return v_next, p_next, delta, records


# --------------------------------------------------------------------------- parameters


def init_parameters(config: ModelConfig, seed: int = 0, norm: NormStats | None = None,
                    dtype=torch.float64, zero_head: bool = True) -> MeshTransformer:
    """Weights uniform in +-sqrt(1/fan_in), biases zero, LayerNorm identity.

    With ``zero_head`` the last decoder layer is zero so the fresh model
    forecasts persistence.
    """
    model = MeshTransformer(config, norm)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if isinstance_ln(model, name):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias") or name.endswith("bias_ih") or name.endswith("bias_hh"):
                p.zero_()
            else:
                bound = math.sqrt(1.0 / p.shape[1])
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
        if zero_head:
            model.head.last_linear.weight.zero_()
            model.head.last_linear.bias.zero_()
    return model.to(dtype)


def isinstance_ln(model: nn.Module, param_name: str) -> bool:
    owner = model.get_submodule(param_name.rsplit(".", 1)[0])
    return isinstance(owner, nn.LayerNorm)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def attention_stage_flops(model: MeshTransformer, inputs: GraphInputs) -> dict:
    """Multiply-adds counted while running the attention stage on random tokens."""
    flops: dict = {}
    with torch.no_grad():
        w = torch.zeros(inputs.num_clusters, model.config.token_width, dtype=model.dtype)
        model.attend(w, inputs, flops)
    flops["total"] = sum(v for k, v in flops.items())
    return flops


# --------------------------------------------------------------------------- numpy-facing operations


def _fields(frame: MeshFrame, dtype):
    return (
        torch.as_tensor(np.asarray(frame.velocity), dtype=dtype),
        torch.as_tensor(np.asarray(frame.pressure), dtype=dtype),
    )


def forward_step(model: MeshTransformer, frame: MeshFrame, assignment: ClusterAssignment,
                 geometry: ClusterGeometry | None = None, order_seed: int = 0):
    """Predict the next fields on the same geometry.

    Returns ``(frame_next, info)``; ``info`` carries the attention record and
    attention-stage FLOP counts.
    """
    dtype = model.dtype
    inputs = prepare_inputs(frame, assignment, geometry, model.config.pe_exponents, dtype)
    v, p = _fields(frame, dtype)
    flops: dict = {}
    with torch.no_grad():
        v1, p1, delta, records = model(inputs, v, p, order_seed, flops)
    flops["total"] = sum(flops.values())
    model.last_flops = flops
    out = frame.with_fields(v1.numpy().astype(frame.velocity.dtype, copy=False),
                            p1.numpy().astype(frame.pressure.dtype, copy=False))
    info = {"attention": [r.numpy() for r in records], "flops": flops, "delta": delta.numpy()}
    return out, info


def nearest_node_map(src_positions, dst_positions) -> np.ndarray:
    """Index of the nearest source node for every destination node; ties go to the lower index."""
    from scipy.spatial import cKDTree

    src = np.asarray(src_positions, dtype=np.float64)
    dst = np.asarray(dst_positions, dtype=np.float64)
    if src.shape == dst.shape and np.array_equal(src, dst):
        return np.arange(len(dst))
    k = min(2, len(src))
    dist, idx = cKDTree(src).query(dst, k=k)
    if k == 1:
        return np.asarray(idx).reshape(-1)
    tie = dist[:, 0] == dist[:, 1]
    best = idx[:, 0].copy()
    best[tie] = np.minimum(idx[tie, 0], idx[tie, 1])
    return best


def transfer_fields(frame: MeshFrame, geometry: MeshFrame) -> MeshFrame:
    """Carry ``frame``'s fields onto ``geometry`` by nearest-node lookup."""
    m = nearest_node_map(frame.positions, geometry.positions)
    return MeshFrame(geometry.positions, geometry.node_types, frame.velocity[m], frame.pressure[m], geometry.edges)


def step_seed(order_seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(order_seed), int(step)]).generate_state(1)[0])


def rollout(model: MeshTransformer, frame: MeshFrame, future: Sequence[MeshFrame], h: int,
            clusters: Sequence[tuple[ClusterAssignment, ClusterGeometry]] | None = None,
            order_seed: int = 0, cluster_seed: int = 0, return_info: bool = False):
    """Autoregressive forecast over ``h`` steps.

    ``future[k]`` supplies the geometry (positions, node types, edges) of step
    ``k + 1``; its fields are ignored. ``clusters[k]`` is the clustering of the
    geometry the k-th prediction runs on (``frame`` for k = 0); missing entries
    are computed on the fly.
    """
    if h < 1:
        raise ValueError("horizon must be >= 1")
    if len(future) < h:
        raise ValueError(f"need {h} future geometries, got {len(future)}")
    if future and future[0].pressure_channels != frame.pressure_channels and future[0].pressure.size:
        raise ValueError("pressure channel count differs between frame and geometry")
    current = frame
    preds, infos = [], []
    for k in range(h):
        if clusters is not None and k < len(clusters):
            assignment, geometry = clusters[k]
        else:
            assignment = same_size_kmeans(current.positions, model.config.cluster_size, cluster_seed)
            geometry = None
        nxt, info = forward_step(model, current, assignment, geometry, step_seed(order_seed, k))
        current = transfer_fields(nxt, future[k])
        preds.append(current)
        infos.append(info)
    return (preds, infos) if return_info else preds
