"""Interaction-graph context encoder.

Two branches produce one context token per agent:

* an implicit branch: temporal self-attention over each agent's own history,
  then one social self-attention layer across the agents of a window;
* an explicit branch: field-of-view Top-K neighbour graphs, sigmoid-gated edge
  messages per frame, temporal gated pooling and an interaction strength.

A strength-modulated gated residual merges them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .core import TrajectoryWindow, history_velocities
from .nn import Params, cat, init_linear, init_mlp2, linear, mlp2, param
from .options import opt


@dataclass(frozen=True)
class FovConfig:
    theta_fov: float = opt(120.0, "deg", "visibility threshold on the angle between velocity and neighbour offset")
    window: int = opt(0, "steps", "history frames accumulated for neighbour selection (0 = all observed)")
    top_k: int = opt(4, "count", "neighbour budget per agent")
    eps: float = opt(1e-6, "m", "stabiliser for zero speed / distance")

    def __post_init__(self):
        if not 0 < self.theta_fov <= 180:
            raise ValueError("theta_fov must be in (0, 180]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.window < 0:
            raise ValueError("window must be >= 0")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = opt(64, "-", "embedding width D")
    fov: FovConfig = opt(unit="-", help="neighbour selection", factory=FovConfig)
    pos_scale: float = opt(0.25, "1/m", "scale applied to positions before the input layers")
    vel_scale: float = opt(2.0, "step/m", "scale applied to per-step displacements")
    ln_eps: float = opt(1e-5, "-", "layer-norm epsilon")
    lambda_init: float = opt(1.0, "-", "initial residual scale lambda")

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")


N_NODE_FEATS = 6   # rel. position, velocity, absolute position
N_EDGE_FEATS = 6   # dp(2) dv(2) |dp| cos


class InteractionGraph(NamedTuple):
    neighbors: list            # per agent: array of neighbour indices, best first
    visibility: np.ndarray     # (A, A, W) 0/1, for the selection frames
    edge_feats: np.ndarray     # (A, A, W, 6) raw edge vectors
    selection_scores: np.ndarray  # (A, A)
    frames: np.ndarray         # history frame indices used (length W)


class ContextToken(NamedTuple):
    token: np.ndarray
    strength: float
    soc_context: np.ndarray
    phys_feature: np.ndarray


def init_params(cfg: EncoderConfig, rng: np.random.Generator, t_hist: int = 8) -> Params:
    D = cfg.dim
    p: Params = {}
    init_linear(p, "embed", N_NODE_FEATS, D, rng)
    p["pos_emb"] = param(rng.normal(0.0, 0.1, size=(t_hist, D)))
    for name in ("tq", "tk", "tv", "to", "sq", "sk", "sv", "so"):
        init_linear(p, name, D, D, rng)
    init_mlp2(p, "edge", N_EDGE_FEATS, D, D, rng)
    init_mlp2(p, "spa", 3 * D, D, D, rng)
    init_linear(p, "wv", D, D, rng, bias=False)
    init_linear(p, "we", D, D, rng, bias=False)
    init_linear(p, "tgate", D, D, rng)
    init_mlp2(p, "fuse", 2 * D + 1, D, D, rng)
    init_linear(p, "phy", D, D, rng, bias=False)
    p["ln.g"] = param(np.ones(D))
    p["ln.b"] = param(np.zeros(D))
    p["lambda"] = param(np.array(cfg.lambda_init))
    return p


# --- geometry (no parameters) -------------------------------------------------

def angle_between(a, b, eps: float = 1e-12) -> np.ndarray:
    """Angle in degrees between 2-D vectors (broadcasting); nan where either is ~0."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (a * b).sum(-1) / (na * nb)
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return np.where((na > eps) & (nb > eps), ang, np.nan)


def visibility_mask(velocity, rel_pos, cfg: FovConfig) -> np.ndarray:
    """1 where the neighbour offset lies within theta_fov of the heading.

    Zero velocity gives 0 (no heading); a coincident neighbour counts as visible.
    """
    v = np.asarray(velocity, float)
    d = np.asarray(rel_pos, float)
    moving = np.linalg.norm(v, axis=-1) > cfg.eps
    coincident = np.linalg.norm(d, axis=-1) <= cfg.eps
    ang = angle_between(v, d)
    inside = np.where(np.isnan(ang), False, ang <= cfg.theta_fov + 1e-9)
    return (moving & (inside | coincident)).astype(np.int64)


def edge_features(pos_i, vel_i, pos_j, vel_j, eps: float = 1e-6) -> np.ndarray:
    """Raw edge vector [dp, dv, |dp|, cos(v_i, dp)] with dp = p_j - p_i."""
    dp = np.asarray(pos_j, float) - np.asarray(pos_i, float)
    dv = np.asarray(vel_j, float) - np.asarray(vel_i, float)
    vi = np.asarray(vel_i, float)
    dist = np.linalg.norm(dp, axis=-1)
    speed = np.linalg.norm(vi, axis=-1)
    valid = (speed > eps) & (dist > eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(valid, (vi * dp).sum(-1) / (speed * dist), 0.0)
    return np.concatenate([dp, dv, dist[..., None], cos[..., None]], axis=-1)


def selection_frames(t_hist: int, cfg: FovConfig) -> np.ndarray:
    w = t_hist if cfg.window == 0 else min(cfg.window, t_hist)
    return np.arange(t_hist - w, t_hist)


def select_neighbors(window: TrajectoryWindow, cfg: FovConfig) -> InteractionGraph:
    pos = window.history
    vel = history_velocities(pos)
    frames = selection_frames(window.t_hist, cfg)
    A = window.n_agents
    p = pos[:, frames]                              # (A, W, 2)
    v = vel[:, frames]
    dp = p[None, :, :, :] - p[:, None, :, :]        # [i, j] = p_j - p_i
    vis = visibility_mask(v[:, None, :, :], dp, cfg)
    idx = np.arange(A)
    vis[idx, idx] = 0
    dist = np.linalg.norm(dp, axis=-1)
    scores = (vis * (1.0 / (dist + cfg.eps))).sum(axis=-1)
    neighbors = []
    for i in range(A):
        cand = [j for j in range(A) if j != i and scores[i, j] > 0]
        cand.sort(key=lambda j: (-scores[i, j], j))
        neighbors.append(np.array(cand[:cfg.top_k], dtype=np.int64))
    feats = edge_features(p[:, None], v[:, None], p[None, :], v[None, :], cfg.eps)
    return InteractionGraph(neighbors, vis, feats, scores, frames)


def node_features(window: TrajectoryWindow, cfg: EncoderConfig) -> np.ndarray:
    pos = window.history
    vel = history_velocities(pos)
    rel = pos - window.origin[:, None, :]
    return np.concatenate([rel * cfg.pos_scale, vel * cfg.vel_scale, pos * cfg.pos_scale], axis=-1)


class PreparedWindow(NamedTuple):
    node_feats: np.ndarray     # (A, T, 6)
    graph: InteractionGraph
    edge_dst: np.ndarray       # (E,) agent receiving the message
    edge_src: np.ndarray       # (E,) neighbour
    edge_frame: np.ndarray     # (E,) column in the selection window
    edge_raw: np.ndarray       # (E, 6)


def prepare(window: TrajectoryWindow, cfg: EncoderConfig) -> PreparedWindow:
    graph = select_neighbors(window, cfg.fov)
    W = len(graph.frames)
    dst, src, fr = [], [], []
    for i, nb in enumerate(graph.neighbors):
        for j in nb:
            for w in range(W):
                dst.append(i)
                src.append(int(j))
                fr.append(w)
    dst_a = np.array(dst, dtype=np.int64)
    src_a = np.array(src, dtype=np.int64)
    fr_a = np.array(fr, dtype=np.int64)
    raw = graph.edge_feats[dst_a, src_a, fr_a] if len(dst) else np.zeros((0, N_EDGE_FEATS))
    return PreparedWindow(node_features(window, cfg), graph, dst_a, src_a, fr_a, raw)


def scale_edges(raw: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    s = np.array([cfg.pos_scale] * 2 + [cfg.vel_scale] * 2 + [cfg.pos_scale, 1.0])
    return raw * s


# --- differentiable pieces ------------------------------------------------------

def temporal_states(params: Params, feats: Tensor, cfg: EncoderConfig) -> Tensor:
    """Per-frame node states h (N, T, D) from one self-attention layer over time."""
    D = cfg.dim
    T = feats.shape[1]
    h0 = linear(params, "embed", feats) + params["pos_emb"][-T:]
    q, k, v = (linear(params, n, h0) for n in ("tq", "tk", "tv"))
    att = ag.softmax(ag.matmul(q, ag.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(D)), axis=-1)
    return ag.tanh(h0 + linear(params, "to", ag.matmul(att, v)))


def social_context(params: Params, last: Tensor, group: np.ndarray, cfg: EncoderConfig) -> Tensor:
    """z_soc (N, D): self-attention across agents that share a window id in ``group``."""
    D = cfg.dim
    q, k, v = (linear(params, n, last) for n in ("sq", "sk", "sv"))
    mask = np.where(group[:, None] == group[None, :], 0.0, -1e30)
    att = ag.softmax(ag.matmul(q, ag.transpose(k)) * (1.0 / np.sqrt(D)) + mask, axis=-1)
    return ag.tanh(last + linear(params, "so", ag.matmul(att, v)))


def gated_message_passing(params: Params, h: Tensor, edge_dst, edge_src, edge_frame,
                          edge_in: Tensor, frames: np.ndarray):
    """Messages m (N, W, D) and per-edge gates (E, D).

    ``h`` holds node states (N, T, D); ``frames`` maps window columns to history frames.
    Gates are independent sigmoids, summed (not normalised) over neighbours.
    """
    N, _, D = h.shape
    W = len(frames)
    if len(edge_dst) == 0:
        return Tensor(np.zeros((N, W, D))), Tensor(np.zeros((0, D)))
    hist_t = frames[edge_frame]
    hi = h[edge_dst, hist_t]
    hj = h[edge_src, hist_t]
    e = mlp2(params, "edge", edge_in)
    gate = ag.sigmoid(mlp2(params, "spa", cat(hi, hj, e)))
    msg = gate * (linear(params, "wv", hj) + linear(params, "we", e))
    m = ag.segment_sum(msg, edge_dst * W + edge_frame, N * W)
    return ag.reshape(m, (N, W, D)), gate


def temporal_pool_and_strength(params: Params, messages: Tensor, gates: Tensor, edge_dst, n_nodes: int):
    """(h_phy (N, D), s (N, 1)): gated pooling over frames; mean gate activation per agent."""
    alpha = ag.sigmoid(linear(params, "tgate", messages))
    alpha = alpha / ag.tsum(alpha, axis=1, keepdims=True)
    h_phy = ag.tsum(alpha * messages, axis=1)
    if gates.shape[0] == 0:
        return h_phy, Tensor(np.zeros((n_nodes, 1)))
    counts = np.bincount(edge_dst, minlength=n_nodes).astype(np.float64)
    per_edge = ag.mean(gates, axis=-1, keepdims=True)
    s = ag.segment_sum(per_edge, edge_dst, n_nodes) * (1.0 / np.maximum(counts, 1.0))[:, None]
    return h_phy, s


def fuse_context(params: Params, z_soc: Tensor, h_phy: Tensor, s: Tensor, ln_eps: float = 1e-5) -> Tensor:
    """c = z_soc + lambda * s * g * tanh(W_phy LN(h_phy)), g = sigmoid(MLP_fuse([z_soc, h_phy, s]))."""
    g = ag.sigmoid(mlp2(params, "fuse", cat(z_soc, h_phy, s)))
    ln = ag.layer_norm(h_phy, ln_eps) * params["ln.g"] + params["ln.b"]
    return z_soc + params["lambda"] * s * g * ag.tanh(linear(params, "phy", ln))


class EncodedBatch(NamedTuple):
    tokens: Tensor       # (N, D)
    strength: Tensor     # (N, 1)
    z_soc: Tensor
    h_phy: Tensor
    offsets: np.ndarray  # window k owns rows offsets[k]:offsets[k+1]


def encode_prepared(params: Params, prepared: Sequence[PreparedWindow], cfg: EncoderConfig) -> EncodedBatch:
    sizes = [pw.node_feats.shape[0] for pw in prepared]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    N = int(offsets[-1])
    frames = prepared[0].graph.frames
    feats = Tensor(np.concatenate([pw.node_feats for pw in prepared], axis=0))
    group = np.repeat(np.arange(len(prepared)), sizes)
    dst = np.concatenate([pw.edge_dst + offsets[k] for k, pw in enumerate(prepared)])
    src = np.concatenate([pw.edge_src + offsets[k] for k, pw in enumerate(prepared)])
    efr = np.concatenate([pw.edge_frame for pw in prepared])
    eraw = np.concatenate([pw.edge_raw for pw in prepared], axis=0)
    h = temporal_states(params, feats, cfg)
    z_soc = social_context(params, h[:, -1, :], group, cfg)
    msgs, gates = gated_message_passing(params, h, dst, src, efr, Tensor(scale_edges(eraw, cfg)), frames)
    h_phy, s = temporal_pool_and_strength(params, msgs, gates, dst, N)
    c = fuse_context(params, z_soc, h_phy, s, cfg.ln_eps)
    return EncodedBatch(c, s, z_soc, h_phy, offsets)


def frozen(params: Params) -> Params:
    """Constant copies: forward passes build no graph."""
    return {k: Tensor(v.data) for k, v in params.items()}


def encode_windows(params: Params, windows: Sequence[TrajectoryWindow], cfg: EncoderConfig,
                   chunk: int = 32) -> list[np.ndarray]:
    """Context tokens (A_k, D) per window, no gradient."""
    fp = frozen(params)
    out = []
    for s in range(0, len(windows), chunk):
        part = windows[s:s + chunk]
        enc = encode_prepared(fp, [prepare(w, cfg) for w in part], cfg)
        for k in range(len(part)):
            out.append(enc.tokens.data[enc.offsets[k]:enc.offsets[k + 1]])
    return out


def encode(window: TrajectoryWindow, params: Params, cfg: EncoderConfig, scene=None) -> list[ContextToken]:
    """Per-agent context tokens for one window. ``scene`` is accepted but unused by design."""
    enc = encode_prepared(frozen(params), [prepare(window, cfg)], cfg)
    return [ContextToken(enc.tokens.data[i].copy(), float(enc.strength.data[i, 0]),
                         enc.z_soc.data[i].copy(), enc.h_phy.data[i].copy())
            for i in range(window.n_agents)]
