"""Rewards for scoring sampled futures.

Array conventions: predictions for a group are absolute positions shaped
(G, A, T, 2) (G rollouts, A agents, T future steps). Rewards come back
shaped (G, A). All terms are non-positive.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import TrajectoryWindow
from .options import opt
from .scene import SceneMap, clearance


@dataclass(frozen=True)
class SocialRewardConfig:
    radius: float = opt(3.0, "m", "interaction radius")
    phi_s: float = opt(60.0, "deg", "strong-view half angle")
    phi_w: float = opt(120.0, "deg", "weak-view half angle")
    delta_s: float = opt(0.6, "m", "strong-view proximity threshold")
    delta_w: float = opt(0.3, "m", "weak-view proximity threshold")
    m_w: float = opt(0.3, "m/step", "weak-view separation margin")
    m_r: float = opt(0.5, "m/step", "rear-view separation margin")
    w_s: float = opt(1.0, "-", "strong-view proximity weight")
    w_wc: float = opt(0.5, "-", "weak-view proximity weight")
    w_wo: float = opt(0.1, "-", "weak-view separation weight")
    w_r: float = opt(0.05, "-", "rear-view separation weight")
    eps: float = opt(1e-6, "-", "heading-validity and angle-denominator stabiliser")
    avg_over: str = opt("valid", "-", "'valid': average over valid (j, t) pairs; 'all': over every (j, t)")

    def __post_init__(self):
        if not 0 < self.phi_s < self.phi_w <= 180:
            raise ValueError("need 0 < phi_s < phi_w <= 180")
        if min(self.delta_s, self.delta_w, self.m_w, self.m_r, self.radius) < 0:
            raise ValueError("thresholds must be >= 0")
        if min(self.w_s, self.w_wc, self.w_wo, self.w_r) < 0:
            raise ValueError("weights must be >= 0")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.avg_over not in ("valid", "all"):
            raise ValueError("avg_over must be 'valid' or 'all'")


@dataclass(frozen=True)
class MapRewardConfig:
    delta_map: float = opt(2.0, "cells", "clearance threshold")
    obs_indices: tuple | None = opt(None, "frames", "history frames for the baseline risk (null = all)")

    def __post_init__(self):
        if self.delta_map < 0:
            raise ValueError("delta_map must be >= 0")


@dataclass(frozen=True)
class RewardWeights:
    w_sv: float = opt(1.0, "-", "social reward weight")
    w_map: float = opt(1.0, "-", "map reward weight")
    w_acc: float = opt(1.0, "-", "accuracy reward weight")
    w_sm: float = opt(0.1, "-", "smoothness reward weight")

    def __post_init__(self):
        if min(self.w_sv, self.w_map, self.w_acc, self.w_sm) < 0:
            raise ValueError("reward weights must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_sv, self.w_map, self.w_acc, self.w_sm])


class RewardBreakdown(NamedTuple):
    r_sv: np.ndarray
    r_map: np.ndarray
    r_acc: np.ndarray
    r_sm: np.ndarray
    total: np.ndarray
    map_present: bool = True


STRONG, WEAK, REAR, INVALID = 0, 1, 2, 3


def headings(pred_abs, origin) -> np.ndarray:
    """Per-step displacement, the first one measured from the last observed position."""
    pred_abs = np.asarray(pred_abs, dtype=np.float64)
    if pred_abs.shape[-2] < 1:
        raise ValueError("need at least one predicted step")
    origin = np.asarray(origin, dtype=np.float64)
    prev = np.concatenate([origin[..., None, :] * np.ones_like(pred_abs[..., :1, :]),
                           pred_abs[..., :-1, :]], axis=-2)
    return pred_abs - prev


def _angles(h, r, h_norm, r_norm, eps):
    cos = (h * r).sum(-1) / (h_norm * r_norm + eps)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def view_decompose(h, r, cfg: SocialRewardConfig) -> np.ndarray:
    """Region label (STRONG / WEAK / REAR / INVALID) for heading ``h`` and offset ``r``; broadcasts."""
    h = np.asarray(h, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    hn = np.linalg.norm(h, axis=-1)
    rn = np.linalg.norm(r, axis=-1)
    theta = _angles(h, r, hn, rn, cfg.eps)
    label = np.where(theta <= cfg.phi_s, STRONG, np.where(theta <= cfg.phi_w, WEAK, REAR))
    valid = (rn <= cfg.radius) & (hn > cfg.eps)
    return np.where(valid, label, INVALID)


def _hinge2(x):
    return np.maximum(x, 0.0) ** 2


def social_reward(pred_abs, origin, cfg: SocialRewardConfig) -> np.ndarray:
    """View-aware social reward for co-sampled futures.

    ``pred_abs`` is (G, A, T, 2): rollout g of every agent forms one joint world.
    ``origin`` is (A, 2), the last observed positions. Returns (G, A).
    """
    pred = np.asarray(pred_abs, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    if pred.ndim != 4 or pred.shape[-1] != 2:
        raise ValueError("pred_abs must be (G, A, T, 2)")
    G, A, T, _ = pred.shape
    if origin.shape != (A, 2):
        raise ValueError(f"origin has {origin.shape[0]} agents, predictions have {A}")
    if A < 2:
        return np.zeros((G, A))

    h = headings(pred, origin)[:, :, None]                       # (G, A, 1, T, 2)
    r = pred[:, None, :, :, :] - pred[:, :, None, :, :]           # r[g, i, j] = y_j - y_i
    d = np.linalg.norm(r, axis=-1)                                # (G, A, A, T)
    d0 = np.linalg.norm(origin[None, :, :] - origin[:, None, :], axis=-1)
    d_prev = np.concatenate([np.broadcast_to(d0[None, :, :, None], (G, A, A, 1)), d[..., :-1]], axis=-1)
    dd = d - d_prev
    hn = np.linalg.norm(h, axis=-1)
    theta = _angles(h, r, hn, d, cfg.eps)

    not_self = ~np.eye(A, dtype=bool)[None, :, :, None]
    valid = (d <= cfg.radius) & (hn > cfg.eps) & not_self
    m_s = valid & (theta <= cfg.phi_s)
    m_w = valid & (theta > cfg.phi_s) & (theta <= cfg.phi_w)
    m_r = valid & (theta > cfg.phi_w)

    pen = (cfg.w_s * m_s * _hinge2(cfg.delta_s - d)
           + cfg.w_wc * m_w * _hinge2(cfg.delta_w - d)
           + cfg.w_wo * m_w * _hinge2(dd - cfg.m_w)
           + cfg.w_r * m_r * _hinge2(dd - cfg.m_r))
    total = pen.sum(axis=(2, 3))
    n_valid = valid.sum(axis=(2, 3))
    if cfg.avg_over == "valid":
        avg = np.where(n_valid > 0, total / np.maximum(n_valid, 1), 0.0)
    else:
        avg = total / ((A - 1) * T)
    n_bar = n_valid / T
    gamma = 1.0 / (1.0 + np.log1p(n_bar))
    out = -gamma * avg
    return out + 0.0  # normalise -0.0


def map_risk(clear, delta_map: float) -> np.ndarray:
    """Mean squared shortfall of clearance below ``delta_map`` over the last axis."""
    return _hinge2(delta_map - np.asarray(clear, dtype=np.float64)).mean(axis=-1)


def map_reward(pred_abs, history_abs, scene: SceneMap, cfg: MapRewardConfig) -> np.ndarray:
    """Excess map risk of a prediction over its own history's risk, negated.

    ``pred_abs`` is (..., T, 2) and ``history_abs`` (..., T_h, 2) with matching
    leading axes (or (T_h, 2) broadcast against all). Returns shape (...).
    """
    pred = np.asarray(pred_abs, dtype=np.float64)
    hist = np.asarray(history_abs, dtype=np.float64)
    if cfg.obs_indices is not None:
        hist = hist[..., list(cfg.obs_indices), :]
    q_obs = map_risk(clearance(scene, hist), cfg.delta_map)
    q_pred = map_risk(clearance(scene, pred), cfg.delta_map)
    return -np.maximum(q_pred - q_obs, 0.0) + 0.0


def acc_reward(pred_rel, gt_rel) -> np.ndarray:
    """Negative average displacement error over the predicted steps."""
    diff = np.asarray(pred_rel, dtype=np.float64) - np.asarray(gt_rel, dtype=np.float64)
    return -np.linalg.norm(diff, axis=-1).mean(axis=-1) + 0.0


def smooth_reward(pred_abs, origin) -> np.ndarray:
    """Negative mean squared second difference of [origin, y^1, ..., y^T]."""
    pred = np.asarray(pred_abs, dtype=np.float64)
    T = pred.shape[-2]
    if T < 2:
        raise ValueError("smoothness needs at least two predicted steps")
    h = headings(pred, origin)
    acc = h[..., 1:, :] - h[..., :-1, :]
    return -(acc * acc).sum(-1).sum(-1) / (T - 1) + 0.0


def composite_reward(r_sv, r_map, r_acc, r_sm, weights: RewardWeights,
                     map_present: bool = True) -> RewardBreakdown:
    total = (weights.w_sv * np.asarray(r_sv) + weights.w_map * np.asarray(r_map)
             + weights.w_acc * np.asarray(r_acc) + weights.w_sm * np.asarray(r_sm))
    return RewardBreakdown(np.asarray(r_sv), np.asarray(r_map), np.asarray(r_acc),
                           np.asarray(r_sm), total, map_present)


@dataclass(frozen=True)
class RewardConfig:
    social: SocialRewardConfig = opt(None, factory=SocialRewardConfig)
    map: MapRewardConfig = opt(None, factory=MapRewardConfig)
    weights: RewardWeights = opt(None, factory=RewardWeights)


def score_window(pred_rel, window: TrajectoryWindow, scene: SceneMap | None,
                 cfg: RewardConfig) -> RewardBreakdown:
    """Score co-sampled relative predictions (G, A, T, 2) for every agent of a window."""
    pred_rel = np.asarray(pred_rel, dtype=np.float64)
    G, A = pred_rel.shape[:2]
    if A != window.n_agents:
        raise ValueError(f"predictions cover {A} agents, window has {window.n_agents}")
    origin = window.origin
    pred_abs = pred_rel + origin[None, :, None, :]
    r_sv = social_reward(pred_abs, origin, cfg.social)
    if scene is None:
        r_map = np.zeros((G, A))
    else:
        r_map = map_reward(pred_abs, window.history[None], scene, cfg.map)
    r_acc = acc_reward(pred_rel, window.future_relative()[None])
    r_sm = smooth_reward(pred_abs, origin[None, :, :])
    return composite_reward(r_sv, r_map, r_acc, r_sm, cfg.weights, scene is not None)
