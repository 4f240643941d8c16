"""Trajectory records and frame conventions shared by every stage.

Positions are stored as float64 arrays. History and ground-truth futures are in
the world frame; predictions carry an explicit ``frame`` tag ("relative" means
offsets from each agent's last observed position).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RELATIVE = "relative"
ABSOLUTE = "absolute"


class FrameError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrajectoryWindow:
    """One forecasting instance: A agents, ``history`` (A, T_h, 2), ``future_gt`` (A, T_f, 2)."""

    scene_id: str
    agent_ids: tuple
    history: np.ndarray
    future_gt: np.ndarray
    dt: float = 0.4
    unit: str = "m"
    map_key: str | None = None

    def __post_init__(self):
        hist = _frozen(self.history)
        fut = _frozen(self.future_gt)
        object.__setattr__(self, "history", hist)
        object.__setattr__(self, "future_gt", fut)
        object.__setattr__(self, "agent_ids", tuple(self.agent_ids))
        if hist.ndim != 3 or hist.shape[-1] != 2 or fut.ndim != 3 or fut.shape[-1] != 2:
            raise ValueError("history and future_gt must have shape (A, T, 2)")
        if hist.shape[0] != fut.shape[0] or hist.shape[0] != len(self.agent_ids):
            raise ValueError("agent count differs between agent_ids, history and future_gt")
        if hist.shape[1] < 1 or fut.shape[1] < 1:
            raise ValueError("T_h and T_f must be positive")
        if not (np.isfinite(hist).all() and np.isfinite(fut).all()):
            raise ValueError("non-finite coordinates")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def n_agents(self) -> int:
        return self.history.shape[0]

    @property
    def t_hist(self) -> int:
        return self.history.shape[1]

    @property
    def t_fut(self) -> int:
        return self.future_gt.shape[1]

    @property
    def origin(self) -> np.ndarray:
        """Per-agent anchor: the last observed position, shape (A, 2)."""
        return self.history[:, -1, :]

    def future_relative(self) -> np.ndarray:
        return self.future_gt - self.origin[:, None, :]


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """K sampled futures per agent, ``samples`` of shape (A, K, T_f, 2)."""

    samples: np.ndarray
    frame: str = RELATIVE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = _frozen(self.samples)
        object.__setattr__(self, "samples", s)
        if s.ndim != 4 or s.shape[-1] != 2:
            raise ValueError("samples must have shape (A, K, T_f, 2)")
        if s.shape[1] < 1:
            raise ValueError("K must be >= 1")
        if self.frame not in (RELATIVE, ABSOLUTE):
            raise ValueError(f"unknown frame tag {self.frame!r}")

    @property
    def K(self) -> int:
        return self.samples.shape[1]


def to_absolute(pred: PredictionSet, window: TrajectoryWindow) -> PredictionSet:
    if pred.frame != RELATIVE:
        raise FrameError("prediction is already in the absolute frame")
    if pred.samples.shape[0] != window.n_agents:
        raise ValueError(f"prediction has {pred.samples.shape[0]} agents, window has {window.n_agents}")
    if pred.samples.shape[2] != window.t_fut:
        raise ValueError(f"prediction has {pred.samples.shape[2]} steps, window has T_f={window.t_fut}")
    return PredictionSet(pred.samples + window.origin[:, None, None, :], ABSOLUTE, dict(pred.meta))


def to_relative(pred: PredictionSet, window: TrajectoryWindow) -> PredictionSet:
    if pred.frame != ABSOLUTE:
        raise FrameError("prediction is already in the relative frame")
    if pred.samples.shape[0] != window.n_agents:
        raise ValueError(f"prediction has {pred.samples.shape[0]} agents, window has {window.n_agents}")
    return PredictionSet(pred.samples - window.origin[:, None, None, :], RELATIVE, dict(pred.meta))


def finite_differences(traj) -> np.ndarray:
    """Per-step displacement along axis -2: out[t] = traj[t+1] - traj[t]."""
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim < 2 or traj.shape[-2] < 2:
        raise ValueError("need at least 2 positions")
    return traj[..., 1:, :] - traj[..., :-1, :]


def history_velocities(history) -> np.ndarray:
    """Velocity at every observed frame; frame 0 reuses frame 1's displacement."""
    d = finite_differences(history) if np.shape(history)[-2] >= 2 else None
    if d is None:
        return np.zeros_like(np.asarray(history, dtype=np.float64))
    return np.concatenate([d[..., :1, :], d], axis=-2)
