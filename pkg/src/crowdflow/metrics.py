"""Best-of-K displacement errors, collision rate and map-violation rate.

Predictions for a window are relative to each agent's last observed position
and shaped (K, A, T, 2): sample k of every agent forms one joint world, which
is how collisions are counted.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import encoder as enc
from . import flow
from . import rng as rngmod
from .core import TrajectoryWindow
from .options import opt, to_dict
from .scene import SceneMap, clearance

# published best-of-20 figures, carried in reports for context only
REFERENCE = {
    "eth_ucy_avg": {"ade_min": 0.20, "fde_min": 0.31, "unit": "m", "K": 20},
    "sdd": {"ade_min": 7.37, "fde_min": 11.67, "unit": "px", "K": 20},
}


@dataclass(frozen=True)
class MetricsConfig:
    K: int = opt(20, "samples", "predictions per agent")
    collision_threshold: float = opt(0.2, "m", "pairwise distance counted as a collision")
    horizons: tuple = opt((3, 6, 9, 12), "steps", "evaluation cut steps (ascending)")
    include_single_agent: bool = opt(False, "-", "count agents of single-agent windows in the collision denominator")

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.collision_threshold > 0:
            raise ValueError("collision_threshold must be > 0")
        h = list(self.horizons)
        if not h or h != sorted(h) or len(set(h)) != len(h) or h[0] < 1:
            raise ValueError("horizons must be strictly ascending positive steps")


def _check_horizon(horizon: int, t_fut: int) -> None:
    if not 1 <= horizon <= t_fut:
        raise ValueError(f"horizon {horizon} outside 1..{t_fut}")


def _mean_seq(x, axis: int = -1) -> np.ndarray:
    # left-to-right summation so results equal a plain Python loop bit for bit
    return np.add.accumulate(x, axis=axis).take(-1, axis=axis) / x.shape[axis]


def displacement_errors(samples, gt, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ADE and FDE up to ``horizon``: samples (..., K, T, 2), gt (..., T, 2)."""
    samples = np.asarray(samples, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_horizon(horizon, samples.shape[-2])
    diff = samples[..., :horizon, :] - gt[..., None, :horizon, :]
    err = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    return _mean_seq(err), err[..., -1]


def ade_fde(samples, gt, horizon: int) -> tuple[float, float, float, float]:
    """(ade_min, fde_min, ade_avg, fde_avg) for K samples (K, T, 2) of one agent."""
    ade, fde = displacement_errors(samples, gt, horizon)
    return float(ade.min()), float(fde.min()), float(_mean_seq(ade)), float(_mean_seq(fde))


def collision_flags(samples, horizon: int, threshold: float) -> np.ndarray:
    """(K, A) booleans: does agent a in world k come closer than ``threshold`` to anyone?"""
    samples = np.asarray(samples, dtype=np.float64)
    _check_horizon(horizon, samples.shape[-2])
    K, A = samples.shape[:2]
    if A < 2:
        return np.zeros((K, A), dtype=bool)
    p = samples[:, :, :horizon]
    diff = p[:, :, None] - p[:, None, :]
    d = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)                # (K, A, A, h)
    d[:, np.arange(A), np.arange(A)] = np.inf
    return d.min(axis=(2, 3)) < threshold


def collision_rate(samples, horizon: int, threshold: float) -> float:
    """Percentage of (sample, agent) instances that collide; 0 for single-agent input."""
    flags = collision_flags(samples, horizon, threshold)
    return 100.0 * float(flags.mean()) if flags.size else 0.0


def map_violations(pred_abs, history_abs, scene: SceneMap, delta_map: float) -> np.ndarray:
    """Boolean per predicted point: clearance below delta_map and below the agent's worst history clearance.

    pred_abs (..., A, T, 2), history_abs (A, T_h, 2); returns (..., A, T).
    """
    c_pred = clearance(scene, pred_abs)
    c_hist = clearance(scene, history_abs).min(axis=-1)
    limit = np.minimum(delta_map, c_hist)
    return c_pred < limit[..., :, None]


def constant_velocity(window: TrajectoryWindow, K: int = 1) -> np.ndarray:
    """Relative predictions (K, A, T_f, 2) extrapolating the last observed step."""
    step = window.history[:, -1] - window.history[:, -2]
    steps = np.arange(1, window.t_fut + 1, dtype=np.float64)
    pred = step[:, None, :] * steps[None, :, None]
    return np.broadcast_to(pred, (K,) + pred.shape).copy()


def flow_predictions(enc_params, flow_params, windows: Sequence[TrajectoryWindow],
                     enc_cfg: enc.EncoderConfig, flow_cfg: flow.FlowConfig, K: int,
                     seed: int) -> list[np.ndarray]:
    """K deterministic Euler rollouts per agent from seeded prior draws ("prior" stream, key = window index)."""
    field = flow.make_field(flow_params, flow_cfg)
    tokens = enc.encode_windows(enc_params, list(windows), enc_cfg)
    out = []
    d = flow_cfg.latent_dim
    for w, (win, tok) in enumerate(zip(windows, tokens)):
        A = win.n_agents
        xi = rngmod.stream(seed, "prior", w).standard_normal((K * A, d))
        c = np.tile(tok, (K, 1))
        y = flow.ode_rollout(field, c, xi, flow_cfg.n_steps)
        out.append(flow.latent_to_traj(y, flow_cfg).reshape(K, A, flow_cfg.t_fut, 2))
    return out


def evaluate_predictions(preds: Sequence[np.ndarray], windows: Sequence[TrajectoryWindow],
                         cfg: MetricsConfig, scenes: dict | None = None,
                         delta_map: float = 2.0) -> dict:
    """Aggregate horizon-sliced metrics over windows. Errors are means over agents."""
    scenes = scenes or {}
    if len(preds) != len(windows):
        raise ValueError("one prediction array per window expected")
    t_fut = windows[0].t_fut if windows else max(cfg.horizons)
    for h in cfg.horizons:
        _check_horizon(h, t_fut)
    H = len(cfg.horizons)
    sums = np.zeros((H, 4))
    n_agents = 0
    col_hits = np.zeros(H)
    col_total = 0
    map_hits = np.zeros(H)
    map_total = np.zeros(H)
    for p, win in zip(preds, windows):
        p = np.asarray(p, dtype=np.float64)
        p_abs = p + win.origin[None, :, None, :]
        gt = win.future_relative()                       # (A, T, 2)
        per_agent = np.moveaxis(p, 0, 1)                 # (A, K, T, 2)
        n_agents += win.n_agents
        counts_collisions = win.n_agents >= 2 or cfg.include_single_agent
        if counts_collisions:
            col_total += p.shape[0] * win.n_agents
        scene = scenes.get(win.map_key) if win.map_key is not None else None
        viol = None
        if scene is not None:
            viol = map_violations(p_abs, win.history, scene, delta_map)
        for k, h in enumerate(cfg.horizons):
            ade, fde = displacement_errors(per_agent, gt, h)          # (A, K)
            sums[k] += [ade.min(1).sum(), fde.min(1).sum(), ade.mean(1).sum(), fde.mean(1).sum()]
            if counts_collisions:
                col_hits[k] += collision_flags(p_abs, h, cfg.collision_threshold).sum()
            if viol is not None:
                map_hits[k] += viol[..., :h].sum()
                map_total[k] += viol[..., :h].size
    rows = []
    dt = windows[0].dt if windows else 0.4
    for k, h in enumerate(cfg.horizons):
        m = sums[k] / max(n_agents, 1)
        rows.append({
            "steps": int(h), "seconds": round(h * dt, 6),
            "ade_min": float(m[0]), "fde_min": float(m[1]), "ade_avg": float(m[2]), "fde_avg": float(m[3]),
            "col_rate": 100.0 * float(col_hits[k]) / col_total if col_total else 0.0,
            "map_violation_rate": 100.0 * float(map_hits[k]) / float(map_total[k]) if map_total[k] else None,
        })
    return {
        "config": to_dict(cfg),
        "counts": {"windows": len(windows), "agents": n_agents, "collision_instances": col_total},
        "collision_denominator": "per agent-sample (co-sampled worlds)",
        "horizons": rows,
        "reference": REFERENCE,
    }


def evaluate(enc_params, flow_params, windows: Sequence[TrajectoryWindow], enc_cfg: enc.EncoderConfig,
             flow_cfg: flow.FlowConfig, cfg: MetricsConfig, seed: int = 0, scenes: dict | None = None,
             delta_map: float = 2.0) -> dict:
    preds = flow_predictions(enc_params, flow_params, windows, enc_cfg, flow_cfg, cfg.K, seed)
    report = evaluate_predictions(preds, windows, cfg, scenes, delta_map)
    report["seed"] = seed
    return report


def evaluate_predictor(predict: Callable[[TrajectoryWindow], np.ndarray], windows, cfg: MetricsConfig,
                       scenes: dict | None = None, delta_map: float = 2.0) -> dict:
    return evaluate_predictions([predict(w) for w in windows], windows, cfg, scenes, delta_map)


CSV_COLUMNS = ("steps", "seconds", "ade_min", "fde_min", "ade_avg", "fde_avg", "col_rate", "map_violation_rate")


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in report["horizons"]:
        w.writerow(["" if row[c] is None else repr(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()
