"""Annotation parsing, window extraction and the synthetic crowd generator."""
from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass
from functools import reduce
from pathlib import Path
from typing import Iterable, NamedTuple, TextIO

import numpy as np

from . import rng as rngmod
from .core import TrajectoryWindow
from .options import opt
from .scene import SceneMap, clearance, grid_homography

SCENARIOS = ("crossing_flows", "corridor", "obstacle_field")


class AnnotationError(ValueError):
    pass


class RawAnnotation(NamedTuple):
    frame: int
    agent_id: int
    x: float
    y: float

    @property
    def pos(self) -> tuple[float, float]:
        return (self.x, self.y)


def _as_int(token: str, what: str, lineno: int) -> int:
    try:
        value = float(token)
    except ValueError:
        raise AnnotationError(f"line {lineno}: non-numeric {what} {token!r}") from None
    if not math.isfinite(value) or value != int(value):
        raise AnnotationError(f"line {lineno}: fractional or non-finite {what} {token!r}")
    if value < 0:
        raise AnnotationError(f"line {lineno}: negative {what} {token!r}")
    return int(value)


def parse_annotations(stream: TextIO | str) -> list[RawAnnotation]:
    """Parse ``frame agent_id x y`` records; ``#`` lines and blank lines are skipped."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    out = []
    for lineno, line in enumerate(stream, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        parts = text.split()
        if len(parts) < 4:
            raise AnnotationError(f"line {lineno}: expected >= 4 fields, got {len(parts)}")
        frame = _as_int(parts[0], "frame", lineno)
        agent = _as_int(parts[1], "agent_id", lineno)
        try:
            x, y = float(parts[2]), float(parts[3])
        except ValueError:
            raise AnnotationError(f"line {lineno}: non-numeric position") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise AnnotationError(f"line {lineno}: non-finite position")
        out.append(RawAnnotation(frame, agent, x, y))
    return out


def load_annotations(path: str | Path) -> list[RawAnnotation]:
    with open(path, encoding="utf-8") as fh:
        return parse_annotations(fh)


def annotations_digest(records: Iterable[RawAnnotation]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(f"{r.frame} {r.agent_id} {r.x!r} {r.y!r}\n".encode())
    return h.hexdigest()


def format_annotations(records: Iterable[RawAnnotation]) -> str:
    return "".join(f"{r.frame} {r.agent_id} {r.x!r} {r.y!r}\n" for r in records)


def frame_step(frames: Iterable[int]) -> int:
    uniq = sorted(set(frames))
    if len(uniq) < 2:
        return 1
    return reduce(math.gcd, (b - a for a, b in zip(uniq, uniq[1:])))


def build_windows(annotations: Iterable[RawAnnotation], t_hist: int = 8, t_fut: int = 12,
                  stride: int = 1, scene_id: str = "scene", dt: float = 0.4, unit: str = "m",
                  map_key: str | None = None) -> list[TrajectoryWindow]:
    """Slide a (t_hist + t_fut)-frame window over the sampled frame grid.

    ``stride`` counts sampled frames. Only agents observed at every frame of a
    window are kept, ordered by ascending id.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    recs = sorted(annotations, key=lambda r: (r.frame, r.agent_id))
    if not recs:
        return []
    tracks: dict[int, dict[int, tuple[float, float]]] = {}
    by_frame: dict[int, list[int]] = {}
    for r in recs:
        track = tracks.setdefault(r.agent_id, {})
        if r.frame in track:
            raise AnnotationError(f"duplicate record for agent {r.agent_id} at frame {r.frame}")
        track[r.frame] = (r.x, r.y)
        by_frame.setdefault(r.frame, []).append(r.agent_id)
    step = frame_step(by_frame)
    length = t_hist + t_fut
    f_min, f_max = recs[0].frame, recs[-1].frame
    windows = []
    for start in range(f_min, f_max - (length - 1) * step + 1, stride * step):
        frames = [start + k * step for k in range(length)]
        agents = sorted(a for a in by_frame.get(start, ()) if all(f in tracks[a] for f in frames))
        if not agents:
            continue
        pos = np.array([[tracks[a][f] for f in frames] for a in agents], dtype=np.float64)
        windows.append(TrajectoryWindow(f"{scene_id}:{start}", tuple(agents), pos[:, :t_hist],
                                        pos[:, t_hist:], dt=dt, unit=unit, map_key=map_key))
    return windows


def windows_to_annotations(windows: Iterable[TrajectoryWindow], frame_gap: int = 10,
                           spacing: int = 5) -> list[RawAnnotation]:
    """Lay independent windows end to end on one frame axis (agent ids made unique)."""
    out = []
    frame0 = 0
    next_id = 0
    for w in windows:
        full = np.concatenate([w.history, w.future_gt], axis=1)
        T = full.shape[1]
        for a in range(w.n_agents):
            for t in range(T):
                out.append(RawAnnotation(frame0 + t * frame_gap, next_id + a,
                                         float(full[a, t, 0]), float(full[a, t, 1])))
        next_id += w.n_agents
        frame0 += (T + spacing) * frame_gap
    out.sort(key=lambda r: (r.frame, r.agent_id))
    return out


# --- synthetic crowds -------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_agents: int = opt(8, "count", "agents per window")
    scenario: str = opt("crossing_flows", "-", "crossing_flows | corridor | obstacle_field")
    noise_std: float = opt(0.05, "m", "std of the Gaussian perturbation added to every recorded position")
    seed: int = opt(0, "-", "generator seed")
    n_windows: int = opt(100, "count", "independent windows to simulate")
    t_hist: int = opt(8, "steps", "observed steps")
    t_fut: int = opt(12, "steps", "future steps")
    dt: float = opt(0.4, "s", "seconds per recorded step")
    speed_min: float = opt(1.0, "m/s", "lower bound of preferred walking speed")
    speed_max: float = opt(1.4, "m/s", "upper bound of preferred walking speed")

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"invalid scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n_windows < 0 or self.t_hist < 1 or self.t_fut < 1 or self.dt <= 0:
            raise ValueError("invalid window geometry")
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError("need 0 < speed_min <= speed_max")


class SynthDataset(NamedTuple):
    windows: list
    scene_map: SceneMap | None


# force model constants (m, s)
_TAU = 0.5          # relaxation time towards preferred velocity
_REP_A, _REP_B, _REP_R = 2.5, 0.25, 0.7
_ANT_A, _ANT_B, _ANT_H = 1.6, 0.35, 2.5  # anticipatory avoidance: gain, range, look-ahead
_OBS_A, _OBS_B, _OBS_R = 3.0, 0.25, 0.8
_SUBSTEPS = 4

OBSTACLE_EXTENT = 10.0   # map covers [-10, 10]^2 metres
OBSTACLE_CELL = 0.25
OBSTACLE_BOX = (-1.0, 1.0, -1.5, 1.5)  # x0, x1, y0, y1


def obstacle_scene_map() -> SceneMap:
    n = int(round(2 * OBSTACLE_EXTENT / OBSTACLE_CELL))
    centres = -OBSTACLE_EXTENT + (np.arange(n) + 0.5) * OBSTACLE_CELL
    xs, ys = np.meshgrid(centres, centres)  # rows follow y, columns follow x
    x0, x1, y0, y1 = OBSTACLE_BOX
    occ = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
    hom = grid_homography(-OBSTACLE_EXTENT, -OBSTACLE_EXTENT, OBSTACLE_CELL)
    return SceneMap.from_occupancy(occ, hom, np.eye(2), OBSTACLE_CELL)


def _clearance_and_normal(scene: SceneMap, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = 0.05
    c = clearance(scene, p) * scene.cell_size
    gx = (clearance(scene, p + [h, 0]) - clearance(scene, p - [h, 0])) * scene.cell_size / (2 * h)
    gy = (clearance(scene, p + [0, h]) - clearance(scene, p - [0, h])) * scene.cell_size / (2 * h)
    g = np.stack([gx, gy], axis=-1)
    n = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-9)
    return c, n


def _pair_forces(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    A = p.shape[0]
    if A < 2:
        return np.zeros_like(p)
    diff = p[:, None, :] - p[None, :, :]           # i - j
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    n = diff / np.where(np.isfinite(dist), dist, 1.0)[..., None]
    f = (_REP_A * np.exp((_REP_R - dist) / _REP_B))[..., None] * n
    # anticipatory term: push apart along the predicted closest-approach offset
    dv = v[:, None, :] - v[None, :, :]
    dv2 = (dv * dv).sum(-1)
    t_ca = np.clip(-(diff * dv).sum(-1) / np.maximum(dv2, 1e-9), 0.0, _ANT_H)
    ca = diff + dv * t_ca[..., None]
    d_ca = np.linalg.norm(ca, axis=-1)
    np.fill_diagonal(d_ca, np.inf)
    n_ca = ca / np.where(np.isfinite(d_ca), np.maximum(d_ca, 1e-9), 1.0)[..., None]
    w = _ANT_A * np.exp(-d_ca / _ANT_B) * (t_ca > 0) * (1.0 - t_ca / (_ANT_H + 1e-9))
    f = f + w[..., None] * n_ca
    return f.sum(axis=1)


def _simulate(p0, v0, speed, desired, n_frames, dt, scene=None) -> np.ndarray:
    p, v = p0.copy(), v0.copy()
    h = dt / _SUBSTEPS
    out = np.empty((p.shape[0], n_frames, 2))
    out[:, 0] = p
    for f in range(1, n_frames):
        for _ in range(_SUBSTEPS):
            near = _clearance_and_normal(scene, p) if scene is not None else None
            acc = (desired(p, v, near) - v) / _TAU + _pair_forces(p, v)
            if near is not None:
                c, n = near
                acc = acc + (_OBS_A * np.exp((_OBS_R - c) / _OBS_B))[:, None] * n
            v = v + acc * h
            sp = np.linalg.norm(v, axis=-1, keepdims=True)
            cap = 1.5 * speed[:, None]
            v = np.where(sp > cap, v * cap / np.maximum(sp, 1e-12), v)
            p = p + v * h
        out[:, f] = p
    return out


def _spread_positions(rng, n, xlo, xhi, ylo, yhi, min_sep=1.0, tries=200):
    pts = []
    for _ in range(n):
        for _ in range(tries):
            q = np.array([rng.uniform(xlo, xhi), rng.uniform(ylo, yhi)])
            if all(np.linalg.norm(q - r) >= min_sep for r in pts):
                break
        pts.append(q)
    return np.array(pts).reshape(n, 2)


def _episode(cfg: SynthConfig, rng: np.random.Generator, scene: SceneMap | None) -> np.ndarray:
    n = cfg.n_agents
    T = cfg.t_hist + cfg.t_fut
    speed = rng.uniform(cfg.speed_min, cfg.speed_max, size=n)
    if cfg.scenario == "corridor":
        n_lanes = max(1, math.ceil(n / 2))
        gap = 1.4
        lanes = np.arange(n) % n_lanes
        lane_y = (lanes - (n_lanes - 1) / 2.0) * gap
        direction = np.where(lanes % 2 == 0, 1.0, -1.0)
        slot = np.arange(n) // n_lanes
        x0 = -direction * (4.0 + 3.5 * slot + rng.uniform(0.0, 1.0, size=n))
        p0 = np.stack([x0, lane_y], axis=-1)

        def desired(p, v, near):
            return np.stack([direction * speed, 1.0 * (lane_y - p[:, 1])], axis=-1)
    elif cfg.scenario == "crossing_flows":
        direction = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        p0 = _spread_positions(rng, n, -2.0, 2.0, -2.0, 2.0, min_sep=1.0)
        p0[:, 0] = -direction * (5.0 + rng.uniform(0.0, 3.0, size=n))
        for i in range(n):  # re-space along each stream
            for j in range(i):
                while np.linalg.norm(p0[i] - p0[j]) < 1.0:
                    p0[i, 0] -= direction[i] * 0.5

        def desired(p, v, near):
            return np.stack([direction * speed, np.zeros(n)], axis=-1)
    else:
        direction = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        p0 = _spread_positions(rng, n, -2.5, 2.5, -2.8, 2.8, min_sep=1.0)
        p0[:, 0] = -direction * (4.0 + rng.uniform(0.0, 2.5, size=n))
        for i in range(n):
            for j in range(i):
                while np.linalg.norm(p0[i] - p0[j]) < 1.0:
                    p0[i, 0] -= direction[i] * 0.5
        side = np.where(p0[:, 1] >= 0, 1.0, -1.0)

        def desired(p, v, near):
            goal = np.stack([direction, np.zeros(n)], axis=-1)
            c, nrm = near
            tangent = np.stack([-nrm[:, 1], nrm[:, 0]], axis=-1)
            tangent *= np.sign((tangent * (side[:, None] * np.array([0.0, 1.0]))).sum(-1) + 1e-12)[:, None]
            ahead = (goal * -nrm).sum(-1) > -0.2
            w = np.where(ahead, np.exp(-(c - 1.0) / 1.0), 0.0)[:, None]
            d = goal + w * (0.5 * nrm + tangent)
            d /= np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-9)
            return d * speed[:, None]
    v0 = desired(p0, np.zeros_like(p0), _clearance_and_normal(scene, p0) if scene is not None else None)
    traj = _simulate(p0, v0, speed, desired, T, cfg.dt, scene)
    if cfg.noise_std > 0:
        traj = traj + rng.normal(0.0, cfg.noise_std, size=traj.shape)
    return traj


def generate_synthetic(cfg: SynthConfig) -> SynthDataset:
    """Simulate ``cfg.n_windows`` independent episodes; deterministic under ``cfg.seed``."""
    scene = obstacle_scene_map() if cfg.scenario == "obstacle_field" else None
    map_key = cfg.scenario if scene is not None else None
    windows = []
    for w in range(cfg.n_windows):
        rng = rngmod.stream(cfg.seed, "synth", SCENARIOS.index(cfg.scenario), w)
        traj = _episode(cfg, rng, scene)
        windows.append(TrajectoryWindow(
            f"{cfg.scenario}:{w}", tuple(range(cfg.n_agents)), traj[:, :cfg.t_hist], traj[:, cfg.t_hist:],
            dt=cfg.dt, unit="m", map_key=map_key))
    return SynthDataset(windows, scene)
