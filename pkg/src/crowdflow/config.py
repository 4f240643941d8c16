"""Run configuration: one JSON document covering data, model, training and evaluation."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import data as datamod
from .data import SynthConfig
from .encoder import EncoderConfig
from .flow import FlowConfig, TrainConfig
from .grpo import GrpoConfig
from .metrics import MetricsConfig
from .options import ConfigError, from_dict, opt
from .reward import RewardConfig
from .scene import SceneMap, load_scene_map
from .sde import SdeSchedule


@dataclass(frozen=True)
class SourceSpec:
    annotations: str = opt("", "path", "whitespace-separated 'frame agent x y' file")
    map: str | None = opt(None, "path", "occupancy PGM with a JSON sidecar (optional)")
    stride: int = opt(1, "frames", "window stride in sampled frames")
    scene_id: str | None = opt(None, "-", "scene name (defaults to the file stem)")
    dt: float = opt(0.4, "s", "seconds per sampled frame")
    unit: str = opt("m", "-", "coordinate unit")


@dataclass(frozen=True)
class DataConfig:
    sources: tuple[SourceSpec, ...] = opt((), "-", "annotation files (exclusive with synth)")
    synth: tuple[SynthConfig, ...] = opt((), "-", "synthetic scenarios (exclusive with sources)")
    t_hist: int = opt(8, "steps", "observed steps per window")
    t_fut: int = opt(12, "steps", "predicted steps per window")
    holdout_fraction: float = opt(0.2, "-", "trailing share of each source's windows kept for evaluation")

    def __post_init__(self):
        if bool(self.sources) == bool(self.synth):
            raise ValueError("exactly one data source is required: 'sources' or 'synth'")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = opt(None, "-", "dataset", factory=lambda: DataConfig(synth=(SynthConfig(),)))
    encoder: EncoderConfig = opt(None, factory=EncoderConfig)
    flow: FlowConfig = opt(None, factory=FlowConfig)
    train: TrainConfig = opt(None, factory=TrainConfig)
    sde: SdeSchedule = opt(None, factory=SdeSchedule)
    grpo: GrpoConfig = opt(None, factory=GrpoConfig)
    reward: RewardConfig = opt(None, factory=RewardConfig)
    metrics: MetricsConfig = opt(None, factory=MetricsConfig)
    seed: int = opt(0, "-", "root seed; overrides train.seed, grpo.seed and the evaluation seed")
    out_dir: str = opt("runs/default", "path", "output directory")
    precision: str = opt("float64", "-", "numeric precision (only float64 is supported)")

    def __post_init__(self):
        if self.precision != "float64":
            raise ValueError("precision must be 'float64'")
        if self.flow.t_fut != self.data.t_fut:
            raise ValueError(f"flow.t_fut ({self.flow.t_fut}) must equal data.t_fut ({self.data.t_fut})")
        if max(self.metrics.horizons) > self.data.t_fut:
            raise ValueError("metrics.horizons exceed data.t_fut")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def seeded(self) -> "RunConfig":
        """Copy with the root seed pushed into the component configs."""
        return replace(self, train=replace(self.train, seed=self.seed), grpo=replace(self.grpo, seed=self.seed))


def load_run_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    raw.update(overrides or {})
    cfg = from_dict(RunConfig, raw, "config")
    base = Path(path).parent if path is not None else Path(".")
    for s in cfg.data.sources:
        for f in (s.annotations, s.map):
            if f is not None and not (base / f).exists():
                raise ConfigError(f"config: referenced file does not exist: {f}")
    return cfg.seeded()


class Dataset:
    """Train/eval windows plus scene maps keyed by ``map_key``."""

    def __init__(self, train: list, evaluation: list, scenes: dict[str, SceneMap]):
        self.train = train
        self.eval = evaluation
        self.scenes = scenes


def _split(windows: list, fraction: float) -> tuple[list, list]:
    n_eval = int(np.ceil(fraction * len(windows))) if fraction > 0 else 0
    n_eval = min(n_eval, max(len(windows) - 1, 0))
    cut = len(windows) - n_eval
    return windows[:cut], windows[cut:]


def load_dataset(cfg: RunConfig, base_dir: str | Path = ".") -> Dataset:
    base = Path(base_dir)
    dc = cfg.data
    train, evaluation, scenes = [], [], {}
    if dc.synth:
        for sc in dc.synth:
            if (sc.t_hist, sc.t_fut) != (dc.t_hist, dc.t_fut):
                sc = replace(sc, t_hist=dc.t_hist, t_fut=dc.t_fut)
            ds = datamod.generate_synthetic(sc)
            a, b = _split(ds.windows, dc.holdout_fraction)
            train += a
            evaluation += b
            if ds.scene_map is not None:
                scenes[sc.scenario] = ds.scene_map
        return Dataset(train, evaluation, scenes)
    for s in dc.sources:
        path = base / s.annotations
        sid = s.scene_id or path.stem
        key = None
        if s.map is not None:
            key = sid
            scenes[key] = load_scene_map(base / s.map)
        wins = datamod.build_windows(datamod.load_annotations(path), dc.t_hist, dc.t_fut, s.stride,
                                     sid, s.dt, s.unit, key)
        a, b = _split(wins, dc.holdout_fraction)
        train += a
        evaluation += b
    return Dataset(train, evaluation, scenes)


def input_files(cfg: RunConfig, base_dir: str | Path = ".") -> list[Path]:
    base = Path(base_dir)
    out = []
    for s in cfg.data.sources:
        out.append(base / s.annotations)
        if s.map is not None:
            out.append(base / s.map)
            out.append((base / s.map).with_suffix(".json"))
    return out
