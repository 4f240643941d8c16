"""Desk-scale experiment drivers shared by scripts/ and the acceptance tests."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

from . import grpo as grpomod
from . import metrics as metricsmod
from . import pipeline
from .config import DataConfig, RunConfig, load_dataset
from .data import SynthConfig
from .flow import FlowConfig, TrainConfig
from .grpo import GrpoConfig
from .reward import RewardConfig, RewardWeights
from .sde import SdeSchedule


def corridor_config(seed: int = 0) -> RunConfig:
    """Pretraining-efficacy setup: 500 corridor windows for training, a separate 100 for evaluation."""
    return RunConfig(
        data=DataConfig(synth=(SynthConfig(scenario="corridor", n_agents=8, n_windows=500, noise_std=0.05,
                                           seed=seed),),
                        holdout_fraction=0.0),
        flow=FlowConfig(latent_scale=2.0),
        train=TrainConfig(learning_rate=1e-3, lr_final=1e-4, steps=2500, batch_size=16),
        seed=seed,
    ).seeded()


def corridor_eval_windows(seed: int = 0, n: int = 100):
    from .data import generate_synthetic
    return generate_synthetic(SynthConfig(scenario="corridor", n_agents=8, n_windows=n, noise_std=0.05,
                                          seed=seed + 10_000)).windows


def social_map_config(seed: int = 0, w_sv: float = 1000.0, w_map: float = 300.0,
                      updates: int = 1000) -> RunConfig:
    """Post-training setup: crossing flows plus the obstacle field.

    Reward weights and the post-training schedule were tuned on seed 0 only.
    The encoder is post-trained too, since its token is the flow network's
    only view of the neighbours.
    """
    synth = (SynthConfig(scenario="crossing_flows", n_windows=240, seed=seed),
             SynthConfig(scenario="obstacle_field", n_windows=240, seed=seed))
    return RunConfig(
        data=DataConfig(synth=synth, holdout_fraction=1 / 6),
        flow=FlowConfig(latent_scale=2.0),
        train=TrainConfig(learning_rate=1e-3, lr_final=1e-4, steps=2500, batch_size=16),
        sde=SdeSchedule(eta=0.7),
        grpo=GrpoConfig(group_size=4, total_updates=updates, conditions_per_update=4, learning_rate=2e-4,
                        beta=0.1, train_encoder=True),
        reward=RewardConfig(weights=RewardWeights(w_sv=w_sv, w_map=w_map, w_acc=0.3, w_sm=0.1)),
        seed=seed,
    ).seeded()


def pretrain_model(cfg: RunConfig, dataset=None) -> tuple[pipeline.Model, list]:
    ds = dataset if dataset is not None else load_dataset(cfg)
    model = pipeline.init_model(cfg.encoder, cfg.flow, cfg.seed, cfg.data.t_hist)
    _, log = pipeline.pretrain(model, ds.train, cfg.train)
    return model, log


def evaluate_model(model: pipeline.Model, cfg: RunConfig, windows, scenes) -> dict:
    return metricsmod.evaluate(model.enc_params, model.flow_params, windows, model.enc_cfg, model.flow_cfg,
                               cfg.metrics, cfg.seed, scenes, cfg.reward.map.delta_map)


def posttrain_model(model: pipeline.Model, cfg: RunConfig, dataset) -> tuple[pipeline.Model, list]:
    res = grpomod.posttrain(model.enc_params, model.flow_params, dataset.train, dataset.scenes, model.enc_cfg,
                            model.flow_cfg, cfg.sde, cfg.reward, cfg.grpo)
    return pipeline.Model(model.enc_cfg, model.flow_cfg, res.enc_params, res.flow_params, model.t_hist), res.log


def last_horizon(report: dict) -> dict:
    return report["horizons"][-1]


def relative_change(before: float, after: float) -> float:
    return (after - before) / before if before else float("nan")


@dataclass
class CorridorResult:
    ade_flow: float
    ade_cv: float
    train_seconds: float


def run_corridor(seed: int = 0) -> CorridorResult:
    """Pretrain on the corridor set and compare 4.8 s ADE_min against constant velocity."""
    cfg = corridor_config(seed)
    ds = load_dataset(cfg)
    start = time.perf_counter()
    model, _ = pretrain_model(cfg, ds)
    seconds = time.perf_counter() - start
    windows = corridor_eval_windows(seed)
    flow_rep = evaluate_model(model, cfg, windows, {})
    cv_rep = metricsmod.evaluate_predictor(lambda w: metricsmod.constant_velocity(w, 1), windows, cfg.metrics)
    return CorridorResult(last_horizon(flow_rep)["ade_min"], last_horizon(cv_rep)["ade_min"], seconds)


@dataclass
class SocialMapResult:
    seed: int
    pre: dict
    post: dict
    ablations: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def change(self, key: str, variant: str = "post") -> float:
        after = self.post if variant == "post" else self.ablations[variant]
        return relative_change(last_horizon(self.pre)[key], last_horizon(after)[key])


ABLATIONS = {"no_social": {"w_sv": 0.0}, "no_map": {"w_map": 0.0}}


def run_social_map(seed: int, ablations: bool = True, cfg: RunConfig | None = None) -> SocialMapResult:
    """Pretrain once, post-train with the full reward and (optionally) each ablated reward, evaluate all."""
    cfg = cfg or social_map_config(seed)
    ds = load_dataset(cfg)
    times = {}
    start = time.perf_counter()
    model, _ = pretrain_model(cfg, ds)
    times["pretrain"] = time.perf_counter() - start
    pre = evaluate_model(model, cfg, ds.eval, ds.scenes)
    variants = {"post": cfg}
    if ablations:
        for name, change in ABLATIONS.items():
            variants[name] = replace(cfg, reward=replace(cfg.reward, weights=replace(cfg.reward.weights, **change)))
    reports = {}
    for name, vcfg in variants.items():
        start = time.perf_counter()
        tuned, _ = posttrain_model(model, vcfg, ds)
        times[name] = time.perf_counter() - start
        reports[name] = evaluate_model(tuned, vcfg, ds.eval, ds.scenes)
    post = reports.pop("post")
    return SocialMapResult(seed, pre, post, reports, times)
