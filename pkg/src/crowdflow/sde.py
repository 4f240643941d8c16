"""Stochastic sampler derived from the flow ODE, with exact Gaussian step densities.

Each Euler-Maruyama step is an isotropic Gaussian transition
N(mu_t, sigma_t^2 I) with

    mu_t    = y + [v + 0.5 g^2 s] dt
    s       = (t' v - y) / (1 - t')
    g       = eta * sqrt((1 - t') / t')
    sigma_t = g sqrt(dt)

where t' is the step time clipped to [tau_min, 1 - tau_min] and v is the
network evaluated at (y, t').
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .flow import DivergenceError
from .options import opt

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class SdeSchedule:
    eta: float = opt(0.7, "-", "noise level")
    tau_min: float = opt(0.05, "-", "endpoint clip for the step time")
    n_steps: int = opt(10, "-", "rollout steps (dt = 1 / n_steps)")

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0 < self.tau_min < 0.5:
            raise ValueError("tau_min must be in (0, 0.5)")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def dt(self) -> float:
        return 1.0 / self.n_steps

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dt

    def sigma(self, t: float) -> float:
        return diffusion_coeff(clip_time(t, self), self) * np.sqrt(self.dt)


class SdeStepRecord(NamedTuple):
    """One transition for a batch of B latents of dimension d."""
    t: float
    y_in: np.ndarray      # (B, d)
    mean: np.ndarray      # (B, d)
    sigma: float
    y_out: np.ndarray     # (B, d)
    log_prob: np.ndarray  # (B,), nan when degenerate
    noise: np.ndarray     # (B, d)

    @property
    def degenerate(self) -> bool:
        return self.sigma == 0.0


def clip_time(t, schedule: SdeSchedule):
    return np.clip(t, schedule.tau_min, 1.0 - schedule.tau_min)


def recover_score(y, v, t_bar):
    if np.any(np.asarray(t_bar) >= 1.0 - 1e-12):
        raise ValueError("score undefined for t >= 1")
    return (t_bar * v - y) / (1.0 - t_bar)


def diffusion_coeff(t_bar, schedule: SdeSchedule):
    if np.any(np.asarray(t_bar) <= 0):
        raise ValueError("diffusion coefficient undefined for t <= 0")
    return schedule.eta * np.sqrt((1.0 - t_bar) / t_bar)


def transition_mean(y, v, t_bar: float, schedule: SdeSchedule):
    """mu = y + [v + 0.5 g^2 s] dt; works on numpy arrays and autograd tensors alike."""
    g = diffusion_coeff(t_bar, schedule)
    s = (v * t_bar - y) * (1.0 / (1.0 - t_bar))
    return y + (v + s * (0.5 * g ** 2)) * schedule.dt


def gaussian_log_prob(x, mean, sigma: float) -> np.ndarray:
    """log N(x; mean, sigma^2 I) per row."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    r = x - mean
    return -0.5 * d * (LOG_2PI + 2.0 * np.log(sigma)) - (r * r).sum(-1) / (2.0 * sigma * sigma)


def sde_step(field: Callable, y, t: float, c, schedule: SdeSchedule,
             rng: np.random.Generator | None = None, noise=None) -> SdeStepRecord:
    """One stochastic transition. ``noise`` overrides the draw from ``rng``."""
    y = np.asarray(y, dtype=np.float64)
    t_bar = float(clip_time(t, schedule))
    v = field(y, np.full(y.shape[0], t_bar), c)
    mean = transition_mean(y, v, t_bar, schedule)
    if not np.isfinite(mean).all():
        raise DivergenceError(f"non-finite transition mean at t={t}")
    sigma = float(diffusion_coeff(t_bar, schedule) * np.sqrt(schedule.dt))
    eps = np.asarray(noise, dtype=np.float64) if noise is not None else rng.standard_normal(y.shape)
    y_out = mean + sigma * eps
    if sigma > 0:
        lp = gaussian_log_prob(y_out, mean, sigma)
    else:
        lp = np.full(y.shape[0], np.nan)
    return SdeStepRecord(float(t), y, mean, sigma, y_out, lp, eps)


def sde_rollout(field: Callable, c, xi, schedule: SdeSchedule, rng: np.random.Generator | None = None,
                noises: Sequence | None = None) -> tuple[np.ndarray, list[SdeStepRecord]]:
    """Iterate ``sde_step`` over the uniform grid from the given prior draw ``xi``."""
    y = np.array(xi, dtype=np.float64)
    records = []
    for k, t in enumerate(schedule.times()):
        rec = sde_step(field, y, float(t), c, schedule, rng, None if noises is None else noises[k])
        records.append(rec)
        y = rec.y_out
    return y, records


def _check_sigmas(records: Sequence[SdeStepRecord], schedule: SdeSchedule) -> None:
    for rec in records:
        if rec.sigma == 0.0:
            raise ValueError("degenerate transition (sigma = 0): log-density undefined")
        expected = schedule.sigma(rec.t)
        if abs(rec.sigma - expected) > 1e-12 * max(1.0, expected):
            raise ValueError(f"recorded sigma {rec.sigma} at t={rec.t} does not match the schedule ({expected})")


def transition_stats(velocity_fn: Callable, records: Sequence[SdeStepRecord], c,
                     schedule: SdeSchedule) -> tuple[Tensor, Tensor]:
    """Per-step log-densities (S, B) and means (S, B, d) of the RECORDED outputs.

    ``velocity_fn(y, t, c)`` returns an autograd tensor, so gradients reach the
    parameters. All steps are evaluated in one batched call.
    """
    _check_sigmas(records, schedule)
    S = len(records)
    B, d = records[0].y_in.shape
    y_in = np.concatenate([r.y_in for r in records], axis=0)
    t_bar = np.concatenate([np.full(B, float(clip_time(r.t, schedule))) for r in records])
    if isinstance(c, Tensor):
        cc = ag.concat([c] * S, axis=0)
    else:
        cc = np.concatenate([np.asarray(c, dtype=np.float64)] * S, axis=0)
    v = velocity_fn(y_in, t_bar, cc)
    # same operation order as transition_mean, row-wise constants
    tb = t_bar[:, None]
    half_g2 = np.concatenate([np.full((B, 1), 0.5 * diffusion_coeff(float(clip_time(r.t, schedule)), schedule) ** 2)
                              for r in records])
    s = (v * tb - y_in) * (1.0 / (1.0 - tb))
    mean = y_in + (v + s * half_g2) * schedule.dt
    y_out = np.concatenate([r.y_out for r in records], axis=0)
    sig = np.concatenate([np.full((B, 1), r.sigma) for r in records])
    resid = ag.sub(y_out, mean)
    lp = ag.tsum(ag.square(resid), axis=-1, keepdims=True) * (-1.0 / (2.0 * sig * sig)) \
        - 0.5 * d * (LOG_2PI + 2.0 * np.log(sig))
    return ag.reshape(lp, (S, B)), ag.reshape(mean, (S, B, d))


def log_prob_under(velocity_fn: Callable, records: Sequence[SdeStepRecord], c,
                   schedule: SdeSchedule) -> Tensor:
    return transition_stats(velocity_fn, records, c, schedule)[0]


def dump_trace(path, records: Sequence[SdeStepRecord]) -> None:
    """JSON lines, one step record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "t": r.t, "sigma": r.sigma, "y_in": r.y_in.tolist(), "mean": r.mean.tolist(),
                "y_out": r.y_out.tolist(), "noise": r.noise.tolist(),
                "log_prob": [None if np.isnan(x) else float(x) for x in r.log_prob],
            }) + "\n")


def load_trace(path) -> list[SdeStepRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            out.append(SdeStepRecord(d["t"], np.array(d["y_in"]), np.array(d["mean"]), d["sigma"],
                                     np.array(d["y_out"]),
                                     np.array([np.nan if x is None else x for x in d["log_prob"]]),
                                     np.array(d["noise"])))
    return out
