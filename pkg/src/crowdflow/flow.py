"""Conditional vector field, flow-matching pretraining, Euler rollout and AdamW."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from . import encoder as enc
from .autograd import Tensor
from .core import TrajectoryWindow
from .nn import Params, cat, init_linear, linear
from .options import opt


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    t_fut: int = opt(12, "steps", "predicted steps; latent dimension is 2 * t_fut")
    hidden: int = opt(128, "-", "trunk width")
    depth: int = opt(3, "-", "trunk hidden layers")
    time_dim: int = opt(16, "-", "sinusoidal time-embedding width (even)")
    n_steps: int = opt(10, "-", "Euler steps for inference rollouts")
    latent_scale: float = opt(1.0, "m", "world units per latent unit")

    def __post_init__(self):
        if self.n_steps < 1 or self.depth < 1 or self.hidden < 1 or self.time_dim % 2:
            raise ValueError("invalid flow network shape")
        if self.latent_scale <= 0:
            raise ValueError("latent_scale must be positive")

    @property
    def latent_dim(self) -> int:
        return 2 * self.t_fut


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = opt(1e-4, "-", "AdamW step size")
    batch_size: int = opt(16, "windows", "windows per gradient step")
    steps: int = opt(2000, "-", "gradient steps")
    seed: int = opt(0, "-", "seed for init / batches / flow-matching draws")
    beta1: float = opt(0.9, "-", "first-moment decay")
    beta2: float = opt(0.999, "-", "second-moment decay")
    adam_eps: float = opt(1e-8, "-", "denominator stabiliser")
    weight_decay: float = opt(0.0, "-", "decoupled weight decay")
    grad_clip: float = opt(1.0, "-", "global gradient-norm clip (0 disables)")
    lr_final: float = opt(0.0, "-", "if > 0, cosine-decay the step size to this value")

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("invalid batch_size / steps")


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=-1)


def init_params(cfg: FlowConfig, ctx_dim: int, rng: np.random.Generator) -> Params:
    p: Params = {}
    init_linear(p, "ctx", ctx_dim, ctx_dim, rng)
    n_in = cfg.latent_dim + cfg.time_dim + ctx_dim
    for k in range(cfg.depth):
        init_linear(p, f"trunk.{k}", n_in if k == 0 else cfg.hidden, cfg.hidden, rng)
    init_linear(p, "trunk.out", cfg.hidden, cfg.latent_dim, rng, gain=0.1)
    return p


def velocity(params: Params, cfg: FlowConfig, y, t, c) -> Tensor:
    """v_theta(y, t, c) for a batch: y (B, 2T_f), t (B,) or scalar, c (B, D)."""
    y = ag.as_tensor(y)
    B = y.shape[0]
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    temb = Tensor(time_embedding(tt, cfg.time_dim))
    cond = ag.tanh(linear(params, "ctx", ag.as_tensor(c)))
    h = cat(y, temb, cond)
    for k in range(cfg.depth):
        h = ag.tanh(linear(params, f"trunk.{k}", h))
    return linear(params, "trunk.out", h)


Field = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def make_field(params: Params, cfg: FlowConfig) -> Field:
    """No-grad numpy vector field closure over frozen parameters."""
    fp = enc.frozen(params)

    def field(y, t, c):
        return velocity(fp, cfg, y, t, c).data
    return field


def cfm_path(y1, xi, t):
    """Linear Gaussian path: y_t = t*y1 + (1-t)*xi, target velocity y1 - xi."""
    y1 = np.asarray(y1, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and y1.ndim == 2:
        t = t[:, None]
    return t * y1 + (1.0 - t) * xi, y1 - xi


def ode_rollout(field: Field, c, xi, n_steps: int, tau_min: float = 0.0) -> np.ndarray:
    """Explicit Euler from t=0 to 1 starting at ``xi``; returns the final latent.

    With ``tau_min > 0`` the field is evaluated at clip(t, tau_min, 1 - tau_min),
    matching the stochastic sampler's time grid.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    y = np.array(xi, dtype=np.float64)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        t = k * dt
        if tau_min > 0:
            t = min(max(t, tau_min), 1.0 - tau_min)
        y = y + field(y, np.full(y.shape[0], t), c) * dt
        if not np.isfinite(y).all():
            raise DivergenceError(f"non-finite ODE state at step {k}")
    return y


def latent_to_traj(y: np.ndarray, cfg: FlowConfig) -> np.ndarray:
    return (np.asarray(y) * cfg.latent_scale).reshape(*np.shape(y)[:-1], cfg.t_fut, 2)


def traj_to_latent(traj: np.ndarray, cfg: FlowConfig) -> np.ndarray:
    traj = np.asarray(traj, dtype=np.float64)
    return traj.reshape(*traj.shape[:-2], -1) / cfg.latent_scale


# --- pretraining ----------------------------------------------------------------

class CfmBatch(NamedTuple):
    prepared: list           # encoder.PreparedWindow per window
    y1: np.ndarray           # (N, 2T_f) latent targets
    t: np.ndarray            # (N,)
    xi: np.ndarray           # (N, 2T_f)


def make_cfm_batch(windows: Sequence[TrajectoryWindow], enc_cfg: enc.EncoderConfig, cfg: FlowConfig,
                   rng: np.random.Generator, prepared: Sequence | None = None) -> CfmBatch:
    prep = list(prepared) if prepared is not None else [enc.prepare(w, enc_cfg) for w in windows]
    y1 = np.concatenate([traj_to_latent(w.future_relative(), cfg) for w in windows], axis=0)
    t = rng.uniform(0.0, 1.0, size=y1.shape[0])
    xi = rng.standard_normal(y1.shape)
    return CfmBatch(prep, y1, t, xi)


def cfm_loss(enc_params: Params, flow_params: Params, batch: CfmBatch,
             enc_cfg: enc.EncoderConfig, cfg: FlowConfig) -> Tensor:
    """Mean squared error between v_theta(y_t, t, c) and y1 - xi (encoder trained jointly)."""
    tokens = enc.encode_prepared(enc_params, batch.prepared, enc_cfg).tokens
    y_t, u = cfm_path(batch.y1, batch.xi, batch.t)
    diff = velocity(flow_params, cfg, y_t, batch.t, tokens) - u
    loss = ag.mean(ag.square(diff))
    if not np.isfinite(loss.data):
        raise DivergenceError("non-finite flow-matching loss")
    return loss


# --- optimiser ------------------------------------------------------------------

class AdamState:
    def __init__(self, params: Params):
        self.step = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": a for k, a in self.m.items()}
        out.update({f"opt.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, params: Params, arrs: dict, step: int) -> "AdamState":
        st = cls(params)
        st.step = int(step)
        for k in params:
            st.m[k] = np.array(arrs[f"opt.m.{k}"])
            st.v[k] = np.array(arrs[f"opt.v.{k}"])
        return st


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm <= max_norm; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def optimizer_step(params: Params, grads: dict[str, np.ndarray], state: AdamState,
                   lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                   weight_decay: float = 0.0) -> None:
    """AdamW: bias-corrected moments, decay decoupled from the gradient."""
    state.step += 1
    b1c = 1.0 - beta1 ** state.step
    b2c = 1.0 - beta2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {k}")
        m = state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v = state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        new = p.data * (1.0 - lr * weight_decay) if weight_decay else p.data.copy()
        new -= lr * (m / b1c) / (np.sqrt(v / b2c) + eps)
        p.data = new


def lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_final <= 0 or cfg.steps <= 1:
        return cfg.learning_rate
    frac = min(step / (cfg.steps - 1), 1.0)
    return cfg.lr_final + 0.5 * (cfg.learning_rate - cfg.lr_final) * (1.0 + np.cos(np.pi * frac))
