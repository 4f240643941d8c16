"""Group-relative policy optimisation of the flow sampler.

A condition is one agent of one window. All agents of a window are rolled
out together so the social reward sees co-sampled neighbours: rollout g of
the window is a joint world in which every agent uses its own g-th sample.
Latent rows are ordered g-major (row = g * A + agent).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from . import encoder as enc
from . import flow
from . import rng as rngmod
from .autograd import Tensor
from .core import TrajectoryWindow
from .flow import AdamState, DivergenceError
from .metrics import collision_flags
from .nn import Params, clone, grads, zero_grad
from .options import opt
from .reward import RewardBreakdown, RewardConfig, score_window
from .scene import SceneMap
from .sde import SdeSchedule, sde_rollout, transition_stats


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = opt(4, "-", "rollouts per condition (G)")
    eps_clip: float = opt(0.2, "-", "ratio clip half-width")
    beta: float = opt(0.01, "-", "weight of the reference-mean penalty")
    eps_adv: float = opt(1e-8, "-", "advantage denominator stabiliser")
    steps_per_update: int = opt(1, "-", "gradient epochs over each collected batch (1 = strictly on-policy)")
    total_updates: int = opt(100, "-", "number of collect-then-optimise updates")
    seed: int = opt(0, "-", "seed for condition order and rollouts")
    conditions_per_update: int = opt(4, "windows", "windows collected per update (every agent is a condition)")
    learning_rate: float = opt(1e-4, "-", "AdamW step size")
    grad_clip: float = opt(1.0, "-", "global gradient-norm clip (0 disables)")
    train_encoder: bool = opt(False, "-", "also update the encoder (frozen by default)")
    collision_threshold: float = opt(0.2, "m", "distance used for the logged collision count")

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0 < self.eps_clip < 1:
            raise ValueError("eps_clip must be in (0, 1)")
        if self.beta < 0 or self.eps_adv < 0:
            raise ValueError("beta and eps_adv must be >= 0")
        if self.steps_per_update < 1 or self.total_updates < 0 or self.conditions_per_update < 1:
            raise ValueError("invalid update schedule")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


def advantages(rewards, eps_adv: float = 1e-8) -> np.ndarray:
    """Standardise over the first axis (the group) with the population std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape[0] < 2:
        raise ValueError("need a group of at least two rewards")
    centred = r - r.mean(axis=0)
    return centred / (r.std(axis=0) + eps_adv)


def kl_same_variance(mean_a, mean_b, sigma):
    """KL between isotropic Gaussians sharing ``sigma``: |mean_a - mean_b|^2 / (2 sigma^2)."""
    diff = np.asarray(mean_a, dtype=np.float64) - np.asarray(mean_b, dtype=np.float64)
    return (diff * diff).sum(-1) / (2.0 * np.asarray(sigma, dtype=np.float64) ** 2)


class RolloutGroup(NamedTuple):
    window: TrajectoryWindow
    window_index: int
    tokens: np.ndarray              # (A, D) context used at sampling time
    prepared: enc.PreparedWindow | None
    scene: SceneMap | None
    xi: np.ndarray                  # (A, d) shared by every g
    records: list                   # SdeStepRecord per step, batch G * A
    trajectories: np.ndarray        # (G, A, T, 2) relative
    rewards: RewardBreakdown        # arrays (G, A)
    advantages: np.ndarray          # (G, A)
    old_log_probs: np.ndarray       # (S, G * A)
    ref_means: np.ndarray           # (S, G * A, d)

    @property
    def group_size(self) -> int:
        return self.trajectories.shape[0]


def _velocity_fn(params: Params, flow_cfg: flow.FlowConfig) -> Callable:
    def fn(y, t, c):
        return flow.velocity(params, flow_cfg, y, t, c)
    return fn


def collect_group(flow_params: Params, ref_params: Params, window: TrajectoryWindow, tokens: np.ndarray,
                  scene: SceneMap | None, schedule: SdeSchedule, flow_cfg: flow.FlowConfig,
                  reward_cfg: RewardConfig, cfg: GrpoConfig, rng: np.random.Generator,
                  window_index: int = 0, prepared: enc.PreparedWindow | None = None,
                  ref_tokens: np.ndarray | None = None) -> RolloutGroup:
    """G stochastic rollouts per agent from one shared prior draw, scored and frozen for the loss.

    ``ref_tokens`` is the reference model's own context; it differs from
    ``tokens`` only once the encoder is being post-trained.
    """
    if schedule.eta <= 0:
        raise ValueError("group collection needs eta > 0")
    G, A, d = cfg.group_size, window.n_agents, flow_cfg.latent_dim
    tokens = np.asarray(tokens, dtype=np.float64)
    xi = rng.standard_normal((A, d))
    c = np.tile(tokens, (G, 1))
    field = flow.make_field(flow_params, flow_cfg)
    y, records = sde_rollout(field, c, np.tile(xi, (G, 1)), schedule, rng)
    traj = flow.latent_to_traj(y, flow_cfg).reshape(G, A, flow_cfg.t_fut, 2)
    rewards = score_window(traj, window, scene, reward_cfg)
    adv = advantages(rewards.total, cfg.eps_adv)
    old_lp = transition_stats(_velocity_fn(enc.frozen(flow_params), flow_cfg), records, c, schedule)[0].data
    c_ref = c if ref_tokens is None else np.tile(np.asarray(ref_tokens, dtype=np.float64), (G, 1))
    ref_mean = transition_stats(_velocity_fn(enc.frozen(ref_params), flow_cfg), records, c_ref, schedule)[1].data
    return RolloutGroup(window, window_index, tokens, prepared, scene, xi, records, traj, rewards, adv,
                        old_lp, ref_mean)


class LossParts(NamedTuple):
    loss: Tensor
    surrogate: float
    kl_pen: float
    ratios: np.ndarray              # concatenated over groups, (S, sum of G * A)
    clip_fraction: float


def grpo_loss(flow_params: Params, groups: Sequence[RolloutGroup], cfg: GrpoConfig, schedule: SdeSchedule,
              flow_cfg: flow.FlowConfig, enc_params: Params | None = None,
              enc_cfg: enc.EncoderConfig | None = None) -> LossParts:
    """Clipped surrogate plus reference-mean penalty, averaged over every (rollout, agent, step).

    With ``enc_params`` the context is recomputed through the encoder so it
    receives gradients too; otherwise the stored tokens are constants.
    """
    vel = _velocity_fn(flow_params, flow_cfg)
    terms, surr_sum, pen_sum, count = [], 0.0, 0.0, 0
    all_ratios, clipped = [], 0
    for grp in groups:
        G = grp.group_size
        if enc_params is not None:
            tok = enc.encode_prepared(enc_params, [grp.prepared], enc_cfg).tokens
            c = ag.concat([tok] * G, axis=0)
        else:
            c = np.tile(grp.tokens, (G, 1))
        logp, mean = transition_stats(vel, grp.records, c, schedule)
        log_ratio = logp - grp.old_log_probs
        bad = ~np.isfinite(log_ratio.data)
        if bad.any():
            s, b = np.argwhere(bad)[0]
            raise DivergenceError(f"non-finite ratio in {grp.window.scene_id} at rollout g={b // grp.window.n_agents}, step t={s}")
        ratio = ag.exp(log_ratio)
        if not np.isfinite(ratio.data).all():
            s, b = np.argwhere(~np.isfinite(ratio.data))[0]
            raise DivergenceError(f"ratio overflow in {grp.window.scene_id} at rollout g={b // grp.window.n_agents}, step t={s}")
        adv = grp.advantages.reshape(1, -1)                                   # (1, G * A)
        unclipped = ratio * adv
        clipped_r = ag.clip(ratio, 1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip) * adv
        surrogate = ag.neg(ag.minimum(unclipped, clipped_r))
        sig = np.array([r.sigma for r in grp.records])[:, None]               # (S, 1)
        diff = mean - grp.ref_means
        pen = ag.tsum(ag.square(diff), axis=-1) * (cfg.beta / (2.0 * sig * sig))
        per = surrogate + pen
        terms.append(ag.tsum(per))
        count += per.data.size
        surr_sum += float(surrogate.data.sum())
        pen_sum += float(pen.data.sum())
        all_ratios.append(ratio.data)
        clipped += int((np.abs(ratio.data - 1.0) > cfg.eps_clip).sum())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    loss = total * (1.0 / count)
    if not np.isfinite(loss.data):
        raise DivergenceError("non-finite post-training loss")
    return LossParts(loss, surr_sum / count, pen_sum / count, np.concatenate(all_ratios, axis=1),
                     clipped / count)


class PosttrainResult(NamedTuple):
    flow_params: Params
    enc_params: Params
    log: list
    opt_state: AdamState


def _condition_order(seed: int, n: int):
    """Endless stream of window indices: a fresh permutation per pass."""
    epoch = 0
    while True:
        yield from rngmod.stream(seed, "batch", epoch).permutation(n).tolist()
        epoch += 1


def posttrain(enc_params: Params, flow_params: Params, windows: Sequence[TrajectoryWindow],
              scenes: dict, enc_cfg: enc.EncoderConfig, flow_cfg: flow.FlowConfig, schedule: SdeSchedule,
              reward_cfg: RewardConfig, cfg: GrpoConfig, log_path=None,
              on_update: Callable[[int, Params, Params, AdamState], None] | None = None) -> PosttrainResult:
    """Collect groups, take ``steps_per_update`` AdamW steps on the loss, repeat.

    The reference model is ``flow_params`` conditioned on ``enc_params`` tokens,
    both as given at entry and never updated. Inputs are not modified. If the loss diverges the exception carries
    the last good parameters as ``exc.result``.
    """
    ref = enc.frozen(clone(flow_params))
    policy = clone(flow_params)
    encoder = clone(enc_params)
    trainable = dict(policy)
    if cfg.train_encoder:
        trainable.update({f"enc.{k}": v for k, v in encoder.items()})
    state = AdamState(trainable)
    ref_tokens = enc.encode_windows(enc.frozen(encoder), list(windows), enc_cfg)
    fixed_tokens = None if cfg.train_encoder else ref_tokens
    order = _condition_order(cfg.seed, len(windows))
    log: list[dict] = []
    fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for u in range(cfg.total_updates):
            good = {k: v.data.copy() for k, v in trainable.items()}
            try:
                record = _update(u, policy, ref, encoder, trainable, state, windows, scenes, fixed_tokens,
                                 ref_tokens, order, enc_cfg, flow_cfg, schedule, reward_cfg, cfg)
            except (DivergenceError, FloatingPointError) as exc:
                for k, v in trainable.items():
                    v.data = good[k]
                err = DivergenceError(f"update {u}: {exc}")
                err.result = PosttrainResult(policy, encoder, log, state)  # type: ignore[attr-defined]
                raise err from exc
            log.append(record)
            if fh is not None:
                fh.write(json.dumps(record, sort_keys=False) + "\n")
                fh.flush()
            if on_update is not None:
                on_update(u, policy, encoder, state)
    finally:
        if fh is not None:
            fh.close()
    return PosttrainResult(policy, encoder, log, state)


def _update(u, policy, ref, encoder, trainable, state, windows, scenes, fixed_tokens, ref_tokens, order,
            enc_cfg, flow_cfg, schedule, reward_cfg, cfg: GrpoConfig) -> dict:
    groups = []
    enc_snapshot = enc.frozen(encoder)
    for _ in range(cfg.conditions_per_update):
        w = next(order)
        win = windows[w]
        prep = enc.prepare(win, enc_cfg) if cfg.train_encoder else None
        if fixed_tokens is not None:
            tokens = fixed_tokens[w]
        else:
            tokens = enc.encode_prepared(enc_snapshot, [prep], enc_cfg).tokens.data
        scene = scenes.get(win.map_key) if win.map_key is not None else None
        rng = rngmod.stream(cfg.seed, "sde", u, w)
        groups.append(collect_group(policy, ref, win, tokens, scene, schedule, flow_cfg, reward_cfg, cfg,
                                    rng, w, prep, ref_tokens[w]))
    grad_norm = 0.0
    parts = None
    for _ in range(cfg.steps_per_update):
        zero_grad(trainable)
        parts = grpo_loss(policy, groups, cfg, schedule, flow_cfg,
                          encoder if cfg.train_encoder else None, enc_cfg)
        parts.loss.backward()
        g = grads(trainable)
        grad_norm = flow.clip_grads(g, cfg.grad_clip)
        if not np.isfinite(grad_norm):
            raise DivergenceError("non-finite gradient")
        flow.optimizer_step(trainable, g, state, cfg.learning_rate)
    rew = [grp.rewards for grp in groups]

    def avg(field):
        return float(np.mean(np.concatenate([getattr(r, field).ravel() for r in rew])))
    collisions = [collision_flags(grp.trajectories + grp.window.origin[None, :, None, :],
                                  grp.trajectories.shape[2], cfg.collision_threshold).sum()
                  / grp.group_size for grp in groups]
    return {
        "update": u,
        "mean_reward": avg("total"),
        "mean_r_sv": avg("r_sv"),
        "mean_r_map": avg("r_map"),
        "mean_r_acc": avg("r_acc"),
        "mean_r_sm": avg("r_sm"),
        "kl_pen": parts.kl_pen,
        "grad_norm": grad_norm,
        "mean_collisions": float(np.mean(collisions)),
        "clip_fraction": parts.clip_fraction,
        "loss": float(parts.loss.data),
    }
