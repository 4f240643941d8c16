"""Model bundle, checkpoints and the flow-matching pretraining loop."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import encoder as enc
from . import flow
from . import rng as rngmod
from .core import TrajectoryWindow
from .flow import AdamState, DivergenceError, FlowConfig, TrainConfig
from .nn import Params, arrays, from_arrays, grads, load_blob, save_blob, zero_grad
from .options import from_dict, to_dict


@dataclass
class Model:
    enc_cfg: enc.EncoderConfig
    flow_cfg: FlowConfig
    enc_params: Params
    flow_params: Params
    t_hist: int = 8

    def trainable(self) -> Params:
        out = {f"enc.{k}": v for k, v in self.enc_params.items()}
        out.update({f"flow.{k}": v for k, v in self.flow_params.items()})
        return out


def init_model(enc_cfg: enc.EncoderConfig, flow_cfg: FlowConfig, seed: int, t_hist: int = 8) -> Model:
    ep = enc.init_params(enc_cfg, rngmod.stream(seed, "init", 0), t_hist)
    fp = flow.init_params(flow_cfg, enc_cfg.dim, rngmod.stream(seed, "init", 1))
    return Model(enc_cfg, flow_cfg, ep, fp, t_hist)


def save_checkpoint(prefix, model: Model, opt_state: AdamState | None = None, meta: dict | None = None):
    arrs = {k: v.data for k, v in model.trainable().items()}
    info = dict(meta or {})
    info["encoder"] = to_dict(model.enc_cfg)
    info["flow"] = to_dict(model.flow_cfg)
    info["t_hist"] = model.t_hist
    if opt_state is not None:
        arrs.update(opt_state.arrays())
        info["opt_step"] = opt_state.step
    return save_blob(prefix, arrs, info)


def load_checkpoint(prefix) -> tuple[Model, AdamState | None, dict]:
    arrs, meta = load_blob(prefix)
    ec = from_dict(enc.EncoderConfig, meta["encoder"], "checkpoint.encoder")
    fc = from_dict(FlowConfig, meta["flow"], "checkpoint.flow")
    ep = from_arrays({k[4:]: v for k, v in arrs.items() if k.startswith("enc.")})
    fp = from_arrays({k[5:]: v for k, v in arrs.items() if k.startswith("flow.")})
    model = Model(ec, fc, ep, fp, int(meta.get("t_hist", 8)))
    state = None
    if "opt_step" in meta:
        # posttraining states name flow parameters without the "flow." prefix
        lookup = dict(fp, **model.trainable())
        names = [k[len("opt.m."):] for k in arrs if k.startswith("opt.m.")]
        state = AdamState.from_arrays({k: lookup[k] for k in names}, arrs, meta["opt_step"])
    return model, state, meta


def checkpoint_prefix(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def pretrain(model: Model, windows: Sequence[TrajectoryWindow], cfg: TrainConfig, log_path=None,
             opt_state: AdamState | None = None, start_step: int = 0,
             on_step: Callable[[int, float], None] | None = None) -> tuple[AdamState, list[dict]]:
    """Joint encoder + flow training on the flow-matching loss; updates ``model`` in place.

    Batch choice and flow-matching draws are keyed by step index, so resuming at
    ``start_step`` with the saved optimiser state reproduces an uninterrupted run.
    """
    if not windows:
        raise ValueError("no training windows")
    params = model.trainable()
    state = opt_state if opt_state is not None else AdamState(params)
    prepared = [enc.prepare(w, model.enc_cfg) for w in windows]
    bs = min(cfg.batch_size, len(windows))
    log = []
    fh = open(log_path, "a" if start_step else "w", encoding="utf-8") if log_path is not None else None
    try:
        for step in range(start_step, cfg.steps):
            idx = np.sort(rngmod.stream(cfg.seed, "batch", step).choice(len(windows), bs, replace=False))
            batch = flow.make_cfm_batch([windows[i] for i in idx], model.enc_cfg, model.flow_cfg,
                                        rngmod.stream(cfg.seed, "prior", step), [prepared[i] for i in idx])
            zero_grad(params)
            loss = flow.cfm_loss(model.enc_params, model.flow_params, batch, model.enc_cfg, model.flow_cfg)
            loss.backward()
            g = grads(params)
            norm = flow.clip_grads(g, cfg.grad_clip)
            if not np.isfinite(norm):
                raise DivergenceError(f"non-finite gradient at step {step}")
            lr = flow.lr_at(cfg, step)
            flow.optimizer_step(params, g, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
            rec = {"step": step, "loss": float(loss.data), "grad_norm": norm, "lr": lr}
            log.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(step, float(loss.data))
    finally:
        if fh is not None:
            fh.close()
    return state, log


def params_digest(model: Model) -> str:
    import hashlib
    h = hashlib.sha256()
    for k, v in sorted(arrays(model.trainable()).items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return h.hexdigest()
