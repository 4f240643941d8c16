"""Command-line entry point: gen-synth, train-flow, posttrain-grpo, eval, score."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as datamod
from . import grpo as grpomod
from . import metrics as metricsmod
from . import pipeline
from .config import RunConfig, input_files, load_dataset, load_run_config
from .core import FrameError
from .data import AnnotationError
from .flow import DivergenceError
from .options import ConfigError, describe, to_dict
from .reward import score_window
from .scene import ProjectionError, save_scene_map

log = logging.getLogger("crowdflow")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
PRED_FORMAT = "crowdflow-predictions"
SCORE_COLUMNS = ("scene_id", "agent_id", "g", "r_sv", "r_map", "r_acc", "r_sm", "total")


class DataError(Exception):
    pass


def git_blob_id(content: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(content) + content).hexdigest()


def provenance(cfg: RunConfig, paths, command: str) -> dict:
    """Config echo plus content ids of every input file and one combined id."""
    cfg_bytes = json.dumps(to_dict(cfg), sort_keys=True).encode()
    files = {}
    for p in paths:
        p = Path(p)
        files[p.name] = git_blob_id(p.read_bytes())
    combined = git_blob_id(cfg_bytes + "".join(f"{k}:{v}\n" for k, v in sorted(files.items())).encode())
    return {"command": command, "config": to_dict(cfg), "inputs": files, "input_hash": combined}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _checkpoint_files(prefix) -> list[Path]:
    prefix = pipeline.checkpoint_prefix(prefix)
    return [prefix.with_suffix(".bin"), prefix.with_suffix(".json")]


def _load_model(path):
    prefix = pipeline.checkpoint_prefix(path)
    for f in _checkpoint_files(prefix):
        if not f.exists():
            raise DataError(f"checkpoint file missing: {f}")
    return pipeline.load_checkpoint(prefix)


def _check_model(cfg: RunConfig, model: pipeline.Model) -> None:
    if model.flow_cfg.t_fut != cfg.data.t_fut or model.t_hist != cfg.data.t_hist:
        raise ConfigError("checkpoint window geometry does not match data.t_hist / data.t_fut")


# --- commands -----------------------------------------------------------------------

def cmd_gen_synth(cfg: RunConfig, args, base: Path) -> int:
    out = Path(cfg.out_dir)
    if not cfg.data.synth:
        raise ConfigError("gen-synth needs data.synth")
    sources = []
    for i, sc in enumerate(cfg.data.synth):
        sc = replace(sc, t_hist=cfg.data.t_hist, t_fut=cfg.data.t_fut)
        ds = datamod.generate_synthetic(sc)
        stem = f"{sc.scenario}_{i}"
        ann = out / f"{stem}.txt"
        ann.write_text(datamod.format_annotations(datamod.windows_to_annotations(ds.windows)), encoding="utf-8")
        entry = {"annotations": ann.name, "scene_id": stem, "dt": sc.dt}
        if ds.scene_map is not None:
            save_scene_map(out / f"{stem}.pgm", ds.scene_map)
            entry["map"] = f"{stem}.pgm"
        sources.append(entry)
        log.info("wrote %d windows to %s", len(ds.windows), ann)
    manifest = {"data": {"sources": sources, "t_hist": cfg.data.t_hist, "t_fut": cfg.data.t_fut,
                         "holdout_fraction": cfg.data.holdout_fraction}}
    _write_json(out / "dataset.json", manifest)
    _write_json(out / "gen_synth.meta.json", provenance(cfg, [], "gen-synth"))
    return 0


def cmd_train_flow(cfg: RunConfig, args, base: Path) -> int:
    out = Path(cfg.out_dir)
    ds = load_dataset(cfg, base)
    if args.resume:
        model, state, meta = _load_model(args.resume)
        start = int(meta.get("step", 0))
    else:
        model = pipeline.init_model(cfg.encoder, cfg.flow, cfg.seed, cfg.data.t_hist)
        state, start = None, 0
    _check_model(cfg, model)
    prefix = out / "pretrained"
    try:
        state, _ = pipeline.pretrain(model, ds.train, cfg.train, out / "pretrain_loss.jsonl", state, start)
    except DivergenceError:
        pipeline.save_checkpoint(out / "diverged", model, None, {"seed": cfg.seed})
        raise
    meta = provenance(cfg, input_files(cfg, base) + (_checkpoint_files(args.resume) if args.resume else []),
                      "train-flow")
    meta.update({"seed": cfg.seed, "step": cfg.train.steps, "stage": "pretrained"})
    pipeline.save_checkpoint(prefix, model, state, meta)
    log.info("checkpoint written to %s", prefix)
    return 0


def cmd_posttrain(cfg: RunConfig, args, base: Path) -> int:
    out = Path(cfg.out_dir)
    model, _, _ = _load_model(args.checkpoint)
    _check_model(cfg, model)
    ds = load_dataset(cfg, base)
    meta = provenance(cfg, input_files(cfg, base) + _checkpoint_files(args.checkpoint), "posttrain-grpo")
    meta.update({"seed": cfg.seed, "stage": "posttrained"})
    every = args.checkpoint_every

    def on_update(u, policy, encoder, state):
        if every and (u + 1) % every == 0:
            snap = pipeline.Model(model.enc_cfg, model.flow_cfg, encoder, policy, model.t_hist)
            pipeline.save_checkpoint(out / f"posttrained_u{u + 1}", snap, state, dict(meta, update=u + 1))

    try:
        res = grpomod.posttrain(model.enc_params, model.flow_params, ds.train, ds.scenes, model.enc_cfg,
                                model.flow_cfg, cfg.sde, cfg.reward, cfg.grpo, out / "grpo_log.jsonl", on_update)
    except DivergenceError as exc:
        last = getattr(exc, "result", None)
        if last is not None:
            snap = pipeline.Model(model.enc_cfg, model.flow_cfg, last.enc_params, last.flow_params, model.t_hist)
            pipeline.save_checkpoint(out / "posttrained_last_good", snap, last.opt_state,
                                     dict(meta, update=len(last.log)))
        raise
    final = pipeline.Model(model.enc_cfg, model.flow_cfg, res.enc_params, res.flow_params, model.t_hist)
    pipeline.save_checkpoint(out / "posttrained", final, res.opt_state, dict(meta, update=len(res.log)))
    return 0


def _predictions_doc(windows, preds) -> dict:
    return {"format": PRED_FORMAT, "version": 1, "frame": "relative",
            "windows": [{"scene_id": w.scene_id, "agent_ids": list(w.agent_ids), "samples": p.tolist()}
                        for w, p in zip(windows, preds)]}


def cmd_eval(cfg: RunConfig, args, base: Path) -> int:
    out = Path(cfg.out_dir)
    model, _, _ = _load_model(args.checkpoint)
    _check_model(cfg, model)
    ds = load_dataset(cfg, base)
    windows = ds.eval if args.split == "eval" else ds.train
    if not windows:
        raise DataError(f"no windows in the {args.split} split")
    delta = cfg.reward.map.delta_map
    preds = metricsmod.flow_predictions(model.enc_params, model.flow_params, windows, model.enc_cfg,
                                        model.flow_cfg, cfg.metrics.K, cfg.seed)
    report = metricsmod.evaluate_predictions(preds, windows, cfg.metrics, ds.scenes, delta)
    report["seed"] = cfg.seed
    report["split"] = args.split
    report["baseline_constant_velocity"] = metricsmod.evaluate_predictor(
        lambda w: metricsmod.constant_velocity(w, 1), windows, cfg.metrics, ds.scenes, delta)["horizons"]
    report["provenance"] = provenance(cfg, input_files(cfg, base) + _checkpoint_files(args.checkpoint), "eval")
    name = args.name or "report"
    _write_json(out / f"{name}.json", report)
    (out / f"{name}.csv").write_text(metricsmod.report_csv(report), encoding="utf-8")
    if args.dump_predictions:
        _write_json(out / f"{name}_predictions.json", _predictions_doc(windows, preds))
    h = report["horizons"][-1]
    log.info("%.1f s: ADE_min %.4f FDE_min %.4f col %.2f%%", h["seconds"], h["ade_min"], h["fde_min"], h["col_rate"])
    return 0


def load_predictions(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"prediction file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("format") != PRED_FORMAT or doc.get("frame") != "relative":
        raise DataError(f"{path}: expected a relative-frame {PRED_FORMAT} document")
    return doc


def cmd_score(cfg: RunConfig, args, base: Path) -> int:
    out = Path(cfg.out_dir)
    doc = load_predictions(args.predictions)
    ds = load_dataset(cfg, base)
    by_id = {w.scene_id: w for w in ds.train + ds.eval}
    rows = []
    for entry in doc["windows"]:
        win = by_id.get(entry["scene_id"])
        if win is None:
            raise DataError(f"unknown scene_id {entry['scene_id']!r} in predictions")
        if list(entry.get("agent_ids", win.agent_ids)) != list(win.agent_ids):
            raise DataError(f"agent set mismatch for {entry['scene_id']}")
        samples = np.asarray(entry["samples"], dtype=np.float64)
        if samples.ndim != 4 or samples.shape[1:] != (win.n_agents, win.t_fut, 2):
            raise DataError(f"{entry['scene_id']}: samples must be (G, {win.n_agents}, {win.t_fut}, 2)")
        scene = ds.scenes.get(win.map_key) if win.map_key is not None else None
        rb = score_window(samples, win, scene, cfg.reward)
        for g in range(samples.shape[0]):
            for a, aid in enumerate(win.agent_ids):
                rows.append([win.scene_id, aid, g] + [repr(float(getattr(rb, k)[g, a]))
                                                      for k in ("r_sv", "r_map", "r_acc", "r_sm", "total")])
    name = args.name or "scores"
    with open(out / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        w.writerows(rows)
    _write_json(out / f"{name}.meta.json",
                provenance(cfg, input_files(cfg, base) + [Path(args.predictions)], "score"))
    return 0


COMMANDS = {
    "gen-synth": (cmd_gen_synth, "simulate synthetic crowds and write annotation / map files"),
    "train-flow": (cmd_train_flow, "pretrain encoder + flow network with flow matching"),
    "posttrain-grpo": (cmd_posttrain, "post-train the flow sampler with group-relative policy optimisation"),
    "eval": (cmd_eval, "best-of-K displacement, collision and map-violation metrics per horizon"),
    "score": (cmd_score, "per-agent, per-rollout reward breakdown of a prediction file as CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(["config keys (JSON, unknown keys are rejected):"] + describe(RunConfig))
    env = "\nenvironment:\n  FLOWGRPO_LOG  log level (DEBUG, INFO, WARNING, ERROR); default WARNING"
    parser = argparse.ArgumentParser(prog="crowdflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=keys + "\n" + env,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--threads", type=int, help="cap on BLAS worker threads")
        if name == "train-flow":
            p.add_argument("--resume", help="checkpoint to continue from (its saved step)")
        if name in ("posttrain-grpo", "eval"):
            p.add_argument("--checkpoint", required=True, help="checkpoint prefix or .json/.bin path")
        if name == "posttrain-grpo":
            p.add_argument("--checkpoint-every", type=int, default=0, help="also save every N updates")
        if name == "eval":
            p.add_argument("--split", choices=("eval", "train"), default="eval")
            p.add_argument("--name", help="output file stem (default: report)")
            p.add_argument("--dump-predictions", action="store_true", help="also write the predicted samples")
        if name == "score":
            p.add_argument("--predictions", required=True, help="prediction file (relative frame)")
            p.add_argument("--name", help="output file stem (default: scores)")
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("FLOWGRPO_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out_dir"] = args.out
        cfg = load_run_config(args.config, overrides)
        base = Path(args.config).parent if args.config else Path(".")
        try:
            Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot create output directory {cfg.out_dir}: {exc}") from exc
        with _thread_limit(args.threads), np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[args.command][0](cfg, args, base)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, AnnotationError, FrameError, ProjectionError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
