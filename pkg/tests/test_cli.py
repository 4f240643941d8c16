import csv
import json
import shutil
import time

import numpy as np
import pytest

from crowdflow import cli, pipeline
from crowdflow.config import load_dataset, load_run_config
from crowdflow.data import load_annotations
from crowdflow.encoder import EncoderConfig
from crowdflow.flow import FlowConfig
from crowdflow.scene import load_scene_map

SMALL = {
    "encoder": {"dim": 16},
    "flow": {"hidden": 32, "depth": 2},
    "train": {"steps": 20, "batch_size": 4, "learning_rate": 1e-3},
    "grpo": {"total_updates": 3, "conditions_per_update": 2},
    "metrics": {"K": 4},
}


def gen(tmp_path, name="synth", scenarios=("corridor", "obstacle_field"), n_windows=6, seed=0):
    out = tmp_path / name
    cfg = tmp_path / f"{name}_gen.json"
    cfg.write_text(json.dumps({"data": {"synth": [
        {"scenario": s, "n_agents": 3, "n_windows": n_windows, "seed": seed} for s in scenarios]}}))
    assert cli.main(["gen-synth", "--config", str(cfg), "--out", str(out)]) == 0
    return out


def run_config(data_dir, extra=None, **sections):
    manifest = json.loads((data_dir / "dataset.json").read_text())
    doc = dict(SMALL, **manifest)
    doc.update(sections)
    doc.update(extra or {})
    path = data_dir / "run.json"
    path.write_text(json.dumps(doc))
    return path


def test_gen_synth_round_trip_and_map_load_back(tmp_path):
    out = gen(tmp_path)
    files = sorted(p.name for p in out.iterdir())
    assert {"corridor_0.txt", "obstacle_field_1.txt", "obstacle_field_1.pgm", "obstacle_field_1.json",
            "dataset.json", "gen_synth.meta.json"} <= set(files)
    recs = load_annotations(out / "corridor_0.txt")
    assert len(recs) > 0
    scene = load_scene_map(out / "obstacle_field_1.pgm")
    assert scene.occupancy.any() and np.isfinite(scene.sdf).all()
    cfg = load_run_config(run_config(out))
    ds = load_dataset(cfg, out)
    assert len(ds.train) + len(ds.eval) == 12
    assert set(ds.scenes) == {"obstacle_field_1"}


def test_gen_synth_is_byte_deterministic(tmp_path):
    out = gen(tmp_path)
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    shutil.rmtree(out)
    gen(tmp_path)
    assert first == {p.name: p.read_bytes() for p in out.iterdir()}


def test_train_resume_reproduces_losses(tmp_path):
    out = gen(tmp_path, scenarios=("corridor",))
    full = run_config(out, train=dict(SMALL["train"], steps=10))
    assert cli.main(["train-flow", "--config", str(full), "--out", str(out / "full")]) == 0
    half = run_config(out, train=dict(SMALL["train"], steps=5))
    assert cli.main(["train-flow", "--config", str(half), "--out", str(out / "half")]) == 0
    cfg_rest = run_config(out, train=dict(SMALL["train"], steps=10))
    assert cli.main(["train-flow", "--config", str(cfg_rest), "--out", str(out / "rest"),
                     "--resume", str(out / "half" / "pretrained")]) == 0
    whole = [json.loads(x) for x in (out / "full" / "pretrain_loss.jsonl").read_text().splitlines()]
    tail = [json.loads(x) for x in (out / "rest" / "pretrain_loss.jsonl").read_text().splitlines()]
    assert [r["loss"] for r in whole[5:]] == [r["loss"] for r in tail]
    assert all(np.isfinite(r["loss"]) for r in whole)
    assert (out / "full" / "pretrained.bin").read_bytes() == (out / "rest" / "pretrained.bin").read_bytes()


def test_score_of_ground_truth_has_zero_accuracy_penalty(tmp_path):
    out = gen(tmp_path, scenarios=("obstacle_field",))
    cfg = load_run_config(run_config(out))
    ds = load_dataset(cfg, out)
    doc = {"format": "crowdflow-predictions", "version": 1, "frame": "relative",
           "windows": [{"scene_id": w.scene_id, "agent_ids": list(w.agent_ids),
                        "samples": w.future_relative()[None].tolist()} for w in ds.eval]}
    pred = out / "gt.json"
    pred.write_text(json.dumps(doc))
    assert cli.main(["score", "--config", str(run_config(out)), "--out", str(out),
                     "--predictions", str(pred)]) == 0
    with open(out / "scores.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == list(cli.SCORE_COLUMNS)
    assert rows and all(float(r["r_acc"]) == 0.0 for r in rows)
    assert "input_hash" in json.loads((out / "scores.meta.json").read_text())


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sede": 1}))
    assert cli.main(["gen-synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    out = gen(tmp_path)
    assert cli.main(["eval", "--config", str(run_config(out)), "--out", str(out),
                     "--checkpoint", str(out / "missing")]) == cli.EXIT_DATA
    garbage = out / "preds.json"
    garbage.write_text("{")
    assert cli.main(["score", "--config", str(run_config(out)), "--out", str(out),
                     "--predictions", str(garbage)]) == cli.EXIT_DATA
    diverge = run_config(out, train=dict(SMALL["train"], learning_rate=1e30, grad_clip=0.0, steps=30))
    assert cli.main(["train-flow", "--config", str(diverge), "--out", str(out / "d")]) == cli.EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "config error" in err and "data error" in err and "numeric error" in err


def test_help_lists_every_config_key(capsys):
    with pytest.raises(SystemExit):
        cli.main(["eval", "--help"])
    text = capsys.readouterr().out
    for key in ("reward.social.delta_s", "grpo.beta", "sde.tau_min", "metrics.K", "[m]", "FLOWGRPO_LOG"):
        assert key in text


def test_checkpoint_round_trip(tmp_path):
    model = pipeline.init_model(EncoderConfig(dim=8), FlowConfig(hidden=16, depth=1), seed=3)
    pipeline.save_checkpoint(tmp_path / "m", model, None, {"seed": 3})
    back, state, meta = pipeline.load_checkpoint(tmp_path / "m")
    assert pipeline.params_digest(back) == pipeline.params_digest(model)
    assert back.enc_cfg == model.enc_cfg and back.flow_cfg == model.flow_cfg
    assert meta["seed"] == 3 and state is None


@pytest.mark.slow
def test_full_pipeline_smoke(tmp_path):
    start = time.time()
    out = gen(tmp_path, scenarios=("crossing_flows", "obstacle_field"), n_windows=10)
    cfg = run_config(out, train={"steps": 200, "batch_size": 8, "learning_rate": 1e-3},
                     grpo={"total_updates": 20})
    args = ["--config", str(cfg), "--out", str(out / "run")]
    assert cli.main(["train-flow", *args]) == 0
    assert cli.main(["posttrain-grpo", *args, "--checkpoint", str(out / "run" / "pretrained")]) == 0
    assert cli.main(["eval", *args, "--checkpoint", str(out / "run" / "pretrained"), "--name", "pre"]) == 0
    assert cli.main(["eval", *args, "--checkpoint", str(out / "run" / "posttrained"), "--name", "post"]) == 0
    pre = json.loads((out / "run" / "pre.json").read_text())
    post = json.loads((out / "run" / "post.json").read_text())
    assert [h["steps"] for h in pre["horizons"]] == [h["steps"] for h in post["horizons"]]
    assert len((out / "run" / "grpo_log.jsonl").read_text().splitlines()) == 20
    assert pre["provenance"]["input_hash"] != post["provenance"]["input_hash"]
    assert time.time() - start < 600
