import csv
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from morphkit.cli import main
from morphkit.evaluation import VulnerabilityReport, mmpmr, morph_quality, read_scores_csv
from morphkit.geometry import check_image, load_image, load_landmarks
from morphkit.pipeline import commands, manifest
from morphkit.pipeline.config import (ConfigError, RunConfig, config_hash, dump_config, from_dict,
                                      load_config, save_config)
from morphkit.pipeline.protocol import MorphPair, ProtocolError, read_protocol, write_protocol
from morphkit.pipeline.synth import generate_synthetic_dataset

MOCK = Path(__file__).with_name("mock_matcher.py")

TINY = {
    "seed": 2,
    "checkpoint_every": 2,
    "far_target": 0.1,
    "synth": {"count": 6, "resolution": 32},
    "alignment": {"output_size": 32},
    "landmark_blender": {"steps": 4, "encoder_hidden": [32, 16], "code_dim": 8, "decoder_hidden": 16,
                         "disc_hidden": [16, 8], "batch_size": 2},
    "image_blender": {"steps": 3, "resolution": 32, "iterations": 2, "appearance_channels": 8,
                      "shape_channels": 4, "graph_channels": 4, "disc_channels": 4, "batch_size": 2},
}


def write_cfg(path, data=TINY):
    path.write_text(yaml.safe_dump(data))
    return str(path)


def ctx_for(tmp_path, data=TINY, name="run"):
    cfg = from_dict(RunConfig, json.loads(json.dumps(data))).validate()
    return commands.RunContext(cfg, str(tmp_path / name))


def run_all(ctx):
    commands.cmd_synth(ctx)
    commands.cmd_prepare(ctx)
    commands.cmd_train_landmarks(ctx)
    commands.cmd_train_blender(ctx)
    commands.cmd_generate(ctx)
    return commands.cmd_evaluate(ctx)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    ctx = ctx_for(tmp)
    summary = run_all(ctx)
    return ctx, summary


# --- config ------------------------------------------------------------------------------


def test_config_round_trip_idempotent(tmp_path):
    cfg = load_config(write_cfg(tmp_path / "c.yaml"))
    text = dump_config(cfg)
    save_config(cfg, tmp_path / "d.yaml")
    again = load_config(tmp_path / "d.yaml")
    assert again == cfg and dump_config(again) == text
    assert config_hash(again) == config_hash(cfg)
    assert load_config() == RunConfig()


def test_config_rejects_unknown_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        load_config(write_cfg(tmp_path / "a.yaml", {**TINY, "bogus": 1}))
    with pytest.raises(ConfigError, match="image_blender"):
        load_config(write_cfg(tmp_path / "b.yaml", {**TINY, "image_blender": {"depth": 3}}))
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path / "c.yaml", {**TINY, "seed": "zero"}))
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path / "d.yaml", {**TINY, "alignment": {"output_size": 64}}))
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path / "e.yaml", {**TINY, "landmark_count": 68}))
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path / "f.yaml", {**TINY, "evaluation": {"matcher": "command"}}))


def test_seed_override_reaches_modules(tmp_path):
    cfg = load_config(write_cfg(tmp_path / "c.yaml"), seed=11).seeded()
    assert cfg.seed == cfg.landmark_blender.seed == cfg.image_blender.seed == 11


# --- protocol -----------------------------------------------------------------------------


def test_protocol_round_trip_and_errors(tmp_path):
    pairs = [MorphPair("p1", str(tmp_path / "a.png"), str(tmp_path / "b.png"), str(tmp_path / "a.txt"),
                       str(tmp_path / "b.txt"))]
    write_protocol(tmp_path / "p.csv", pairs)
    assert read_protocol(tmp_path / "p.csv") == pairs
    assert pairs[0].subject_a == "a" and len(pairs[0].missing()) == 4

    cases = {
        "pair,img_a,img_b,lmk_a,lmk_b\n": "header",
        "pair_id,img_a,img_b,lmk_a,lmk_b\np,a.png,,a.txt,b.txt\n": "empty",
        "pair_id,img_a,img_b,lmk_a,lmk_b\np,a.png,b.png,a.txt,b.txt\np,c.png,d.png,c.txt,d.txt\n": "duplicate",
        "pair_id,img_a,img_b,lmk_a,lmk_b\np,a.png,x/a.png,a.txt,b.txt\n": "twice",
        "pair_id,img_a,img_b,lmk_a,lmk_b\n": "no pairs",
    }
    for text, msg in cases.items():
        (tmp_path / "bad.csv").write_text(text)
        with pytest.raises(ProtocolError, match=msg):
            read_protocol(tmp_path / "bad.csv")


# --- synth ---------------------------------------------------------------------------------


def test_synth_deterministic_and_in_bounds(tmp_path):
    a = generate_synthetic_dataset(tmp_path / "a", seed=4, count=4, resolution=32)
    generate_synthetic_dataset(tmp_path / "b", seed=4, count=4, resolution=32)
    da = manifest.digest_tree([tmp_path / "a"], tmp_path / "a")
    db = manifest.digest_tree([tmp_path / "b"], tmp_path / "b")
    assert da == db and len(da) == 4 * 4 + 1
    for sid in a["subjects"]:
        lm = load_landmarks(tmp_path / "a" / "landmarks" / f"{sid}.txt", 106)
        assert np.all((lm.points >= 0) & (lm.points < 1))
        check_image(load_image(tmp_path / "a" / "images" / f"{sid}.png"))
    assert len(read_protocol(a["protocol"])) == 2
    with pytest.raises(ValueError):
        generate_synthetic_dataset(tmp_path / "c", count=0)


# --- commands -------------------------------------------------------------------------------


def test_prepare_outputs_and_determinism(tmp_path):
    ctx = ctx_for(tmp_path)
    commands.cmd_synth(ctx)
    listing = commands.cmd_prepare(ctx)
    assert len(listing["pairs"]) == 3 and not listing["failed"]
    sup = sorted(os.listdir(ctx.path("prepare", "supervisors")))
    assert sup == [f"{p['pair_id']}.png" for p in sorted(listing["pairs"], key=lambda p: p["pair_id"])]
    first = manifest.digest_tree([ctx.path("prepare")], ctx.run_dir)
    commands.cmd_prepare(ctx)
    assert manifest.digest_tree([ctx.path("prepare")], ctx.run_dir) == first
    m = manifest.read_manifest(ctx.run_dir)
    entry = m["commands"]["prepare"]
    assert entry["config_hash"] == config_hash(ctx.cfg) and entry["artifacts"]
    assert "tool_version" in entry and "run_id" in entry


def test_prepare_flags_missing_landmarks(tmp_path):
    data = {**TINY, "synth": {"count": 20, "resolution": 32}}
    ctx = ctx_for(tmp_path, data)
    commands.cmd_synth(ctx)
    os.remove(os.path.join(ctx.dataset, "landmarks", "s003.txt"))
    listing = commands.cmd_prepare(ctx)
    assert listing["failed"] == ["s002_s003"]
    assert "s003.txt" in listing["errors"][0]
    assert len(listing["pairs"]) == 9
    assert len(os.listdir(ctx.path("prepare", "supervisors"))) == 9


def test_prepare_fails_over_budget(tmp_path):
    ctx = ctx_for(tmp_path)
    commands.cmd_synth(ctx)
    os.remove(os.path.join(ctx.dataset, "landmarks", "s001.txt"))
    with pytest.raises(commands.PipelineError, match="1 of 3 pairs failed"):
        commands.cmd_prepare(ctx)


def test_commands_require_previous_stage(tmp_path):
    ctx = ctx_for(tmp_path)
    with pytest.raises(commands.PipelineError, match="missing pair protocol"):
        commands.cmd_prepare(ctx)
    with pytest.raises(commands.PipelineError, match="prepare"):
        commands.cmd_train_landmarks(ctx)
    with pytest.raises(commands.PipelineError, match="missing artifacts"):
        commands.cmd_evaluate(ctx)


def test_full_run_artifacts(finished_run):
    ctx, summary = finished_run
    rows = list(csv.DictReader(open(ctx.path("generate", "morphs.csv"))))
    assert len(rows) == 6
    for method in commands.METHODS:
        files = sorted(os.listdir(ctx.path("generate", method)))
        assert files == ["s000_s001_morph.png", "s002_s003_morph.png", "s004_s005_morph.png"]
        for f in files:
            img = check_image(load_image(ctx.path("generate", method, f)))
            assert img.shape == (32, 32, 3)
    for log, steps in ((commands.LANDMARK_LOG, 4), (commands.BLENDER_LOG, 3)):
        lines = open(ctx.path(log)).read().splitlines()
        assert len(lines) == steps + 1
    for method in commands.METHODS:
        s = summary["methods"][method]
        assert 0.0 <= s["mmpmr"] <= 1.0
        rep = VulnerabilityReport.from_json(ctx.path("evaluate", method, "vulnerability.json"))
        scores = read_scores_csv(ctx.path("evaluate", method, "scores.csv"))
        assert mmpmr(scores, rep.tau) == rep.mmpmr == s["mmpmr"]


def test_reports_recomputable(finished_run):
    ctx, _ = finished_run
    imp = [float(r["score"]) for r in csv.DictReader(open(ctx.path("evaluate", "impostor_scores.csv")))]
    from morphkit.evaluation import threshold_at_far
    for method in commands.METHODS:
        rep = VulnerabilityReport.from_json(ctx.path("evaluate", method, "vulnerability.json"))
        assert threshold_at_far(imp, ctx.cfg.far_target) == rep.tau
        q = json.load(open(ctx.path("evaluate", method, "quality.json")))
        direct = []
        for r in csv.DictReader(open(ctx.path("generate", "morphs.csv"))):
            if r["method"] != method:
                continue
            direct.append(morph_quality(load_image(ctx.path("generate", r["path"])),
                                        load_image(ctx.path("prepare", "aligned", f"{r['subject_a']}.png")),
                                        load_image(ctx.path("prepare", "aligned", f"{r['subject_b']}.png"))))
        assert q["summary"]["psnr_mean"] == pytest.approx(np.mean([e.psnr for e in direct]), abs=1e-12)
        assert q["summary"]["ssim_mean"] == pytest.approx(np.mean([e.ssim for e in direct]), abs=1e-12)


def test_resume_continues_step_counter(tmp_path, finished_run):
    src, _ = finished_run
    ctx = ctx_for(tmp_path, {**TINY, "landmark_blender": {**TINY["landmark_blender"], "steps": 6}})
    shutil.copytree(src.path("prepare"), ctx.path("prepare"))
    shutil.copytree(src.path("landmark_blender"), ctx.path("landmark_blender"))
    state = commands.cmd_train_landmarks(ctx, resume=True)
    assert state.step == 6
    steps = [int(r["step"]) for r in csv.DictReader(open(ctx.path(commands.LANDMARK_LOG)))]
    assert steps == [1, 2, 3, 4, 5, 6]


def test_resume_matches_uninterrupted(tmp_path):
    full = ctx_for(tmp_path, name="full")
    commands.cmd_synth(full)
    commands.cmd_prepare(full)
    commands.cmd_train_landmarks(full)

    part = ctx_for(tmp_path, {**TINY, "landmark_blender": {**TINY["landmark_blender"], "steps": 2}}, "part")
    shutil.copytree(full.path("prepare"), part.path("prepare"))
    commands.cmd_train_landmarks(part)
    part = ctx_for(tmp_path, name="part")
    commands.cmd_train_landmarks(part, resume=True)
    assert open(full.path(commands.LANDMARK_LOG), "rb").read() == open(part.path(commands.LANDMARK_LOG), "rb").read()
    # the checkpoint headers differ only in the configured step budget
    from morphkit.landmark_blender import BlenderCheckpoint
    a, b = (BlenderCheckpoint.load(c.path(commands.LANDMARK_CKPT)) for c in (full, part))
    assert a.step == b.step == 4
    for (ka, va), (kb, vb) in zip(a.net.state_dict().items(), b.net.state_dict().items()):
        assert ka == kb and va.equal(vb)


def test_end_to_end_determinism(tmp_path, finished_run):
    src, _ = finished_run
    other = ctx_for(tmp_path)
    run_all(other)
    for stage in ("data", "prepare", "landmark_blender", "image_blender", "generate", "evaluate"):
        a = manifest.digest_tree([src.path(stage)], src.run_dir)
        b = manifest.digest_tree([other.path(stage)], other.run_dir)
        assert a == b, stage


def test_external_matcher_via_config(tmp_path, finished_run):
    src, _ = finished_run
    data = {**TINY, "evaluation": {"matcher": "command", "matcher_command": [sys.executable, str(MOCK)]}}
    ctx = ctx_for(tmp_path, data)
    for stage in ("prepare", "generate"):
        shutil.copytree(src.path(stage), ctx.path(stage))
    summary = commands.cmd_evaluate(ctx)
    assert summary["matcher"].startswith("external(")
    for s in summary["methods"].values():
        assert 0.0 <= s["mmpmr"] <= 1.0 and s["n_morphs"] == 3


def test_detector_scores_produce_det(tmp_path, finished_run):
    src, _ = finished_run
    ctx = ctx_for(tmp_path, {**TINY, "paths": {"detector_scores": "det_in.csv"}})
    for stage in ("prepare", "generate", "data"):
        shutil.copytree(src.path(stage), ctx.path(stage))
    with open(os.path.join(ctx.dataset, "det_in.csv"), "w") as fh:
        fh.write("sample_id,label,score\na,attack,0.9\nb,attack,0.3\nc,bonafide,0.2\nd,bonafide,0.5\n")
    summary = commands.cmd_evaluate(ctx)
    assert "bpcer@apcer=0.05" in summary["detector"]
    rows = open(ctx.path("evaluate", "det.csv")).read().splitlines()
    assert rows[0] == "threshold,apcer,bpcer" and len(rows) == 6


def test_divergence_keeps_last_checkpoint(tmp_path, monkeypatch):
    ctx = ctx_for(tmp_path)
    commands.cmd_synth(ctx)
    commands.cmd_prepare(ctx)
    real = commands.train_landmark_blender
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise commands.TrainingDiverged("non-finite loss at step 3")
        return real(*a, **kw)

    monkeypatch.setattr(commands, "train_landmark_blender", flaky)
    with pytest.raises(commands.PipelineError, match="step 2 kept"):
        commands.cmd_train_landmarks(ctx)
    from morphkit.landmark_blender import BlenderCheckpoint
    assert BlenderCheckpoint.load(ctx.path(commands.LANDMARK_CKPT)).step == 2


# --- CLI ----------------------------------------------------------------------------------


def test_cli_chain(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml")
    run = str(tmp_path / "run")
    for cmd in ("synth", "prepare", "train-landmarks", "train-blender", "generate", "evaluate"):
        assert main(["--config", cfg, "--run-dir", run, cmd]) == 0, cmd
    out = capsys.readouterr().out
    assert "proposed: MMPMR=" in out and "baseline: MMPMR=" in out
    # global flags are also accepted after the subcommand
    assert main(["train-landmarks", "--config", cfg, "--run-dir", run, "--seed", "2", "--resume",
                 "--workers", "2"]) == 0


def test_cli_errors(tmp_path, capsys):
    assert main(["--run-dir", str(tmp_path / "empty"), "evaluate"]) == 1
    assert "missing artifacts" in capsys.readouterr().err
    (tmp_path / "bad.yaml").write_text("nope: 1\n")
    assert main(["--config", str(tmp_path / "bad.yaml"), "--run-dir", str(tmp_path), "synth"]) == 1
    assert main(["--workers", "0", "--run-dir", str(tmp_path), "synth"]) == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])
