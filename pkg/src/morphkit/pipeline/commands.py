"""Pipeline commands. Each reads and writes a run directory:

    prepare/           aligned crops, aligned probes, averaged-landmark classical morphs
    landmark_blender/  checkpoint + loss log
    image_blender/     learned morph landmarks, per-face supervisors, checkpoint + loss log
    generate/          proposed/ and baseline/ morphs, morphs.csv
    evaluate/          impostor scores, per-method vulnerability and quality reports
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from ..evaluation import (ExternalMatcher, MorphRecord, QualityReport, bpcer_at_apcer, det_curve,
                          evaluate_vulnerability, morph_quality, read_detector_scores, toy_matcher,
                          write_det_csv, write_scores_csv)
from ..evaluation.vulnerability import impostor_scores
from ..geometry import (LandmarkSet, align_face, average_landmarks, check_image, classical_morph,
                        load_image, load_landmarks, save_image, save_landmarks)
from ..image_blender import BlendSample, GeneratorCheckpoint, generate_morph, train_image_blender
from ..landmark_blender import BlenderCheckpoint, TrainingDiverged, morph_landmarks, train_landmark_blender
from . import manifest
from .config import RunConfig, config_hash, save_config
from .protocol import read_protocol
from .synth import generate_synthetic_dataset

logger = logging.getLogger(__name__)

LANDMARK_CKPT = "landmark_blender/checkpoint.lmb"
LANDMARK_LOG = "landmark_blender/loss_log.csv"
BLENDER_CKPT = "image_blender/checkpoint.gib"
BLENDER_LOG = "image_blender/loss_log.csv"
METHODS = ("proposed", "baseline")


class PipelineError(RuntimeError):
    pass


@dataclass
class RunContext:
    cfg: RunConfig
    run_dir: str
    workers: int = 1

    def __post_init__(self):
        self.cfg = self.cfg.seeded()
        self.run_dir = os.path.abspath(self.run_dir)
        os.makedirs(self.run_dir, exist_ok=True)

    def path(self, *parts) -> str:
        return os.path.join(self.run_dir, *parts)

    def resolve(self, p: str, base: str | None = None) -> str:
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(base or self.run_dir, p))

    @property
    def dataset(self) -> str:
        return self.resolve(self.cfg.paths.dataset)

    def map(self, fn, items):
        items = list(items)
        if self.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    def fresh_dir(self, name) -> str:
        d = self.path(name)
        if os.path.isdir(d):
            shutil.rmtree(d)
        os.makedirs(d)
        return d

    def record(self, command, inputs, outputs, started, extra=None):
        save_config(self.cfg, self.path("config.yaml"))
        ins = manifest.digest_tree(inputs, self.run_dir)
        outs = manifest.digest_tree(outputs, self.run_dir)
        return manifest.record(self.run_dir, command, config_hash(self.cfg), ins, outs, started, extra)


def _check_budget(ctx: RunContext, what: str, errors: list[str], total: int):
    if total and len(errors) > ctx.cfg.failure_budget * total:
        listing = "\n  ".join(errors)
        raise PipelineError(f"{what}: {len(errors)} of {total} pairs failed (budget "
                            f"{ctx.cfg.failure_budget:.0%}):\n  {listing}")
    for e in errors:
        logger.warning("%s: %s", what, e)


# ---------------------------------------------------------------------------


def cmd_synth(ctx: RunContext) -> dict:
    started = time.time()
    s = ctx.cfg.synth
    try:
        info = generate_synthetic_dataset(ctx.dataset, seed=ctx.cfg.seed, count=s.count, resolution=s.resolution)
    except OSError as exc:
        raise PipelineError(f"cannot write synthetic dataset to {ctx.dataset}: {exc}") from None
    ctx.record("synth", [], [ctx.dataset], started)
    return info


def _align_one(ctx: RunContext, img_path, lmk_path):
    K = ctx.cfg.landmark_count
    image = load_image(img_path)
    lms = load_landmarks(lmk_path, K)
    return align_face(image, lms, ctx.cfg.alignment)


def cmd_prepare(ctx: RunContext) -> dict:
    """Align every subject (and probe), then build averaged-landmark classical morphs per pair."""
    started = time.time()
    cfg = ctx.cfg
    proto_path = ctx.resolve(cfg.paths.protocol, ctx.dataset)
    if not os.path.isfile(proto_path):
        raise PipelineError(f"missing pair protocol: {proto_path}")
    pairs = read_protocol(proto_path, ctx.dataset)
    out = ctx.fresh_dir("prepare")
    for sub in ("aligned", "probes", "supervisors", "baseline_landmarks"):
        os.makedirs(os.path.join(out, sub))

    sources: dict[str, tuple[str, str]] = {}
    errors: list[str] = []
    for p in pairs:
        for sid, img, lmk in ((p.subject_a, p.img_a, p.lmk_a), (p.subject_b, p.img_b, p.lmk_b)):
            if sources.setdefault(sid, (img, lmk)) != (img, lmk):
                raise PipelineError(f"subject {sid} refers to different files in different pairs")

    def align_subject(sid):
        img, lmk = sources[sid]
        missing = [f for f in (img, lmk) if not os.path.isfile(f)]
        if missing:
            return sid, None, f"missing file(s): {', '.join(missing)}"
        try:
            return sid, _align_one(ctx, img, lmk), None
        except (ValueError, OSError) as exc:
            return sid, None, str(exc)

    aligned, subject_errors = {}, {}
    for sid, res, err in ctx.map(align_subject, sorted(sources)):
        if err is not None:
            subject_errors[sid] = err
            continue
        aligned[sid] = res
        save_image(os.path.join(out, "aligned", f"{sid}.png"), res[0])
        save_landmarks(os.path.join(out, "aligned", f"{sid}.txt"), res[1], *res[0].shape[1::-1])

    probe_inputs = []
    if cfg.paths.probes is not None:
        probe_root = ctx.resolve(cfg.paths.probes, ctx.dataset)

        def align_probe(sid):
            img = os.path.join(probe_root, "images", f"{sid}.png")
            lmk = os.path.join(probe_root, "landmarks", f"{sid}.txt")
            if not (os.path.isfile(img) and os.path.isfile(lmk)):
                return sid, None, (img, lmk)
            try:
                return sid, _align_one(ctx, img, lmk), (img, lmk)
            except (ValueError, OSError) as exc:
                logger.warning("probe %s unusable, falling back to enrolment image: %s", sid, exc)
                return sid, None, (img, lmk)

        for sid, res, files in ctx.map(align_probe, sorted(aligned)):
            if res is None:
                continue
            probe_inputs.extend(files)
            save_image(os.path.join(out, "probes", f"{sid}.png"), res[0])
            save_landmarks(os.path.join(out, "probes", f"{sid}.txt"), res[1], *res[0].shape[1::-1])

    ok, failed = [], []
    for p in pairs:
        bad = [f"{s}: {subject_errors[s]}" for s in (p.subject_a, p.subject_b) if s in subject_errors]
        if bad:
            errors.append(f"{p.pair_id}: " + "; ".join(bad))
            failed.append(p.pair_id)
        else:
            ok.append(p)

    def supervise(p):
        (ia, la), (ib, lb) = aligned[p.subject_a], aligned[p.subject_b]
        avg = average_landmarks(la, lb, cfg.alpha)
        return p, avg, classical_morph(ia, ib, la, lb, avg, cfg.alpha)

    for p, avg, morph in ctx.map(supervise, ok):
        save_image(os.path.join(out, "supervisors", f"{p.pair_id}.png"), morph)
        save_landmarks(os.path.join(out, "baseline_landmarks", f"{p.pair_id}.txt"), avg,
                       *morph.shape[1::-1])

    listing = {
        "pairs": [{"pair_id": p.pair_id, "subject_a": p.subject_a, "subject_b": p.subject_b} for p in ok],
        "failed": failed,
        "errors": errors,
    }
    with open(os.path.join(out, "pairs.json"), "w") as fh:
        json.dump(listing, fh, indent=2, sort_keys=True)

    inputs = [proto_path] + [f for v in sources.values() for f in v if os.path.isfile(f)] + probe_inputs
    ctx.record("prepare", inputs, [out], started, {"errors": errors})
    _check_budget(ctx, "prepare", errors, len(pairs))
    return listing


# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    pairs: list[dict]
    images: dict[str, np.ndarray]
    landmarks: dict[str, LandmarkSet]
    probe_landmarks: dict[str, LandmarkSet]


def load_prepared(ctx: RunContext) -> Prepared:
    listing_path = ctx.path("prepare", "pairs.json")
    if not os.path.isfile(listing_path):
        raise PipelineError(f"run directory not prepared (missing {listing_path}); run 'prepare' first")
    with open(listing_path) as fh:
        pairs = json.load(fh)["pairs"]
    if not pairs:
        raise PipelineError("no usable pairs in the prepared run")
    K = ctx.cfg.landmark_count
    sids = sorted({p[k] for p in pairs for k in ("subject_a", "subject_b")})
    images, lms, probes = {}, {}, {}
    for sid in sids:
        base = ctx.path("prepare", "aligned", sid)
        images[sid] = load_image(base + ".png")
        lms[sid] = load_landmarks(base + ".txt", K)
        probe = ctx.path("prepare", "probes", sid + ".txt")
        if os.path.isfile(probe):
            probes[sid] = load_landmarks(probe, K)
    return Prepared(pairs, images, lms, probes)


def _truncate_log(path, step: int):
    """Drop log rows past ``step`` (left behind by a run that died after its last checkpoint)."""
    if not os.path.isfile(path):
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def _run_chunks(ctx: RunContext, name, ckpt_path, log_path, state, total_steps, train_fn):
    """Train to ``total_steps`` in chunks, checkpointing after each one."""
    if state.step > 0:
        _truncate_log(log_path, state.step)
    elif os.path.exists(log_path):
        os.remove(log_path)
    while state.step < total_steps:
        chunk = min(ctx.cfg.checkpoint_every, total_steps - state.step)
        last_good = state.step
        try:
            state = train_fn(state, chunk)
        except TrainingDiverged as exc:
            where = f"checkpoint at step {last_good} kept at {ckpt_path}" if os.path.exists(ckpt_path) \
                else "no checkpoint was written yet"
            raise PipelineError(f"{name} diverged: {exc}; {where}") from None
        state.save(ckpt_path)
        logger.info("%s: step %d/%d checkpointed", name, state.step, total_steps)
    if not os.path.exists(ckpt_path):
        state.save(ckpt_path)
    return state


def cmd_train_landmarks(ctx: RunContext, resume: bool = False) -> BlenderCheckpoint:
    started = time.time()
    prep = load_prepared(ctx)
    os.makedirs(ctx.path("landmark_blender"), exist_ok=True)
    ckpt_path, log_path = ctx.path(LANDMARK_CKPT), ctx.path(LANDMARK_LOG)
    if resume and os.path.exists(ckpt_path):
        state = BlenderCheckpoint.load(ckpt_path)
        logger.info("resuming landmark blender at step %d", state.step)
    else:
        if resume:
            logger.info("no landmark checkpoint to resume from; starting fresh")
        state = BlenderCheckpoint.fresh(ctx.cfg.landmark_blender)
    pairs = [(prep.landmarks[p["subject_a"]], prep.landmarks[p["subject_b"]]) for p in prep.pairs]
    pool = [prep.landmarks[s] for s in sorted(prep.landmarks)] + [prep.probe_landmarks[s] for s in sorted(prep.probe_landmarks)]

    def train(st, n):
        return train_landmark_blender(pairs, pool, steps=n, state=st, log_path=log_path)

    state = _run_chunks(ctx, "landmark blender", ckpt_path, log_path, state, ctx.cfg.landmark_blender.steps, train)
    ctx.record("train-landmarks", [ctx.path("prepare")], [ctx.path("landmark_blender")], started,
               {"steps": state.step})
    return state


def _load_landmark_net(ctx: RunContext):
    path = ctx.path(LANDMARK_CKPT)
    if not os.path.isfile(path):
        raise PipelineError(f"missing landmark-blender checkpoint {path}; run 'train-landmarks' first")
    return BlenderCheckpoint.load(path).net.eval()


def cmd_train_blender(ctx: RunContext, resume: bool = False) -> GeneratorCheckpoint:
    started = time.time()
    prep = load_prepared(ctx)
    net = _load_landmark_net(ctx)
    out = ctx.path("image_blender")
    os.makedirs(out, exist_ok=True)
    for sub in ("morph_landmarks", "supervisors"):
        d = os.path.join(out, sub)
        if os.path.isdir(d):
            shutil.rmtree(d)
        os.makedirs(d)

    def build(p):
        a, b = p["subject_a"], p["subject_b"]
        lm = morph_landmarks(prep.landmarks[a], prep.landmarks[b], net)
        return p["pair_id"], BlendSample.build(prep.images[a], prep.images[b], prep.landmarks[a],
                                               prep.landmarks[b], lm)

    samples = []
    for pid, s in ctx.map(build, prep.pairs):
        R = s.i1.shape[0]
        save_landmarks(os.path.join(out, "morph_landmarks", f"{pid}.txt"), s.lm, R, R)
        save_image(os.path.join(out, "supervisors", f"{pid}_a.png"), s.op1)
        save_image(os.path.join(out, "supervisors", f"{pid}_b.png"), s.op2)
        samples.append(s)

    ckpt_path, log_path = ctx.path(BLENDER_CKPT), ctx.path(BLENDER_LOG)
    if resume and os.path.exists(ckpt_path):
        state = GeneratorCheckpoint.load(ckpt_path)
        logger.info("resuming image blender at step %d", state.step)
    else:
        if resume:
            logger.info("no image-blender checkpoint to resume from; starting fresh")
        state = GeneratorCheckpoint.fresh(ctx.cfg.image_blender)

    def train(st, n):
        return train_image_blender(samples, steps=n, state=st, log_path=log_path)

    state = _run_chunks(ctx, "image blender", ckpt_path, log_path, state, ctx.cfg.image_blender.steps, train)
    ctx.record("train-blender", [ctx.path("prepare"), ctx.path(LANDMARK_CKPT)], [out], started,
               {"steps": state.step})
    return state


# ---------------------------------------------------------------------------


def morph_name(subject_a: str, subject_b: str) -> str:
    return f"{subject_a}_{subject_b}_morph.png"


def cmd_generate(ctx: RunContext) -> list[dict]:
    """Proposed and classical-baseline morphs for every prepared pair."""
    started = time.time()
    prep = load_prepared(ctx)
    net = _load_landmark_net(ctx)
    if not os.path.isfile(ctx.path(BLENDER_CKPT)):
        raise PipelineError(f"missing image-blender checkpoint {ctx.path(BLENDER_CKPT)}; run 'train-blender' first")
    generator = GeneratorCheckpoint.load(ctx.path(BLENDER_CKPT)).generator.eval()
    alpha = ctx.cfg.alpha
    out = ctx.fresh_dir("generate")
    for sub in METHODS + ("landmarks",):
        os.makedirs(os.path.join(out, sub))

    def baseline(p):
        a, b = p["subject_a"], p["subject_b"]
        la, lb = prep.landmarks[a], prep.landmarks[b]
        try:
            return classical_morph(prep.images[a], prep.images[b], la, lb, average_landmarks(la, lb, alpha), alpha), None
        except Exception as exc:
            return None, f"{p['pair_id']} (baseline): {exc}"

    baselines = ctx.map(baseline, prep.pairs)
    rows, errors = [], []
    for p, (base_img, base_err) in zip(prep.pairs, baselines):
        a, b = p["subject_a"], p["subject_b"]
        name = morph_name(a, b)
        try:
            lm = morph_landmarks(prep.landmarks[a], prep.landmarks[b], net)
            img = check_image(generate_morph(prep.images[a], prep.images[b], prep.landmarks[a],
                                             prep.landmarks[b], lm, generator, alpha))
            R = img.shape[0]
            save_landmarks(os.path.join(out, "landmarks", f"{a}_{b}.txt"), lm, R, R)
            save_image(os.path.join(out, "proposed", name), img)
            rows.append({"morph_id": f"{a}_{b}", "method": "proposed", "path": f"proposed/{name}",
                         "subject_a": a, "subject_b": b})
        except Exception as exc:
            errors.append(f"{p['pair_id']} (proposed): {exc}")
        if base_err is not None:
            errors.append(base_err)
        else:
            save_image(os.path.join(out, "baseline", name), check_image(base_img))
            rows.append({"morph_id": f"{a}_{b}", "method": "baseline", "path": f"baseline/{name}",
                         "subject_a": a, "subject_b": b})

    rows.sort(key=lambda r: (r["method"], r["morph_id"]))
    with open(os.path.join(out, "morphs.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, ["morph_id", "method", "path", "subject_a", "subject_b"])
        w.writeheader()
        w.writerows(rows)
    ctx.record("generate", [ctx.path("prepare"), ctx.path(LANDMARK_CKPT), ctx.path(BLENDER_CKPT)], [out],
               started, {"errors": errors})
    _check_budget(ctx, "generate", errors, 2 * len(prep.pairs))
    return rows


# ---------------------------------------------------------------------------


def build_matcher(ctx: RunContext):
    ev = ctx.cfg.evaluation
    if ev.matcher == "command":
        return ExternalMatcher(ev.matcher_command)
    return toy_matcher(ev.matcher_seed)


def reference_image(ctx: RunContext, sid: str) -> str:
    """Mated reference for a subject: its aligned probe when present, else the enrolment crop."""
    probe = ctx.path("prepare", "probes", f"{sid}.png")
    return probe if os.path.isfile(probe) else ctx.path("prepare", "aligned", f"{sid}.png")


def impostor_protocol(ctx: RunContext, subjects: list[str]) -> list[tuple[str, str]]:
    """Configured impostor CSV (``img_a,img_b``), else every reference vs. every other enrolment."""
    path = ctx.cfg.paths.impostor_pairs
    if path is not None:
        path = ctx.resolve(path, ctx.dataset)
        with open(path, newline="") as fh:
            return [(ctx.resolve(r["img_a"], ctx.dataset), ctx.resolve(r["img_b"], ctx.dataset))
                    for r in csv.DictReader(fh)]
    return [(reference_image(ctx, a), ctx.path("prepare", "aligned", f"{b}.png"))
            for a, b in itertools.permutations(subjects, 2)]


def _read_morphs(ctx: RunContext) -> list[dict]:
    listing = ctx.path("generate", "morphs.csv")
    if not os.path.isfile(listing):
        raise PipelineError(f"missing artifacts:\n  {listing}\nrun 'generate' first")
    with open(listing, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = []
    for r in rows:
        needed = [ctx.path("generate", r["path"]), ctx.path("prepare", "aligned", f"{r['subject_a']}.png"),
                  ctx.path("prepare", "aligned", f"{r['subject_b']}.png")]
        missing += [f for f in needed if not os.path.isfile(f)]
    if missing:
        raise PipelineError("missing artifacts:\n  " + "\n  ".join(sorted(set(missing))))
    return rows


def cmd_evaluate(ctx: RunContext) -> dict:
    """Vulnerability (MMPMR at the configured FAR) and quality reports for each morph method."""
    started = time.time()
    rows = _read_morphs(ctx)
    cfg = ctx.cfg
    out = ctx.fresh_dir("evaluate")
    matcher = build_matcher(ctx)

    subjects = sorted(os.path.splitext(f)[0] for f in os.listdir(ctx.path("prepare", "aligned"))
                      if f.endswith(".png"))
    imp_pairs = impostor_protocol(ctx, subjects)
    if not imp_pairs:
        raise PipelineError("no impostor comparisons available to set the threshold")
    imp = impostor_scores(matcher, imp_pairs)
    with open(os.path.join(out, "impostor_scores.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["img_a", "img_b", "score"])
        for (a, b), s in zip(imp_pairs, imp):
            w.writerow([os.path.relpath(a, ctx.run_dir), os.path.relpath(b, ctx.run_dir), repr(s)])

    summary = {"matcher": matcher.name, "far_target": cfg.far_target, "methods": {}}
    for method in METHODS:
        mrows = [r for r in rows if r["method"] == method]
        if not mrows:
            continue
        d = os.path.join(out, method)
        os.makedirs(d)
        records = [MorphRecord(r["morph_id"], ctx.path("generate", r["path"]),
                               {s: reference_image(ctx, s) for s in (r["subject_a"], r["subject_b"])})
                   for r in mrows]
        report = evaluate_vulnerability(records, matcher, cfg.far_target, impostor=imp, workers=ctx.workers)
        report.to_json(os.path.join(d, "vulnerability.json"))
        write_scores_csv(os.path.join(d, "scores.csv"), report.mated_scores)

        def quality(r):
            return morph_quality(load_image(ctx.path("generate", r["path"])),
                                 load_image(ctx.path("prepare", "aligned", f"{r['subject_a']}.png")),
                                 load_image(ctx.path("prepare", "aligned", f"{r['subject_b']}.png")),
                                 r["morph_id"])

        q = QualityReport(sorted(ctx.map(quality, mrows), key=lambda e: e.morph_id))
        with open(os.path.join(d, "quality.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["morph_id", "psnr", "ssim"])
            for e in q.entries:
                w.writerow([e.morph_id, repr(e.psnr), repr(e.ssim)])
        qsum = q.summary()
        with open(os.path.join(d, "quality.json"), "w") as fh:
            json.dump({"summary": qsum, "entries": [asdict(e) for e in q.entries]}, fh, indent=2, sort_keys=True)
        summary["methods"][method] = {"mmpmr": report.mmpmr, "tau": report.tau, "n_morphs": report.n_morphs,
                                      "errors": report.errors, **qsum}

    if cfg.paths.detector_scores is not None:
        det_path = ctx.resolve(cfg.paths.detector_scores, ctx.dataset)
        if not os.path.isfile(det_path):
            raise PipelineError(f"missing artifacts:\n  {det_path}")
        attack, bonafide = read_detector_scores(det_path)
        write_det_csv(os.path.join(out, "det.csv"), det_curve(attack, bonafide))
        summary["detector"] = {f"bpcer@apcer={t}": asdict(bpcer_at_apcer(attack, bonafide, t))
                               for t in cfg.evaluation.apcer_targets}

    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    ctx.record("evaluate", [ctx.path("generate"), ctx.path("prepare")], [out], started)
    return summary
