"""Procedural face-like images with exact 106-point landmarks.

Index layout: 0-32 jaw contour, 33-41 / 42-50 brows, 51-67 nose, 68-75 / 76-83
eye contours, 84-95 outer lip, 96-103 inner lip, 104 / 105 eye centres
("left"/"right" in image coordinates).
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from ..geometry import LandmarkSet, save_image, save_landmarks

K = 106


@dataclass
class FaceParams:
    cx: float
    cy: float
    a: float          # face half-width
    b: float          # face half-height
    angle: float      # radians, about (cx, cy)
    eye_y: float      # offset above centre, fraction of b
    eye_dx: float
    eye_rx: float
    eye_ry: float
    brow_dy: float
    brow_len: float
    nose_len: float   # fraction of b below centre
    nose_w: float
    mouth_y: float    # fraction of b below centre
    mouth_w: float
    lip_h: float
    skin: np.ndarray
    hair: np.ndarray
    iris: np.ndarray
    lips: np.ndarray
    light: float      # horizontal lighting gradient


def sample_params(rng: np.random.Generator) -> FaceParams:
    skin = np.array([0.78, 0.60, 0.48]) * rng.uniform(0.7, 1.15) + rng.normal(0, 0.03, 3)
    return FaceParams(
        cx=0.5 + rng.normal(0, 0.012), cy=0.53 + rng.normal(0, 0.012),
        a=rng.uniform(0.25, 0.31), b=rng.uniform(0.33, 0.39),
        angle=np.deg2rad(rng.uniform(-6, 6)),
        eye_y=rng.uniform(0.22, 0.32), eye_dx=rng.uniform(0.105, 0.135),
        eye_rx=rng.uniform(0.045, 0.06), eye_ry=rng.uniform(0.022, 0.032),
        brow_dy=rng.uniform(0.05, 0.075), brow_len=rng.uniform(0.09, 0.12),
        nose_len=rng.uniform(0.12, 0.22), nose_w=rng.uniform(0.035, 0.055),
        mouth_y=rng.uniform(0.45, 0.55), mouth_w=rng.uniform(0.07, 0.1), lip_h=rng.uniform(0.02, 0.032),
        skin=np.clip(skin, 0.15, 0.95),
        hair=np.clip(rng.uniform(0.05, 0.45, 3), 0, 1),
        iris=np.clip(rng.uniform(0.1, 0.5, 3), 0, 1),
        lips=np.clip(np.array([0.7, 0.3, 0.3]) * rng.uniform(0.7, 1.1), 0, 1),
        light=rng.uniform(-0.08, 0.08),
    )


def perturb(p: FaceParams, rng: np.random.Generator) -> FaceParams:
    """Second capture of the same subject: small pose, expression and lighting changes."""
    return replace(
        p,
        cx=p.cx + rng.normal(0, 0.006), cy=p.cy + rng.normal(0, 0.006),
        angle=p.angle + np.deg2rad(rng.normal(0, 1.5)),
        mouth_w=p.mouth_w * rng.uniform(0.95, 1.05), lip_h=p.lip_h * rng.uniform(0.9, 1.1),
        light=p.light + rng.normal(0, 0.02),
    )


def _features(p: FaceParams) -> dict:
    """Named feature anchors in the unrotated face frame (normalized coords)."""
    ey = p.cy - p.eye_y * p.b
    return {
        "eyes": [(p.cx - p.eye_dx, ey), (p.cx + p.eye_dx, ey)],
        "brow_y": ey - p.brow_dy,
        "nose_top": ey,
        "nose_tip": p.cy + p.nose_len * p.b,
        "mouth": (p.cx, p.cy + p.mouth_y * p.b),
    }


def landmarks_for(p: FaceParams) -> np.ndarray:
    f = _features(p)
    pts = []
    t = np.deg2rad(np.linspace(190, -10, 33))
    # y grows downwards, so sin > 0 is the lower half
    pts += list(zip(p.cx - p.a * np.cos(t), p.cy + p.b * np.sin(t)))
    for ex, _ in f["eyes"]:
        u = np.linspace(-1, 1, 9)
        pts += list(zip(ex + u * p.brow_len / 2 * 1.1, f["brow_y"] - 0.02 * (1 - u ** 2)))
    s = np.linspace(0, 1, 9)
    pts += list(zip(np.full(9, p.cx), f["nose_top"] + s * (f["nose_tip"] - f["nose_top"])))
    u = np.linspace(-1, 1, 8)
    pts += list(zip(p.cx + u * p.nose_w, f["nose_tip"] - 0.015 * (1 - u ** 2) + 0.01))
    for ex, ey in f["eyes"]:
        t = np.deg2rad(np.arange(8) * 45.0)
        pts += list(zip(ex + p.eye_rx * np.cos(t), ey + p.eye_ry * np.sin(t)))
    mx, my = f["mouth"]
    t = np.deg2rad(np.arange(12) * 30.0)
    pts += list(zip(mx + p.mouth_w * np.cos(t), my + p.lip_h * np.sin(t)))
    t = np.deg2rad(np.arange(8) * 45.0)
    pts += list(zip(mx + 0.8 * p.mouth_w * np.cos(t), my + 0.3 * p.lip_h * np.sin(t)))
    pts += list(f["eyes"])
    pts = np.asarray(pts)
    assert pts.shape == (K, 2)
    return _rotate(pts, p, forward=True)


def _rotate(pts: np.ndarray, p: FaceParams, forward: bool) -> np.ndarray:
    ang = p.angle if forward else -p.angle
    c, s = np.cos(ang), np.sin(ang)
    d = pts - [p.cx, p.cy]
    return np.stack([c * d[..., 0] - s * d[..., 1], s * d[..., 0] + c * d[..., 1]], axis=-1) + [p.cx, p.cy]


def _soft(signed, width):
    return 1.0 / (1.0 + np.exp(-signed / width))


def render_face(p: FaceParams, resolution: int, rng: np.random.Generator) -> np.ndarray:
    R = resolution
    g = (np.arange(R) + 0.5) / R
    X, Y = np.meshgrid(g, g)
    # sample the unrotated frame
    U = _rotate(np.stack([X, Y], axis=-1), p, forward=False)
    x, y = U[..., 0], U[..., 1]
    edge = 1.0 / R
    f = _features(p)

    img = np.empty((R, R, 3))
    img[:] = p.hair * (0.8 + 0.4 * Y[..., None])

    face_r = np.sqrt(((x - p.cx) / p.a) ** 2 + ((y - p.cy) / p.b) ** 2)
    face = _soft(1 - face_r, edge / p.a)[..., None]
    shade = 1.0 - 0.25 * np.clip(face_r, 0, 1)[..., None] ** 3 + p.light * (x - p.cx)[..., None] / p.a
    img = img * (1 - face) + np.clip(p.skin * shade, 0, 1) * face

    for ex, ey in f["eyes"]:
        brow_y = f["brow_y"] - 0.02 * (1 - np.clip((x - ex) / (p.brow_len / 2), -1, 1) ** 2)
        brow = _soft(0.011 - np.abs(y - brow_y), edge) * _soft(p.brow_len / 2 - np.abs(x - ex), edge)
        img = img * (1 - brow[..., None]) + p.hair * 0.6 * brow[..., None]

        er = np.sqrt(((x - ex) / p.eye_rx) ** 2 + ((y - ey) / p.eye_ry) ** 2)
        white = _soft(1 - er, edge / p.eye_ry)[..., None]
        img = img * (1 - white) + np.array([0.95, 0.95, 0.93]) * white
        ir = np.hypot(x - ex, y - ey) / (0.9 * p.eye_ry)
        iris = (_soft(1 - ir, edge / p.eye_ry) * _soft(1 - er, edge / p.eye_ry))[..., None]
        img = img * (1 - iris) + p.iris * iris
        pupil = _soft(0.45 - ir, edge / p.eye_ry)[..., None]
        img = img * (1 - pupil) + 0.05 * pupil

    nose = _soft(0.006 - np.abs(x - p.cx - 0.008), edge) * (y > f["nose_top"]) * (y < f["nose_tip"])
    img = img * (1 - 0.25 * nose[..., None])
    for side in (-1, 1):
        nr = np.hypot((x - p.cx - side * 0.6 * p.nose_w) / 0.014, (y - f["nose_tip"]) / 0.009)
        nostril = _soft(1 - nr, 0.15)[..., None]
        img = img * (1 - 0.5 * nostril)

    mx, my = f["mouth"]
    mr = np.sqrt(((x - mx) / p.mouth_w) ** 2 + ((y - my) / p.lip_h) ** 2)
    lips = _soft(1 - mr, edge / p.lip_h)[..., None]
    img = img * (1 - lips) + p.lips * lips
    ir = np.sqrt(((x - mx) / (0.8 * p.mouth_w)) ** 2 + ((y - my) / (0.3 * p.lip_h)) ** 2)
    inner = _soft(1 - ir, edge / p.lip_h)[..., None]
    img = img * (1 - inner) + 0.15 * inner

    noise = gaussian_filter(rng.standard_normal((R, R, 3)), sigma=(R / 64, R / 64, 0)) * 0.04
    return np.clip(img + noise, 0.0, 1.0)


def synth_subject(seed_seq: np.random.SeedSequence, resolution: int):
    """Enrolment and probe images plus landmarks for one synthetic subject."""
    rng = np.random.default_rng(seed_seq)
    p = sample_params(rng)
    q = perturb(p, rng)
    enrol = render_face(p, resolution, rng)
    probe = render_face(q, resolution, rng)
    return enrol, LandmarkSet(landmarks_for(p)), probe, LandmarkSet(landmarks_for(q))


def generate_synthetic_dataset(out_dir, seed: int = 0, count: int = 16, resolution: int = 64) -> dict:
    """Write ``count`` subjects and a consecutive-pair protocol under ``out_dir``.

    Layout: ``images/``, ``landmarks/``, ``probes/images/``, ``probes/landmarks/`` and
    ``pairs.csv`` (``pair_id,img_a,img_b,lmk_a,lmk_b``, paths relative to ``out_dir``).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    dirs = {k: os.path.join(out_dir, k) for k in
            ("images", "landmarks", os.path.join("probes", "images"), os.path.join("probes", "landmarks"))}
    for d in dirs.values():
        os.makedirs(d, exist_ok=True)

    subjects = []
    for i, ss in enumerate(np.random.SeedSequence(seed).spawn(count)):
        sid = f"s{i:03d}"
        enrol, lm, probe, plm = synth_subject(ss, resolution)
        save_image(os.path.join(out_dir, "images", f"{sid}.png"), enrol)
        save_landmarks(os.path.join(out_dir, "landmarks", f"{sid}.txt"), lm, resolution, resolution)
        save_image(os.path.join(out_dir, "probes", "images", f"{sid}.png"), probe)
        save_landmarks(os.path.join(out_dir, "probes", "landmarks", f"{sid}.txt"), plm, resolution, resolution)
        subjects.append(sid)

    protocol = os.path.join(out_dir, "pairs.csv")
    with open(protocol, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "img_a", "img_b", "lmk_a", "lmk_b"])
        for a, b in zip(subjects[0::2], subjects[1::2]):
            w.writerow([f"{a}_{b}", f"images/{a}.png", f"images/{b}.png",
                        f"landmarks/{a}.txt", f"landmarks/{b}.txt"])
    return {"root": out_dir, "subjects": subjects, "protocol": protocol}
