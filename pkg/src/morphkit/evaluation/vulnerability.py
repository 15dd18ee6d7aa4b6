"""Vulnerability evaluation of a matcher against a set of morphs, plus report I/O."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from .matchers import Matcher
from .metrics import DetCurve, mmpmr, threshold_at_far

logger = logging.getLogger(__name__)


@dataclass
class MorphRecord:
    morph_id: str
    path: str
    # contributing subject id -> reference image path
    subjects: dict[str, str]


@dataclass
class VulnerabilityReport:
    matcher: str
    far_target: float
    tau: float
    mmpmr: float
    n_morphs: int
    n_impostor: int
    mated_scores: dict[str, dict[str, float]] = field(default_factory=dict)
    min_scores: dict[str, float] = field(default_factory=dict)
    errors: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "VulnerabilityReport":
        with open(path) as fh:
            return cls(**json.load(fh))


class _EmbeddingCache:
    def __init__(self, matcher: Matcher):
        self.matcher = matcher
        self.cache: dict[str, object] = {}

    def __call__(self, path):
        key = os.path.abspath(path)
        if key not in self.cache:
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing file: {path}")
            self.cache[key] = self.matcher.embed_path(path)
        return self.cache[key]


def impostor_scores(matcher: Matcher, impostor_pairs) -> list[float]:
    embed = _EmbeddingCache(matcher)
    pairs = list(impostor_pairs)
    for p in sorted({p for pair in pairs for p in pair}):
        embed(p)
    return [matcher.similarity(embed(a), embed(b)) for a, b in pairs]


def evaluate_vulnerability(morphs: list[MorphRecord], matcher: Matcher, far_target: float = 0.001,
                           impostor_pairs=None, impostor: list[float] | None = None,
                           workers: int = 1) -> VulnerabilityReport:
    """Threshold from impostor scores, then MMPMR over each morph's minimum mated score.

    Supply either ``impostor_pairs`` (image path pairs of different subjects) or
    precomputed ``impostor`` scores. Morphs whose files are missing or whose
    matcher call fails are listed in ``errors``/``skipped`` and left out of MMPMR.
    """
    embed = _EmbeddingCache(matcher)
    if impostor is None:
        if impostor_pairs is None:
            raise ValueError("need impostor_pairs or impostor scores to set the threshold")
        impostor = impostor_scores(matcher, impostor_pairs)
    tau = threshold_at_far(impostor, far_target)

    def score(rec: MorphRecord):
        try:
            m = embed(rec.path)
            return rec.morph_id, {sid: matcher.similarity(m, embed(p)) for sid, p in sorted(rec.subjects.items())}, None
        except Exception as exc:  # itemized, the morph is skipped
            return rec.morph_id, None, f"{rec.morph_id}: {exc}"

    records = sorted(morphs, key=lambda r: r.morph_id)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(score, records))
    else:
        results = [score(r) for r in records]

    mated, errors, skipped = {}, [], []
    for mid, scores, err in results:
        if err is not None:
            errors.append(err)
            skipped.append(mid)
            logger.warning("skipping morph %s", err)
        else:
            mated[mid] = scores
    mins = {mid: min(s.values()) for mid, s in mated.items()}
    value = mmpmr(mated, tau) if mated else float("nan")
    return VulnerabilityReport(matcher=matcher.name, far_target=far_target, tau=tau, mmpmr=value,
                               n_morphs=len(mated), n_impostor=len(impostor), mated_scores=mated,
                               min_scores=mins, errors=errors, skipped=skipped)


def write_scores_csv(path, mated_scores: dict[str, dict[str, float]]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["morph_id", "subject_id", "score"])
        for mid in sorted(mated_scores):
            for sid in sorted(mated_scores[mid]):
                w.writerow([mid, sid, repr(mated_scores[mid][sid])])


def read_scores_csv(path) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["morph_id"], {})[row["subject_id"]] = float(row["score"])
    return out


def write_det_csv(path, curve: DetCurve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "apcer", "bpcer"])
        for t, a, b in zip(curve.thresholds, curve.apcer, curve.bpcer):
            w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])


def read_detector_scores(path) -> tuple[list[float], list[float]]:
    """Detector score CSV ``sample_id,label,score`` with label ``attack`` or ``bonafide``."""
    attack, bonafide = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            label = row["label"].strip().lower()
            if label == "attack":
                attack.append(float(row["score"]))
            elif label in ("bonafide", "bona_fide", "bona fide"):
                bonafide.append(float(row["score"]))
            else:
                raise ValueError(f"{path}: line {lineno}: unknown label {row['label']!r}")
    return attack, bonafide
