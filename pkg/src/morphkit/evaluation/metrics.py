"""Morph-attack vulnerability and detection-error metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


def _scores(x, name) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def threshold_at_far(impostor_scores, far_target: float) -> float:
    """Smallest observed score ``tau`` with ``P(impostor > tau) <= far_target``."""
    s = np.sort(_scores(impostor_scores, "impostor_scores"))
    if not 0.0 < far_target < 1.0:
        raise ValueError("far_target must be in (0, 1)")
    n = s.size
    # number of scores strictly above each candidate
    above = n - np.searchsorted(s, s, side="right")
    ok = above / n <= far_target
    return float(s[np.argmax(ok)])


def mmpmr(score_set, tau: float) -> float:
    """Fraction of morphs whose lowest mated score is strictly above ``tau``.

    ``score_set`` maps morph id -> mated scores (one per contributing subject, as a
    list or a subject -> score mapping), or is a sequence of such groups.
    """
    groups = list(score_set.values()) if isinstance(score_set, Mapping) else list(score_set)
    groups = [list(g.values()) if isinstance(g, Mapping) else g for g in groups]
    if not groups:
        raise ValueError("score set is empty")
    mins = np.array([_scores(g, "mated scores").min() for g in groups])
    return float(np.mean(mins > tau))


def apcer_bpcer(attack_scores, bonafide_scores, threshold: float) -> tuple[float, float]:
    """Error rates for a detector where higher scores mean "attack".

    APCER: attacks scored below the threshold (accepted as bona fide).
    BPCER: bona fide samples scored at or above it (rejected as attacks).
    """
    att = _scores(attack_scores, "attack_scores")
    bon = _scores(bonafide_scores, "bonafide_scores")
    return float(np.mean(att < threshold)), float(np.mean(bon >= threshold))


@dataclass
class DetCurve:
    """Operating points ordered by increasing threshold (APCER non-decreasing, BPCER non-increasing)."""

    thresholds: np.ndarray
    apcer: np.ndarray
    bpcer: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.apcer.tolist(), self.bpcer.tolist()))


def det_curve(attack_scores, bonafide_scores) -> DetCurve:
    """Sweep every observed score plus one threshold above the maximum."""
    att = np.sort(_scores(attack_scores, "attack_scores"))
    bon = np.sort(_scores(bonafide_scores, "bonafide_scores"))
    observed = np.unique(np.concatenate([att, bon]))
    top = np.nextafter(observed[-1], np.inf)
    thr = np.append(observed, top)
    apcer = np.searchsorted(att, thr, side="left") / att.size
    bpcer = (bon.size - np.searchsorted(bon, thr, side="left")) / bon.size
    return DetCurve(thr, apcer, bpcer)


@dataclass
class OperatingPoint:
    threshold: float
    apcer: float
    bpcer: float
    reached: bool


def bpcer_at_apcer(attack_scores, bonafide_scores, apcer_target: float) -> OperatingPoint:
    """Lowest-BPCER point on the DET sweep whose APCER does not exceed the target.

    BPCER falls as the threshold rises, so this is the largest threshold with
    ``APCER <= apcer_target``. ``reached`` is False only when no swept threshold
    meets the target, in which case the lowest threshold is reported.
    """
    if not 0.0 < apcer_target < 1.0:
        raise ValueError("apcer_target must be in (0, 1)")
    curve = det_curve(attack_scores, bonafide_scores)
    ok = np.flatnonzero(curve.apcer <= apcer_target)
    reached = ok.size > 0
    i = int(ok[-1]) if reached else 0
    return OperatingPoint(float(curve.thresholds[i]), float(curve.apcer[i]), float(curve.bpcer[i]), reached)


def confidence_half_width(values: Sequence[float], z: float = 1.96) -> float:
    """Normal-approximation half-width ``z * std / sqrt(n)`` (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(z * v.std(ddof=1) / np.sqrt(v.size))
