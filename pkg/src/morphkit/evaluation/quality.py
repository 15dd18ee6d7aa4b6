"""PSNR / SSIM / MS-SSIM for images in [0, 1] (peak value 1)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .metrics import confidence_half_width

PSNR_CAP = 100.0
C1 = 0.01 ** 2
C2 = 0.03 ** 2
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ms_ssim_plan(height: int, width: int, win_size: int = 11, max_scales: int = 5):
    """Window size and scale count usable at this resolution.

    Five scales need a shorter side above ``(win - 1) * 16`` (160 px for an
    11-tap window); smaller images drop the coarsest scales, and images
    smaller than the window use the largest odd window that fits.
    """
    side = min(height, width)
    win = min(win_size, side if side % 2 else side - 1)
    scales = 1
    while scales < max_scales and side > (win - 1) * 2 ** scales:
        scales += 1
    return win, scales


def _pair(img, ref):
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def psnr(img, ref) -> float:
    a, b = _pair(img, ref)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    x = sliding_window_view(x, w.size, axis=0) @ w
    return sliding_window_view(x, w.size, axis=1) @ w


def _ssim_cs(a: np.ndarray, b: np.ndarray, w: np.ndarray):
    """Per-channel mean SSIM and contrast-structure terms over the valid window region."""
    ssims, css = [], []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx ** 2
        syy = _filter_valid(y * y, w) - my ** 2
        sxy = _filter_valid(x * y, w) - mx * my
        cs = (2 * sxy + C2) / (sxx + syy + C2)
        ssims.append(np.mean((2 * mx * my + C1) / (mx ** 2 + my ** 2 + C1) * cs))
        css.append(np.mean(cs))
    return np.array(ssims), np.array(css)


def ssim(img, ref, win_size: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-window SSIM, averaged over channels."""
    a, b = _pair(img, ref)
    if min(a.shape[:2]) < win_size:
        raise ValueError(f"images must be at least {win_size} px on each side")
    s, _ = _ssim_cs(a, b, gaussian_window(win_size, sigma))
    return float(s.mean())


def _downsample(x):
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(img, ref, win_size: int = 11, sigma: float = 1.5, scales: int | None = None) -> float:
    a, b = _pair(img, ref)
    win, auto = ms_ssim_plan(a.shape[0], a.shape[1], win_size)
    scales = auto if scales is None else scales
    weights = np.array(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    w = gaussian_window(win, sigma)
    out = np.ones(a.shape[2])
    for s in range(scales):
        ss, cs = _ssim_cs(a, b, w)
        term = ss if s == scales - 1 else cs
        out *= np.maximum(term, 0.0) ** weights[s]
        if s < scales - 1:
            a, b = _downsample(a), _downsample(b)
    return float(out.mean())


@dataclass
class QualityEntry:
    morph_id: str
    psnr: float
    ssim: float


def morph_quality(morph, parent1, parent2, morph_id: str = "") -> QualityEntry:
    """PSNR and SSIM of the morph against each parent, averaged over the two parents."""
    return QualityEntry(
        morph_id,
        (psnr(morph, parent1) + psnr(morph, parent2)) / 2,
        (ssim(morph, parent1) + ssim(morph, parent2)) / 2,
    )


@dataclass
class QualityReport:
    entries: list[QualityEntry] = field(default_factory=list)

    def summary(self) -> dict:
        p = [e.psnr for e in self.entries]
        s = [e.ssim for e in self.entries]
        return {
            "count": len(self.entries),
            "psnr_mean": float(np.mean(p)) if p else float("nan"),
            "psnr_ci95": confidence_half_width(p),
            "ssim_mean": float(np.mean(s)) if s else float("nan"),
            "ssim_ci95": confidence_half_width(s),
        }
