"""Generator objective: perceptual + pixel l1 + MS-SSIM + adversarial terms."""
from __future__ import annotations

from importlib import resources

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..evaluation.quality import C1, C2, MS_SSIM_WEIGHTS, gaussian_window, ms_ssim_plan

PROB_EPS = 1e-7
PERCEPTUAL_WEIGHTS_FILE = "perceptual_weights.npz"
PERCEPTUAL_SEED = 20240601
PERCEPTUAL_LAYERS = ((3, 16, 1), (16, 32, 2), (32, 32, 2))


def _filter(x, win1d):
    C = x.shape[1]
    k = win1d.to(x.dtype)
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(C, 1, 1, -1), groups=C)
    return F.conv2d(x, k.view(1, 1, -1, 1).expand(C, 1, -1, 1), groups=C)


def _ssim_cs(x, y, win1d):
    mu_x, mu_y = _filter(x, win1d), _filter(y, win1d)
    sxx = _filter(x * x, win1d) - mu_x ** 2
    syy = _filter(y * y, win1d) - mu_y ** 2
    sxy = _filter(x * y, win1d) - mu_x * mu_y
    cs = (2 * sxy + C2) / (sxx + syy + C2)
    ssim = (2 * mu_x * mu_y + C1) / (mu_x ** 2 + mu_y ** 2 + C1) * cs
    return ssim.mean(dim=(2, 3)), cs.mean(dim=(2, 3))


def ms_ssim(x: torch.Tensor, y: torch.Tensor, win_size: int = 11, sigma: float = 1.5,
            scales: int | None = None) -> torch.Tensor:
    """Differentiable MS-SSIM of (B, C, H, W) images in [0, 1], averaged over batch and channels.

    Scale weights are the conventional five, truncated and renormalized when
    fewer scales fit.
    """
    if x.shape != y.shape:
        raise ValueError(f"image dims differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    win, auto_scales = ms_ssim_plan(x.shape[-2], x.shape[-1], win_size)
    scales = auto_scales if scales is None else scales
    weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=x.dtype)
    weights = weights / weights.sum()
    win1d = torch.as_tensor(gaussian_window(win, sigma))

    factors = []
    for s in range(scales):
        ssim, cs = _ssim_cs(x, y, win1d)
        if s == scales - 1:
            factors.append(F.relu(ssim))
        else:
            factors.append(F.relu(cs))
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    stacked = torch.stack(factors, dim=0)
    return torch.prod(stacked ** weights.view(-1, 1, 1), dim=0).mean()


def make_perceptual_weights(seed: int = PERCEPTUAL_SEED) -> dict[str, np.ndarray]:
    """He-initialized conv weights for the frozen feature extractor (the shipped fixture)."""
    rng = np.random.default_rng(seed)
    out = {}
    for i, (cin, cout, _) in enumerate(PERCEPTUAL_LAYERS):
        std = np.sqrt(2.0 / (cin * 9))
        out[f"conv{i}.weight"] = (rng.standard_normal((cout, cin, 3, 3)) * std).astype(np.float32)
        out[f"conv{i}.bias"] = np.zeros(cout, dtype=np.float32)
    return out


class FrozenFeatureExtractor(nn.Module):
    """Fixed random conv stack used for the perceptual loss.

    Any module mapping images to a list of feature maps can stand in for it
    (e.g. a pretrained network) via ``image_blend_loss(extractor=...)``.
    """

    def __init__(self, weights: dict[str, np.ndarray] | None = None):
        super().__init__()
        if weights is None:
            weights = load_perceptual_weights()
        self.convs = nn.ModuleList()
        for i, (cin, cout, stride) in enumerate(PERCEPTUAL_LAYERS):
            conv = nn.Conv2d(cin, cout, 3, stride, 1)
            conv.weight.data = torch.as_tensor(weights[f"conv{i}.weight"]).clone()
            conv.bias.data = torch.as_tensor(weights[f"conv{i}.bias"]).clone()
            self.convs.append(conv)
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


def load_perceptual_weights() -> dict[str, np.ndarray]:
    ref = resources.files("morphkit.data").joinpath(PERCEPTUAL_WEIGHTS_FILE)
    with resources.as_file(ref) as path, np.load(path) as data:
        return {k: data[k] for k in data.files}


def perceptual_loss(x, y, extractor: nn.Module) -> torch.Tensor:
    fx = extractor(x)
    fy = extractor(y)
    return torch.stack([((a - b) ** 2).mean() for a, b in zip(fx, fy)]).mean()


def generator_adversarial_loss(fake_probs) -> torch.Tensor:
    """Non-saturating ``-log D(fake)``, averaged over the active discriminators."""
    if not fake_probs:
        return torch.zeros(())
    terms = [-torch.log(p.clamp(PROB_EPS, 1 - PROB_EPS)).mean() for p in fake_probs]
    return torch.stack(terms).mean()


def discriminator_loss(real_probs, fake_probs) -> torch.Tensor:
    real = real_probs.clamp(PROB_EPS, 1 - PROB_EPS)
    fake = fake_probs.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(torch.log(real).mean() + torch.log(1 - fake).mean())


def combine_image_losses(parts: dict, weights=(10.0, 10.0, 1.0, 5.0)):
    names = ("L_per", "L_l1", "L_msssim", "L_adv")
    for n in names:
        if not torch.isfinite(torch.as_tensor(parts[n])).all():
            raise ValueError(f"non-finite loss component {n}")
    return sum(w * parts[n] for w, n in zip(weights, names))


def image_blend_loss(generated, supervisor, fake_probs=(), weights=(10.0, 10.0, 1.0, 5.0),
                     extractor: nn.Module | None = None):
    """Weighted generator objective and its components.

    ``fake_probs`` holds each active discriminator's output on the generated
    pairs. Returns ``(total, parts)`` with ``parts`` keyed
    ``L_per, L_l1, L_msssim, L_adv``.
    """
    if generated.shape != supervisor.shape:
        raise ValueError(f"image dims differ: {tuple(generated.shape)} vs {tuple(supervisor.shape)}")
    if extractor is None:
        extractor = default_extractor(generated.dtype)
    parts = {
        "L_per": perceptual_loss(generated, supervisor, extractor),
        "L_l1": (generated - supervisor).abs().mean(),
        "L_msssim": 1 - ms_ssim(generated, supervisor),
        "L_adv": generator_adversarial_loss(list(fake_probs)).to(generated.dtype),
    }
    return combine_image_losses(parts, weights), parts


_EXTRACTORS: dict = {}


def default_extractor(dtype=torch.float32) -> FrozenFeatureExtractor:
    if dtype not in _EXTRACTORS:
        _EXTRACTORS[dtype] = FrozenFeatureExtractor().to(dtype)
    return _EXTRACTORS[dtype]
