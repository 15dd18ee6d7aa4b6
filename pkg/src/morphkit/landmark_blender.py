"""Learned morph landmarks: an encoder-decoder predicting per-point shifts for both faces.

The morphed landmarks are the average of the two shifted landmark sets. Training
combines a geometric-distance term, a geometric-balance term and a non-saturating
adversarial term against an MLP landmark discriminator.
"""
from __future__ import annotations

import contextlib
import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .geometry import LandmarkSet

logger = logging.getLogger(__name__)

MAGIC = b"LMB1"
LOG_COLUMNS = ["step", "L_GD", "L_GB", "L_adv", "total", "D_loss"]
PROB_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class BlenderNetConfig:
    K: int = 106
    encoder_hidden: tuple[int, int] = (256, 128)
    code_dim: int = 64
    decoder_hidden: int = 128
    disc_hidden: tuple[int, int] = (128, 64)
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    # geometric distance, geometric balance, adversarial
    loss_weights: tuple[float, float, float] = (100.0, 10.0, 0.1)
    batch_size: int = 8
    steps: int = 500
    seed: int = 0

    def validate(self):
        if self.K <= 0:
            raise ValueError("K must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if any(w < 0 for w in self.loss_weights):
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class LandmarkBlenderNet(nn.Module):
    """Shared encoder over the concatenated pair, two shift heads."""

    def __init__(self, cfg: BlenderNetConfig):
        super().__init__()
        K = cfg.K
        h1, h2 = cfg.encoder_hidden
        self.K = K
        self.encoder = nn.Sequential(
            nn.Linear(4 * K, h1), nn.LeakyReLU(0.2),
            nn.Linear(h1, h2), nn.LeakyReLU(0.2),
            nn.Linear(h2, cfg.code_dim), nn.LeakyReLU(0.2),
        )
        self.head1 = self._head(cfg)
        self.head2 = self._head(cfg)

    @staticmethod
    def _head(cfg):
        head = nn.Sequential(nn.Linear(cfg.code_dim, cfg.decoder_hidden), nn.LeakyReLU(0.2),
                             nn.Linear(cfg.decoder_hidden, 2 * cfg.K))
        # zero shifts at init: training starts from the plain landmark average
        nn.init.zeros_(head[-1].weight)
        nn.init.zeros_(head[-1].bias)
        return head

    def forward(self, l1: torch.Tensor, l2: torch.Tensor):
        B = l1.shape[0]
        code = self.encoder(torch.cat([l1.reshape(B, -1), l2.reshape(B, -1)], dim=1))
        return self.head1(code).view(B, self.K, 2), self.head2(code).view(B, self.K, 2)


class LandmarkDiscriminator(nn.Module):
    def __init__(self, cfg: BlenderNetConfig):
        super().__init__()
        h1, h2 = cfg.disc_hidden
        self.K = cfg.K
        self.net = nn.Sequential(
            nn.Linear(2 * cfg.K, h1), nn.LeakyReLU(0.2),
            nn.Linear(h1, h2), nn.LeakyReLU(0.2),
            nn.Linear(h2, 1),
        )

    def forward(self, lm: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(lm.reshape(lm.shape[0], -1))).squeeze(1)


def _as_batch(l, K: int | None = None) -> torch.Tensor:
    if isinstance(l, LandmarkSet):
        l = l.points
    t = l if isinstance(l, torch.Tensor) else torch.tensor(np.asarray(l))
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if K is not None and t.shape[-2] != K:
        raise ValueError(f"landmark count mismatch: expected K={K}, got {t.shape[-2]}")
    return t


def predict_shifts(l1, l2, net: LandmarkBlenderNet) -> tuple[np.ndarray, np.ndarray]:
    """Shifts for a single pair, as ``(K, 2)`` arrays."""
    dtype = next(net.parameters()).dtype
    a = _as_batch(l1, net.K).to(dtype)
    b = _as_batch(l2, net.K).to(dtype)
    with torch.no_grad():
        s1, s2 = net(a, b)
    return s1[0].numpy().astype(np.float64), s2[0].numpy().astype(np.float64)


def blend_landmarks(l1, l2, s1, s2):
    """Average of the two shifted landmark sets. Works on arrays, tensors or LandmarkSets."""
    wrap = isinstance(l1, LandmarkSet)
    a = l1.points if isinstance(l1, LandmarkSet) else l1
    b = l2.points if isinstance(l2, LandmarkSet) else l2
    if a.shape != b.shape or a.shape != s1.shape or a.shape != s2.shape:
        raise ValueError("landmark count mismatch between landmark sets and shifts")
    lm = ((a + s1) + (b + s2)) / 2
    return LandmarkSet(lm) if wrap else lm


def morph_landmarks(l1: LandmarkSet, l2: LandmarkSet, net: LandmarkBlenderNet) -> LandmarkSet:
    s1, s2 = predict_shifts(l1, l2, net)
    return blend_landmarks(l1, l2, s1, s2)


def _l1_distances(lm, l1, l2):
    lm, l1, l2 = (_as_batch(x) for x in (lm, l1, l2))
    if not (lm.shape == l1.shape == l2.shape):
        raise ValueError("landmark count mismatch")
    d1 = (lm - l1).abs().sum(dim=(-2, -1))
    d2 = (lm - l2).abs().sum(dim=(-2, -1))
    return d1, d2


def geometric_distance_loss(lm, l1, l2) -> torch.Tensor:
    """Mean over the batch of ``(|lm - l1|_1 + |lm - l2|_1) / 2`` (sum over all 2K coords)."""
    d1, d2 = _l1_distances(lm, l1, l2)
    return ((d1 + d2) / 2).mean()


def geometric_balance_loss(lm, l1, l2) -> torch.Tensor:
    # torch's |x| has gradient 0 at x == 0, the subgradient we want at the kink
    d1, d2 = _l1_distances(lm, l1, l2)
    return (d1 - d2).abs().mean()


def _check_prob(p, name):
    p = torch.as_tensor(p, dtype=torch.float64) if not isinstance(p, torch.Tensor) else p
    if torch.any(~torch.isfinite(p)) or torch.any(p < 0) or torch.any(p > 1):
        raise ValueError(f"{name} must hold probabilities in (0, 1)")
    return p.clamp(PROB_EPS, 1 - PROB_EPS)


def landmark_adversarial_loss(d_real, d_fake, side: str) -> torch.Tensor:
    """Log-loss GAN objective; ``side`` is ``"generator"`` or ``"discriminator"``.

    The generator uses the non-saturating ``-log D(fake)`` form.
    """
    fake = _check_prob(d_fake, "d_fake")
    if side == "generator":
        return -torch.log(fake).mean()
    if side == "discriminator":
        real = _check_prob(d_real, "d_real")
        return -(torch.log(real).mean() + torch.log(1 - fake).mean())
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def total_landmark_loss(l_gd, l_gb, l_adv, weights=(100.0, 10.0, 0.1)):
    parts = (l_gd, l_gb, l_adv)
    for name, p in zip(("L_GD", "L_GB", "L_adv"), parts):
        if not torch.isfinite(torch.as_tensor(p)).all():
            raise ValueError(f"non-finite loss component {name}")
    w1, w2, w3 = weights
    return w1 * l_gd + w2 * l_gb + w3 * l_adv


def discriminate_landmarks(l, disc: LandmarkDiscriminator) -> float:
    dtype = next(disc.parameters()).dtype
    with torch.no_grad():
        return float(disc(_as_batch(l, disc.K).to(dtype))[0])


# ---------------------------------------------------------------------------
# Training


@dataclass
class BlenderCheckpoint:
    cfg: BlenderNetConfig
    net: LandmarkBlenderNet
    disc: LandmarkDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: BlenderNetConfig) -> "BlenderCheckpoint":
        cfg.validate()
        with seeded(cfg.seed):
            net = LandmarkBlenderNet(cfg)
            disc = LandmarkDiscriminator(cfg)
        opt_g = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas)
        opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr, betas=cfg.betas)
        return cls(cfg, net, disc, opt_g, opt_d)

    def to_bytes(self) -> bytes:
        g_groups, g_state = ckpt.flatten_optimizer("opt_g", self.opt_g)
        d_groups, d_state = ckpt.flatten_optimizer("opt_d", self.opt_d)
        tensors = {f"net/{k}": v for k, v in self.net.state_dict().items()}
        tensors.update({f"disc/{k}": v for k, v in self.disc.state_dict().items()})
        tensors.update(g_state)
        tensors.update(d_state)
        meta = {"config": asdict(self.cfg), "step": self.step,
                "opt_g_groups": g_groups, "opt_d_groups": d_groups}
        return ckpt.dumps(MAGIC, meta, tensors)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "BlenderCheckpoint":
        meta, tensors = ckpt.loads(MAGIC, blob)
        c = meta["config"]
        cfg = BlenderNetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()})
        out = cls.fresh(cfg)
        out.net.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net/")})
        out.disc.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("disc/")})
        ckpt.restore_optimizer("opt_g", out.opt_g, meta["opt_g_groups"], tensors)
        ckpt.restore_optimizer("opt_d", out.opt_d, meta["opt_d_groups"], tensors)
        out.step = meta["step"]
        return out

    def save(self, path):
        ckpt.write_atomic(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "BlenderCheckpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _stack_pairs(pairs) -> torch.Tensor:
    if isinstance(pairs, torch.Tensor):
        return pairs.to(torch.float32)
    arr = np.stack([np.stack([l1.points if isinstance(l1, LandmarkSet) else l1,
                              l2.points if isinstance(l2, LandmarkSet) else l2]) for l1, l2 in pairs])
    return torch.as_tensor(arr, dtype=torch.float32)


def _stack_pool(pool) -> torch.Tensor:
    if isinstance(pool, torch.Tensor):
        return pool.to(torch.float32)
    return torch.as_tensor(np.stack([p.points if isinstance(p, LandmarkSet) else p for p in pool]),
                           dtype=torch.float32)


def train_landmark_blender(pairs, real_pool, cfg: BlenderNetConfig | None = None, steps: int | None = None,
                           state: BlenderCheckpoint | None = None, log_path=None) -> BlenderCheckpoint:
    """Alternate generator and discriminator Adam steps.

    ``pairs`` is a sequence of ``(l1, l2)`` landmark pairs, ``real_pool`` a sequence of
    genuine landmark sets for the discriminator. Passing ``state`` resumes training;
    the step counter continues from it. Each step appends a row to ``state.history``
    (and to ``log_path`` as CSV when given).
    """
    if state is None:
        state = BlenderCheckpoint.fresh(cfg or BlenderNetConfig())
    cfg = state.cfg
    steps = cfg.steps if steps is None else steps
    data = _stack_pairs(pairs)
    pool = _stack_pool(real_pool)
    if len(data) == 0 or len(pool) == 0:
        raise ValueError("training needs at least one pair and one real landmark set")
    if data.shape[2] != cfg.K or pool.shape[1] != cfg.K:
        raise ValueError(f"landmark count mismatch: config K={cfg.K}")

    gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + state.step)
    net, disc = state.net.train(), state.disc.train()
    w = cfg.loss_weights

    writer = None
    fh = None
    if log_path is not None:
        new = state.step == 0
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(LOG_COLUMNS)

    try:
        for _ in range(steps):
            idx = _batch_indices(len(data), cfg.batch_size, gen)
            ridx = _batch_indices(len(pool), cfg.batch_size, gen)
            l1, l2 = data[idx, 0], data[idx, 1]
            real = pool[ridx]

            state.opt_g.zero_grad()
            s1, s2 = net(l1, l2)
            lm = blend_landmarks(l1, l2, s1, s2)
            if not torch.isfinite(lm).all():
                raise TrainingDiverged(f"non-finite morph landmarks at step {state.step + 1}")
            l_gd = geometric_distance_loss(lm, l1, l2)
            l_gb = geometric_balance_loss(lm, l1, l2)
            l_adv = landmark_adversarial_loss(None, disc(lm), "generator")
            comps = torch.stack([l_gd, l_gb, l_adv]).detach()
            if not torch.isfinite(comps).all():
                raise TrainingDiverged(f"non-finite loss at step {state.step + 1}: "
                                       f"L_GD={l_gd.item()} L_GB={l_gb.item()} L_adv={l_adv.item()}")
            total = total_landmark_loss(l_gd, l_gb, l_adv, w)
            total.backward()
            state.opt_g.step()

            state.opt_d.zero_grad()
            d_loss = landmark_adversarial_loss(disc(real), disc(lm.detach()), "discriminator")
            if not torch.isfinite(d_loss):
                raise TrainingDiverged(f"non-finite discriminator loss at step {state.step + 1}")
            d_loss.backward()
            state.opt_d.step()

            state.step += 1
            row = [state.step, l_gd.item(), l_gb.item(), l_adv.item(), total.item(), d_loss.item()]
            state.history.append(row)
            if writer is not None:
                writer.writerow(row)
    finally:
        if fh is not None:
            fh.close()
    net.eval()
    disc.eval()
    return state


def _batch_indices(n: int, batch_size: int, gen: torch.Generator) -> torch.Tensor:
    if batch_size >= n:
        return torch.arange(n)
    return torch.randperm(n, generator=gen)[:batch_size]
