from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .. import checkpoint as ckpt
from ..geometry import LandmarkSet, warp_to
from ..landmark_blender import TrainingDiverged, seeded
from .losses import default_extractor, discriminator_loss, image_blend_loss, ms_ssim_plan
from .networks import (BlendGeneratorConfig, LandmarkGuidedGenerator, build_discriminators,
                       discriminate_pair, image_to_tensor, render_heatmaps)

logger = logging.getLogger(__name__)

MAGIC = b"GIB1"
BASE_COLUMNS = ["step", "L_per", "L_l1", "L_msssim", "L_adv", "total"]
DISC_COLUMNS = {"lm": "D_lm", "app": "D_app", "trad": "D_trad"}


def log_columns(cfg: BlendGeneratorConfig) -> list[str]:
    return BASE_COLUMNS + [DISC_COLUMNS[k] for k in build_discriminators(cfg).keys()]


@dataclass
class BlendSample:
    """One training pair with its morph landmarks and per-face classical supervisors."""

    i1: np.ndarray
    i2: np.ndarray
    l1: LandmarkSet
    l2: LandmarkSet
    lm: LandmarkSet
    op1: np.ndarray
    op2: np.ndarray

    @classmethod
    def build(cls, i1, i2, l1, l2, lm):
        """Supervisors: each face warped onto ``lm`` by the classical Delaunay method."""
        return cls(i1, i2, l1, l2, lm, warp_to(i1, l1, lm), warp_to(i2, l2, lm))


@dataclass
class GeneratorCheckpoint:
    cfg: BlendGeneratorConfig
    generator: LandmarkGuidedGenerator
    discs: nn.ModuleDict
    opt_g: torch.optim.Optimizer
    opt_d: dict
    step: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg: BlendGeneratorConfig) -> "GeneratorCheckpoint":
        cfg.validate()
        with seeded(cfg.seed):
            gen = LandmarkGuidedGenerator(cfg)
            discs = build_discriminators(cfg)
        opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_g, betas=cfg.betas)
        opt_d = {k: torch.optim.Adam(d.parameters(), lr=cfg.lr_d, betas=cfg.betas) for k, d in discs.items()}
        return cls(cfg, gen, discs, opt_g, opt_d)

    def to_bytes(self) -> bytes:
        tensors = {f"gen/{k}": v for k, v in self.generator.state_dict().items()}
        tensors.update({f"disc/{k}": v for k, v in self.discs.state_dict().items()})
        groups = {}
        g, t = ckpt.flatten_optimizer("opt_g", self.opt_g)
        groups["opt_g"] = g
        tensors.update(t)
        for k, opt in self.opt_d.items():
            g, t = ckpt.flatten_optimizer(f"opt_d_{k}", opt)
            groups[f"opt_d_{k}"] = g
            tensors.update(t)
        meta = {"config": asdict(self.cfg), "step": self.step, "optimizer_groups": groups}
        return ckpt.dumps(MAGIC, meta, tensors)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GeneratorCheckpoint":
        meta, tensors = ckpt.loads(MAGIC, blob)
        cfg = BlendGeneratorConfig(**{k: tuple(v) if isinstance(v, list) else v
                                      for k, v in meta["config"].items()})
        out = cls.fresh(cfg)
        out.generator.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("gen/")})
        out.discs.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("disc/")})
        groups = meta["optimizer_groups"]
        ckpt.restore_optimizer("opt_g", out.opt_g, groups["opt_g"], tensors)
        for k, opt in out.opt_d.items():
            ckpt.restore_optimizer(f"opt_d_{k}", opt, groups[f"opt_d_{k}"], tensors)
        out.step = meta["step"]
        return out

    def save(self, path):
        ckpt.write_atomic(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "GeneratorCheckpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _stack_samples(samples: list[BlendSample], cfg: BlendGeneratorConfig):
    R = cfg.resolution

    def imgs(attr):
        out = torch.stack([image_to_tensor(getattr(s, attr)) for s in samples])
        if out.shape[-2:] != (R, R):
            raise ValueError(f"training images must be {R}x{R}, got {tuple(out.shape[-2:])}")
        return out

    def heats(attr):
        return torch.as_tensor(np.stack([render_heatmaps(getattr(s, attr), R, cfg.sigma) for s in samples]),
                               dtype=torch.float32)

    for s in samples:
        if not (s.l1.K == s.l2.K == s.lm.K == cfg.K):
            raise ValueError(f"landmark count mismatch: config K={cfg.K}")
    return {"i1": imgs("i1"), "i2": imgs("i2"), "op1": imgs("op1"), "op2": imgs("op2"),
            "h1": heats("l1"), "h2": heats("l2"), "hm": heats("lm")}


def train_image_blender(samples: list[BlendSample], cfg: BlendGeneratorConfig | None = None,
                        steps: int | None = None, state: GeneratorCheckpoint | None = None,
                        log_path=None) -> GeneratorCheckpoint:
    """Alternate generator and discriminator Adam steps against classical supervisors.

    Both contributing faces of every sampled pair go through the shared
    generator; each is scored against its own supervisor warp. Resuming from
    ``state`` continues its step counter.
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    if state is None:
        state = GeneratorCheckpoint.fresh(cfg or BlendGeneratorConfig())
    cfg = state.cfg
    steps = cfg.steps if steps is None else steps
    data = _stack_samples(samples, cfg)
    n = len(samples)
    gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + state.step)
    extractor = default_extractor(torch.float32)
    G, discs = state.generator.train(), state.discs.train()
    columns = log_columns(cfg)
    win, scales = ms_ssim_plan(cfg.resolution, cfg.resolution)
    logger.info("MS-SSIM uses %d scale(s) with a %d-tap window at %d px", scales, win, cfg.resolution)

    writer = fh = None
    if log_path is not None:
        new = state.step == 0
        fh = open(log_path, "w" if new else "a", newline="")
        writer = csv.writer(fh)
        if new:
            writer.writerow(columns)

    try:
        for _ in range(steps):
            idx = torch.arange(n) if cfg.batch_size >= n else torch.randperm(n, generator=gen)[:cfg.batch_size]
            x = torch.cat([data["i1"][idx], data["i2"][idx]])
            hl = torch.cat([data["h1"][idx], data["h2"][idx]])
            hm = torch.cat([data["hm"][idx], data["hm"][idx]])
            sup = torch.cat([data["op1"][idx], data["op2"][idx]])
            refs = {"lm": hm, "app": x, "trad": None}

            state.opt_g.zero_grad()
            fake = G(x, hl, hm)
            fake_probs = [discriminate_pair(fake, refs[k], k, discs) for k in discs]
            total, parts = image_blend_loss(fake, sup, fake_probs, cfg.loss_weights, extractor)
            if not torch.isfinite(total):
                raise TrainingDiverged(f"non-finite generator loss at step {state.step + 1}: "
                                       + ", ".join(f"{k}={v.item()}" for k, v in parts.items()))
            total.backward()
            state.opt_g.step()

            d_losses = {}
            fake = fake.detach()
            for k in discs:
                state.opt_d[k].zero_grad()
                real_p = discriminate_pair(sup, refs[k], k, discs)
                fake_p = discriminate_pair(fake, refs[k], k, discs)
                d_loss = discriminator_loss(real_p, fake_p)
                if not torch.isfinite(d_loss):
                    raise TrainingDiverged(f"non-finite {DISC_COLUMNS[k]} loss at step {state.step + 1}")
                d_loss.backward()
                state.opt_d[k].step()
                d_losses[k] = d_loss.item()

            state.step += 1
            row = [state.step] + [parts[c].item() for c in BASE_COLUMNS[1:-1]] + [total.item()]
            row += [d_losses[k] for k in discs]
            state.history.append(row)
            if writer is not None:
                writer.writerow(row)
    finally:
        if fh is not None:
            fh.close()
    G.eval()
    discs.eval()
    return state
