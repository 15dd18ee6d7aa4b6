"""Landmark-guided image generator: encoders, graph reasoning blocks, decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..geometry import LandmarkSet, as_points

DISC_MODES = ("paired", "no_app", "no_lm", "traditional")


@dataclass
class BlendGeneratorConfig:
    K: int = 106
    resolution: int = 64
    iterations: int = 9
    # heatmap std in pixels; None -> 1.5 px at 64 px, scaled with resolution
    heatmap_sigma: float | None = None
    appearance_channels: int = 32
    shape_channels: int = 16
    graph_channels: int = 16
    # nodes per landmark set; None -> one node per landmark
    graph_nodes: int | None = None
    encoder_depth: int = 3
    attention_bias_init: float = -3.0
    disc_channels: int = 32
    alpha: float = 0.5
    # perceptual, pixel l1, MS-SSIM, adversarial
    loss_weights: tuple[float, float, float, float] = (10.0, 10.0, 1.0, 5.0)
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    disc_mode: str = "paired"
    batch_size: int = 8
    steps: int = 500
    seed: int = 0

    @property
    def sigma(self) -> float:
        if self.heatmap_sigma is not None:
            return self.heatmap_sigma
        return 1.5 * self.resolution / 64

    @property
    def nodes(self) -> int:
        return self.graph_nodes or self.K

    def validate(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if any(w < 0 for w in self.loss_weights):
            raise ValueError("loss weights must be non-negative")
        if self.disc_mode not in DISC_MODES:
            raise ValueError(f"disc_mode must be one of {DISC_MODES}, got {self.disc_mode!r}")
        if self.resolution % (2 ** self.encoder_depth):
            raise ValueError("resolution must be divisible by 2**encoder_depth")
        if self.sigma <= 0:
            raise ValueError("heatmap sigma must be positive")


def render_heatmaps(landmarks, resolution: int, sigma: float) -> np.ndarray:
    """``(K, R, R)`` stack of unit-peak Gaussians, one channel per landmark.

    Each bump is centred on the pixel nearest its landmark, so the channel peak is
    exactly 1 there.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts = as_points(landmarks)
    col = np.clip(np.floor(pts[:, 0] * resolution), 0, resolution - 1)
    row = np.clip(np.floor(pts[:, 1] * resolution), 0, resolution - 1)
    grid = np.arange(resolution, dtype=np.float64)
    gx = np.exp(-((grid[None, :] - col[:, None]) ** 2) / (2 * sigma ** 2))
    gy = np.exp(-((grid[None, :] - row[:, None]) ** 2) / (2 * sigma ** 2))
    return gy[:, :, None] * gx[:, None, :]


class BipartiteGraph:
    """Complete bipartite graph between two sets of ``V`` nodes.

    Nodes ``0..V-1`` form the first set, ``V..2V-1`` the second. Every node has
    degree ``V``, so the symmetric normalization ``D^-1/2 A D^-1/2`` equals ``A / V``.
    """

    def __init__(self, V: int):
        self.V = V

    def adjacency(self) -> np.ndarray:
        V = self.V
        A = np.zeros((2 * V, 2 * V))
        A[:V, V:] = 1.0
        A[V:, :V] = 1.0
        return A

    def normalized(self) -> np.ndarray:
        A = self.adjacency()
        d = A.sum(axis=1)
        return A / np.sqrt(d[:, None] * d[None, :])


def graph_conv(x: torch.Tensor, adj: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """One propagation step ``adj @ x @ weight`` over node features ``x`` of shape (B, nodes, F)."""
    return adj @ (x @ weight)


def conv_block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.2))


class Encoder(nn.Module):
    def __init__(self, cin, cout, depth):
        super().__init__()
        layers = [conv_block(cin, cout, 2)]
        layers += [conv_block(cout, cout, 2) for _ in range(depth - 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class GraphReasoning(nn.Module):
    """Shape codes -> single-channel attention map via bipartite-graph convolutions."""

    def __init__(self, shape_channels, nodes, graph_channels, bias_init=0.0):
        super().__init__()
        self.V = nodes
        cin = 2 * shape_channels
        self.project = nn.Conv2d(cin, 2 * nodes, 1)
        self.gcn1 = nn.Parameter(torch.empty(cin, graph_channels))
        self.gcn2 = nn.Parameter(torch.empty(graph_channels, graph_channels))
        nn.init.xavier_uniform_(self.gcn1)
        nn.init.xavier_uniform_(self.gcn2)
        self.out = nn.Conv2d(graph_channels, 1, 1)
        nn.init.constant_(self.out.bias, bias_init)
        self.register_buffer("adj", torch.as_tensor(BipartiteGraph(nodes).normalized(), dtype=torch.float32))

    def node_features(self, z):
        """Spatial features (B, C, H, W) -> assignment maps (B, 2V, HW) and node features (B, 2V, C)."""
        B, C, H, W = z.shape
        assign = self.project(z).flatten(2)
        nodes = assign @ z.flatten(2).transpose(1, 2) / (H * W)
        return assign, nodes

    def forward(self, f_lm, f_l):
        if f_lm.shape != f_l.shape:
            raise ValueError(f"shape codes differ: {tuple(f_lm.shape)} vs {tuple(f_l.shape)}")
        z = torch.cat([f_lm, f_l], dim=1)
        B, _, H, W = z.shape
        assign, x = self.node_features(z)
        adj = self.adj.to(x.dtype)
        x = F.leaky_relu(graph_conv(x, adj, self.gcn1), 0.2)
        x = graph_conv(x, adj, self.gcn2)
        spatial = (assign.transpose(1, 2) @ x).transpose(1, 2).reshape(B, -1, H, W)
        return torch.sigmoid(self.out(spatial))


def landmark_appearance_aggregation(attention: torch.Tensor, f_i: torch.Tensor) -> torch.Tensor:
    """Residual gating of the appearance code: ``A * F + F``."""
    try:
        torch.broadcast_shapes(attention.shape, f_i.shape)
    except RuntimeError:
        raise ValueError(f"attention {tuple(attention.shape)} does not broadcast to {tuple(f_i.shape)}") from None
    return attention * f_i + f_i


class ShapeUpdate(nn.Module):
    def __init__(self, appearance_channels, shape_channels):
        super().__init__()
        self.cs = shape_channels
        self.net = nn.Sequential(
            conv_block(appearance_channels + 2 * shape_channels, 2 * shape_channels),
            nn.Conv2d(2 * shape_channels, 2 * shape_channels, 3, 1, 1),
        )

    def forward(self, f_i, f_lm, f_l):
        if not (f_i.shape[2:] == f_lm.shape[2:] == f_l.shape[2:]):
            raise ValueError("codes must share spatial dims")
        out = self.net(torch.cat([f_i, f_lm, f_l], dim=1))
        return out[:, :self.cs], out[:, self.cs:]


class Decoder(nn.Module):
    """Nearest upsampling + conv per level, channels halving (floor 8), sigmoid output."""

    def __init__(self, channels, depth):
        super().__init__()
        layers = []
        c = channels
        for _ in range(depth):
            nxt = max(c // 2, 8)
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), conv_block(c, nxt)]
            c = nxt
        layers += [nn.Conv2d(c, 3, 3, 1, 1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class LandmarkGuidedGenerator(nn.Module):
    """Warps one contributing face towards the morph landmarks.

    The same weights serve both contributing subjects.
    """

    def __init__(self, cfg: BlendGeneratorConfig):
        super().__init__()
        self.cfg = cfg
        ca, cs = cfg.appearance_channels, cfg.shape_channels
        self.appearance_encoder = Encoder(3, ca, cfg.encoder_depth)
        self.shape_encoder = Encoder(cfg.K, cs, cfg.encoder_depth)
        self.reasoning = nn.ModuleList(
            GraphReasoning(cs, cfg.nodes, cfg.graph_channels, cfg.attention_bias_init)
            for _ in range(cfg.iterations))
        self.shape_update = nn.ModuleList(ShapeUpdate(ca, cs) for _ in range(cfg.iterations))
        self.decoder = Decoder(ca, cfg.encoder_depth)

    def encode(self, image, heat_l, heat_lm):
        return self.appearance_encoder(image), self.shape_encoder(heat_lm), self.shape_encoder(heat_l)

    def iterate(self, n, f_i, f_lm, f_l):
        attention = self.reasoning[n](f_lm, f_l)
        f_i = landmark_appearance_aggregation(attention, f_i)
        f_lm, f_l = self.shape_update[n](f_i, f_lm, f_l)
        return f_i, f_lm, f_l, attention

    def forward(self, image, heat_l, heat_lm):
        R = self.cfg.resolution
        if image.shape[-2:] != (R, R) or heat_l.shape[-2:] != (R, R) or heat_lm.shape[-2:] != (R, R):
            raise ValueError(f"inputs must be {R}x{R}")
        f_i, f_lm, f_l = self.encode(image, heat_l, heat_lm)
        for n in range(self.cfg.iterations):
            f_i, f_lm, f_l, _ = self.iterate(n, f_i, f_lm, f_l)
        return self.decoder(f_i)


class PatchDiscriminator(nn.Module):
    """Patch-level realness probabilities for a channel-concatenated input."""

    def __init__(self, in_channels, channels=32):
        super().__init__()
        self.in_channels = in_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, channels, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(channels, 2 * channels, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * channels, 1, 3, 1, 1),
        )

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return torch.sigmoid(self.net(x))


def build_discriminators(cfg: BlendGeneratorConfig) -> nn.ModuleDict:
    c = cfg.disc_channels
    discs = {}
    if cfg.disc_mode in ("paired", "no_app"):
        discs["lm"] = PatchDiscriminator(3 + 1, c)
    if cfg.disc_mode in ("paired", "no_lm"):
        discs["app"] = PatchDiscriminator(6, c)
    if cfg.disc_mode == "traditional":
        discs["trad"] = PatchDiscriminator(3, c)
    return nn.ModuleDict(discs)


def discriminate_pair(x, ref, which: str, discs: nn.ModuleDict):
    """Realness map for ``x`` paired with its reference.

    ``which="lm"``: ref is the morph-landmark heatmap stack, max-projected to a
    single channel; ``"app"``: ref is the contributing image; ``"trad"``: ``x``
    alone (ref ignored).
    """
    if which not in discs:
        raise ValueError(f"discriminator {which!r} is not active")
    if which == "trad":
        return discs[which](x)
    if ref.shape[0] != x.shape[0] or ref.shape[-2:] != x.shape[-2:]:
        raise ValueError("image and reference dims differ")
    if which == "lm":
        ref = ref.amax(dim=1, keepdim=True)
    return discs[which](torch.cat([x, ref], dim=1))


def final_morph(m1, m2, alpha: float = 0.5):
    """Convex combination ``alpha * m1 + (1 - alpha) * m2``."""
    if m1.shape != m2.shape:
        raise ValueError(f"image dims differ: {tuple(m1.shape)} vs {tuple(m2.shape)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    return alpha * m1 + (1 - alpha) * m2


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1)), dtype=dtype)


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return np.clip(t.detach().cpu().numpy().astype(np.float64).transpose(1, 2, 0), 0.0, 1.0)


def heatmap_tensor(landmarks, cfg: BlendGeneratorConfig, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(render_heatmaps(landmarks, cfg.resolution, cfg.sigma), dtype=dtype)


def generate_intermediate(image: np.ndarray, landmarks: LandmarkSet, morph_landmarks: LandmarkSet,
                          generator: LandmarkGuidedGenerator) -> np.ndarray:
    cfg = generator.cfg
    dtype = next(generator.parameters()).dtype
    x = image_to_tensor(image, dtype)[None]
    with torch.no_grad():
        out = generator(x, heatmap_tensor(landmarks, cfg, dtype)[None],
                        heatmap_tensor(morph_landmarks, cfg, dtype)[None])
    return tensor_to_image(out[0])


def generate_morph(i1, i2, l1, l2, lm, generator: LandmarkGuidedGenerator, alpha: float | None = None):
    """Full morph: one intermediate per contributing face, then the convex blend."""
    alpha = generator.cfg.alpha if alpha is None else alpha
    m1 = generate_intermediate(i1, l1, lm, generator)
    m2 = generate_intermediate(i2, l2, lm, generator)
    return np.clip(final_morph(m1, m2, alpha), 0.0, 1.0)
