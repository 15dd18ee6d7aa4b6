"""Face matchers: a seeded toy embedder and an external-process plugin adapter."""
from __future__ import annotations

import shlex
import subprocess

import numpy as np
from PIL import Image

from ..geometry import load_image


class MatcherError(RuntimeError):
    pass


class Matcher:
    """Base matcher: subclasses provide ``embed``; similarity is cosine."""

    name = "matcher"

    def embed(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def embed_path(self, path) -> np.ndarray:
        return self.embed(load_image(path))

    def similarity(self, a: np.ndarray, b: np.ndarray) -> float:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise MatcherError(f"embedding sizes differ: {a.shape} vs {b.shape}")
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise MatcherError("zero-length embedding")
        return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _area_resize(image: np.ndarray, size: int) -> np.ndarray:
    chans = [np.asarray(Image.fromarray(image[..., c].astype(np.float32), mode="F")
                        .resize((size, size), Image.BOX), dtype=np.float64) for c in range(image.shape[2])]
    return np.stack(chans, axis=-1)


class ToyMatcher(Matcher):
    """Seeded random projection of a downsampled, mean-centred image."""

    def __init__(self, seed: int = 0, size: int = 16, dim: int = 128):
        self.seed = seed
        self.size = size
        self.name = f"toy(seed={seed})"
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((dim, size * size * 3)) / np.sqrt(size * size * 3)

    def embed(self, image: np.ndarray) -> np.ndarray:
        x = _area_resize(np.asarray(image, dtype=np.float64), self.size).ravel()
        x = x - x.mean()
        v = self.projection @ x
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


def toy_matcher(seed: int = 0) -> ToyMatcher:
    return ToyMatcher(seed)


class ExternalMatcher(Matcher):
    """Runs ``command <image_path>`` and reads whitespace-separated floats from stdout."""

    def __init__(self, command, name: str | None = None, timeout: float = 60.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.name = name or f"external({' '.join(self.command)})"
        self.timeout = timeout

    def embed_path(self, path) -> np.ndarray:
        try:
            proc = subprocess.run(self.command + [str(path)], capture_output=True, text=True,
                                  timeout=self.timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise MatcherError(f"matcher plugin failed on {path}: {exc}") from None
        if proc.returncode != 0:
            raise MatcherError(f"matcher plugin exited {proc.returncode} on {path}: {proc.stderr.strip()}")
        try:
            vec = np.array([float(t) for t in proc.stdout.split()])
        except ValueError:
            raise MatcherError(f"matcher plugin emitted non-numeric output for {path}") from None
        if vec.size == 0 or not np.all(np.isfinite(vec)):
            raise MatcherError(f"matcher plugin emitted an empty or non-finite embedding for {path}")
        return vec

    def embed(self, image):
        raise MatcherError("external matchers embed files; use embed_path")
