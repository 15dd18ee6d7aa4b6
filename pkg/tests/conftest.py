import sys

import numpy as np
import pytest

from morphkit.geometry import LandmarkSet
from morphkit.pipeline.synth import landmarks_for, render_face, sample_params


def smooth_image(h, w, seed=0):
    """Low-frequency RGB fixture in [0.1, 0.9]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    chans = []
    for _ in range(3):
        fx, fy, ph = rng.uniform(0.5, 1.5, 3)
        chans.append(0.5 + 0.4 * np.sin(2 * np.pi * fx * xx + ph) * np.cos(2 * np.pi * fy * yy))
    return np.stack(chans, axis=-1)


@pytest.fixture
def smooth():
    return smooth_image


def synthetic_face(seed, resolution=64):
    rng = np.random.default_rng(seed)
    p = sample_params(rng)
    return render_face(p, resolution, rng), LandmarkSet(landmarks_for(p))


@pytest.fixture
def face():
    return synthetic_face


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
