"""Shared fixtures for the test suite."""
from __future__ import annotations

import numpy as np
import pytest

from unpiv import GrayImage, ParticleConfig, UniformFlow, render_pair


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_pair():
    """One 64x64 rendered pair with a known sub-pixel uniform displacement."""
    flow = UniformFlow(1.6, -0.9)
    config = ParticleConfig(image_size=64, seed=7)
    img1, img2, truth = render_pair(flow, config)
    return img1, img2, truth, flow


@pytest.fixture
def flat_image() -> GrayImage:
    return GrayImage(np.full((16, 16), 0.5))
