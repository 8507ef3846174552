import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent))

from avfr import world


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_clip():
    return world.make_clip(seed=7, n_frames=6)


@pytest.fixture(scope="session")
def tiny_clips():
    return [world.make_clip(seed=100 + i, n_frames=6) for i in range(8)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
