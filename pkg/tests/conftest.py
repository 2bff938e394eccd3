import sys
from pathlib import Path

import numpy as np
import pytest

from shacira.hashgrid import GridConfig
from shacira.imageio import read_image
from shacira.trainer import TrainConfig, train

DATA = Path(__file__).parent / "data"
sys.path.insert(0, str(Path(__file__).parent))

SMALL_GRID = GridConfig(levels=4, r_min=4, r_max=24, table_size=2**8, feature_dim=2, latent_dim=2)


@pytest.fixture(scope="session")
def crop128():
    return read_image(DATA / "crop128.ppm")


@pytest.fixture(scope="session")
def small_image(crop128):
    return crop128[::4, ::4][:24, :32].copy()


@pytest.fixture(scope="session")
def small_trained(small_image):
    cfg = TrainConfig(steps=300, lr_density=1e-3, seed=3, mlp_width=8, log_every=50)
    model, trace = train(small_image, cfg, SMALL_GRID)
    return model, trace, cfg


@pytest.fixture
def rs():
    return np.random.default_rng(1234)
