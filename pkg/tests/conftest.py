import os
import sys

import numpy as np
import pytest

# Source modules import each other by bare name
sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

from cookgrid import CookGrid, parse_layout  # noqa: E402
from utils import build_run_config  # noqa: E402

TINY_LAYOUT = """horizon=60
CCPCC
N1.2D
CCSCC
"""

TINY_OVERRIDES = {
    "san.hidden": "8,8",
    "san.T": "2",
    "context.size": "2",
    "context.token_dim": "8",
    "context.head_dim": "4",
    "context.inner_dim": "16",
    "mop.k": "3",
    "mop.hidden": "8",
    "dpp.feature_dim": "4",
    "dpp.hidden": "8",
    "dpp.meta_samples": "8",
    "train.rollout_length": "64",
    "train.batch_size": "32",
    "train.epochs": "1",
    "train.total_steps": "128",
    "train.eta_period": "1",
    "train.checkpoint_interval": "1",
}


def tiny_config(method: str = "mop-san", **extra):
    from models import METHOD_PRESETS

    flat = dict(TINY_OVERRIDES)
    flat.update(METHOD_PRESETS[method])
    flat["method"] = method
    flat.update({key.replace("__", "."): str(value) for key, value in extra.items()})
    return build_run_config(flat)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def env():
    return CookGrid.from_file()


@pytest.fixture
def tiny_env():
    return CookGrid(parse_layout(TINY_LAYOUT, name="tiny"))


@pytest.fixture
def tiny_cfg():
    return tiny_config()
