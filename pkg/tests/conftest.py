# Pytest configuration
"""Shared fixtures: tiny network configs and a small rendered corpus."""

import numpy as np
import pytest

from lfsynth.diffcore import Tensor
from lfsynth.lightfield import LightField
from lfsynth.model import NetConfig, build
from lfsynth.synthgen import make_dataset
from lfsynth.trainer import TrainConfig

TINY_HW = (8, 8)
TINY_ANGULAR = 3


@pytest.fixture(autouse=True)
def no_langfuse(monkeypatch):
    """Keep run tracing local so tests never reach the network."""
    monkeypatch.delenv("LANGFUSE_PUBLIC_KEY", raising=False)
    monkeypatch.delenv("LANGFUSE_SECRET_KEY", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Two-level network on 8x8 inputs with a 3x3 angular grid."""
    return NetConfig(input_hw=TINY_HW, angular=TINY_ANGULAR, base_filters=2, depth=2)


@pytest.fixture
def tiny_params(tiny_config):
    return build(tiny_config, seed=0)


@pytest.fixture
def center_image(rng):
    return Tensor(rng.uniform(0.1, 0.9, size=(*TINY_HW, 1)))


@pytest.fixture
def random_field(rng):
    """3x3 field of 16x16 single-channel views."""
    return LightField.from_array(rng.uniform(0.0, 1.0, size=(3, 3, 16, 16, 1)))


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Two rendered 8x8 scenes; returns the corpus directory."""
    out = tmp_path_factory.mktemp("corpus")
    make_dataset(n_scenes=2, hw=TINY_HW, angular=TINY_ANGULAR, seed=7, out_dir=out)
    return out


@pytest.fixture
def tiny_train_config(tiny_config):
    return TrainConfig(
        total_iters=4,
        stage1_iters=1,
        lr=1e-3,
        checkpoint_every=2,
        seed=3,
        net=tiny_config,
    )
