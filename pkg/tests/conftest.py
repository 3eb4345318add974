import numpy as np
import pytest
from hypothesis import settings

from qkspace.attnmodel import init_head
from qkspace.datagen import TaskConfig, build_maps

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def small_cfg():
    return TaskConfig(d=24, d_head=8, T=6, P=4, r1=2, r2=3, seed=3)


@pytest.fixture
def small_maps(small_cfg):
    return build_maps(small_cfg)


@pytest.fixture
def small_head(small_cfg):
    return init_head(small_cfg, np.random.default_rng(11))
