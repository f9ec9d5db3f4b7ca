"""Shared fixtures and hypothesis strategies"""

import numpy as np
import pytest
from hypothesis import strategies as st

from geom import BBox
from scene import FeatureConfig, FeatureMap, ProposalConfig, SceneGenConfig, TeacherOracleConfig, make_split


@st.composite
def boxes(draw, max_coord: float = 100.0, min_size: float = 0.5, max_size: float = 50.0):
    x1 = draw(st.floats(0.0, max_coord, allow_nan=False))
    y1 = draw(st.floats(0.0, max_coord, allow_nan=False))
    w = draw(st.floats(min_size, max_size, allow_nan=False))
    h = draw(st.floats(min_size, max_size, allow_nan=False))
    return BBox(x1, y1, x1 + w, y1 + h)


def random_box(rng: np.random.Generator, max_coord: float = 60.0, min_size: float = 2.0, max_size: float = 30.0) -> BBox:
    x1, y1 = rng.uniform(0.0, max_coord, size=2)
    w, h = rng.uniform(min_size, max_size, size=2)
    return BBox(float(x1), float(y1), float(x1 + w), float(y1 + h))


@pytest.fixture
def np_rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_scene_config() -> SceneGenConfig:
    return SceneGenConfig(width=48, height=48, num_classes=4, max_objects=2, min_object_size=12.0, max_object_size=24.0)


@pytest.fixture
def feature_config() -> FeatureConfig:
    return FeatureConfig()


@pytest.fixture
def proposal_config() -> ProposalConfig:
    return ProposalConfig()


@pytest.fixture
def small_split(small_scene_config):
    return make_split(4, 6, small_scene_config, TeacherOracleConfig(), seed=7)


def constant_map(value: float, channels: int = 3, height: int = 16, width: int = 16) -> FeatureMap:
    return FeatureMap(np.full((channels, height, width), value, dtype=np.float64))


def ramp_map(a: float, b: float, c: float, height: int = 32, width: int = 32) -> FeatureMap:
    """Single channel f(x, y) = a*x + b*y + c sampled at integer points"""
    ys, xs = np.mgrid[0:height, 0:width]
    return FeatureMap((a * xs + b * ys + c)[None, :, :].astype(np.float64))
