import numpy as np
import pytest

from betasplat.testing import random_camera, random_query, random_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scene():
    return random_scene(6, 5, seed=7)


@pytest.fixture
def small_camera():
    return random_camera(32, seed=8)


@pytest.fixture
def view_query():
    return random_query(6, seed=9)
