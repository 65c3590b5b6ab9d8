import random

import pytest
from hypothesis import HealthCheck, settings

from attestsim.world import Fixtures, World

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def fixtures() -> Fixtures:
    return Fixtures.default()


@pytest.fixture
def rng() -> random.Random:
    return random.Random(1234)


@pytest.fixture
def world(fixtures) -> World:
    return World(seed=42, fixtures=fixtures)


@pytest.fixture
def booted(world):
    """A world with device 1 booted on P+ and device 2 on P+."""
    return world, world.add_device(1), world.add_device(2)
