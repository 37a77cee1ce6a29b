import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def model():
    from unsegment.segmodel import build_model

    return build_model(0, 3, 16)


@pytest.fixture(scope="session")
def scene():
    from unsegment.segmodel import generate_scene

    return generate_scene(7)
