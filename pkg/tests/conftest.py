import pytest
from hypothesis import settings

from rglab.kernels import FieldDimension, build_mollifier, bump_profile

settings.register_profile("desk", deadline=None, max_examples=25)
settings.load_profile("desk")

RESOLUTION = 1.0 / 256.0


@pytest.fixture(scope="session")
def mollifiers():
    """One mollifier per spatial dimension, shared across the whole run."""
    return {d: build_mollifier(bump_profile, RESOLUTION, d=d) for d in (1, 2, 3)}


@pytest.fixture(scope="session")
def u1(mollifiers):
    return mollifiers[1]


@pytest.fixture(scope="session")
def u2(mollifiers):
    return mollifiers[2]


@pytest.fixture(scope="session")
def u3(mollifiers):
    return mollifiers[3]


@pytest.fixture(scope="session")
def dim1_half():
    return FieldDimension(1, 0.5)


@pytest.fixture(scope="session")
def dim3_half():
    return FieldDimension(3, 0.5)


@pytest.fixture(scope="session")
def dim_eps():
    return FieldDimension.epsilon_model(0.1)
