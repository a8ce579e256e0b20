import numpy as np
import pytest

from resotrack import kernels
from resotrack.config import PlantConfig
from resotrack.plant import Plant


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # Compile the accelerated kernels once up front so per-test timing
    # (pacing and throughput checks) never includes compilation.
    kernels.warmup()


@pytest.fixture
def ideal_plant():
    return Plant(PlantConfig.ideal())


@pytest.fixture
def hardware_plant():
    return Plant(PlantConfig.hardware())


@pytest.fixture
def noisy_plant():
    return Plant(PlantConfig.ideal().with_thermal_snr(67.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
