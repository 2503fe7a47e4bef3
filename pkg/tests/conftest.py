import numpy as np
import pytest
from httpx import ASGITransport, AsyncClient
from typing import AsyncGenerator

from app.main import app
from app.schemas.scenario import NetworkScenario, ScenarioConfig
from app.services.scenario_service import scenario_service


@pytest.fixture
async def async_client() -> AsyncGenerator[AsyncClient, None]:
    """Create an HTTP client for making test requests."""
    async with AsyncClient(transport=ASGITransport(app=app), base_url="http://test") as client:
        yield client


@pytest.fixture
def small_config() -> ScenarioConfig:
    """Desk-scale config: macro BS with 2 antennas, 2 single-antenna small BSs, 2 users."""
    return ScenarioConfig(num_small_bs=2, num_users=2, antennas_macro=2, antennas_small=1, rng_seed=7)


@pytest.fixture
def small_scenario(small_config: ScenarioConfig) -> NetworkScenario:
    """A seeded random scenario from the geometric channel model."""
    return scenario_service.generate_scenario(small_config)


@pytest.fixture
def single_user_scenario() -> NetworkScenario:
    """One single-antenna BS and one user: h = 1, P = 1, noise 1."""
    return scenario_service.build_scenario(channels=[np.array([[1.0 + 0.0j]])], powers=[1.0], noise_power=1.0)


@pytest.fixture
def scalar_two_user_scenario() -> NetworkScenario:
    """One single-antenna BS serving two users with unequal gains."""
    return scenario_service.build_scenario(
        channels=[np.array([[1.0 + 0.0j], [0.6 + 0.3j]])],
        powers=[4.0],
        noise_power=1.0,
        weights=[1.0, 1.0],
    )


@pytest.fixture
def toy_scenario() -> NetworkScenario:
    """Two BSs (2 and 1 antennas) and two users with well-conditioned channels."""
    rng = np.random.default_rng(11)
    channels = [
        (rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))) / np.sqrt(2.0),
        (rng.standard_normal((2, 1)) + 1j * rng.standard_normal((2, 1))) / np.sqrt(2.0),
    ]
    return scenario_service.build_scenario(
        channels=channels, powers=[2.0, 1.0], noise_power=[0.5, 0.5], weights=[0.6, 0.4]
    )


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for randomized property checks."""
    return np.random.default_rng(2024)
