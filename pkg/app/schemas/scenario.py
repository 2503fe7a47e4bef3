from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.config import settings


class ScenarioConfig(BaseModel):
    """Schema for the parameters of a random network draw."""
    num_small_bs: int = Field(ge=0)
    num_users: int = Field(ge=1)
    antennas_macro: int = Field(default=settings.ANTENNAS_MACRO, ge=1)
    antennas_small: int = Field(default=settings.ANTENNAS_SMALL, ge=1)
    power_macro_dbm: float = settings.POWER_MACRO_DBM
    power_small_dbm: float = settings.POWER_SMALL_DBM
    noise_density_dbm_per_hz: float = settings.NOISE_DENSITY_DBM_PER_HZ
    bandwidth_hz: float = Field(default=settings.BANDWIDTH_HZ, gt=0)
    region_radius_m: float = Field(default=settings.SCENARIO_RADIUS_M, gt=0)
    small_bs_annulus_inner_m: float = Field(default=settings.SCENARIO_ANNULUS_INNER_M, ge=0)
    path_loss_exponent: float = Field(default=settings.PATH_LOSS_EXPONENT, gt=0)
    weights: Optional[list[float]] = None
    serving_mask: Optional[list[list[bool]]] = None
    rng_seed: int = 0


class NetworkScenario(BaseModel):
    """
    Realized network. ``channels[k]`` is an (N, M_k) complex array whose row i
    is h_ik; BS 0 is the macro BS at the origin.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    config: ScenarioConfig
    bs_positions: np.ndarray
    user_positions: np.ndarray
    distances: np.ndarray
    channels: list[np.ndarray]
    noise_power: np.ndarray
    powers: np.ndarray
    weights: np.ndarray
    serving_mask: Optional[np.ndarray] = None

    @property
    def num_bs(self) -> int:
        return len(self.channels)

    @property
    def num_users(self) -> int:
        return int(self.noise_power.shape[0])

    @property
    def antennas(self) -> list[int]:
        return [int(h.shape[1]) for h in self.channels]

    def serves(self, i: int, k: int) -> bool:
        return self.serving_mask is None or bool(self.serving_mask[i, k])


class BeamformingSolution(BaseModel):
    """``beamformers[k]`` is an (N, M_k) complex array whose row i is v_ik."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    beamformers: list[np.ndarray]
    solver: str = "manual"
    iterations: int = 0
    wall_time_s: float = 0.0
    metadata: dict[str, Any] = Field(default_factory=dict)


class ScenarioDocument(BaseModel):
    """Schema for the JSON form of a scenario; complex entries are [re, im] pairs."""
    config: ScenarioConfig
    bs_positions: list[list[float]]
    user_positions: list[list[float]]
    distances: list[list[float]]
    channels: list[list[list[list[float]]]]
    noise_power: list[float]
    powers: list[float]
    weights: list[float]
    serving_mask: Optional[list[list[bool]]] = None


class SolutionDocument(BaseModel):
    """Schema for the JSON form of a beamforming solution."""
    beamformers: list[list[list[list[float]]]]
    solver: str = "manual"
    iterations: int = 0
    wall_time_s: float = 0.0
    metadata: dict[str, Any] = Field(default_factory=dict)


class EvaluationRequest(BaseModel):
    """Schema for evaluating a solution against a scenario."""
    scenario: ScenarioDocument
    solution: SolutionDocument
    bits: bool = False


class EvaluationResponse(BaseModel):
    """Schema for per-user SINR/rate figures and the weighted sum rate."""
    sinr: list[float]
    rates: list[float]
    wsr: float
    bs_power: list[float]
    power_feasible: bool
    unit: str


class SolveResponse(BaseModel):
    """Schema for any solver response: solution, final WSR and trace rows."""
    solution: SolutionDocument
    wsr: float
    trace: list[dict[str, Any]]
