from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.config import settings
from app.schemas.scenario import ScenarioDocument


class StepRule(str, Enum):
    DIMINISHING = "diminishing"
    ADAPTIVE = "adaptive"


class RealifiedProblem(BaseModel):
    """
    WSR objective over the stacked real vector ``x = [Re v; Im v]``, with v
    ordered BS-major, user-minor, antenna-innermost. ``offsets[k]`` is the
    start of BS k in the complex vector; its real slice is
    ``[offsets[k], offsets[k+1])`` and its imaginary slice is the same range
    shifted by ``size``.

    The quadratic forms are never materialized: ``x^T H_i x`` is user i's total
    received power and ``x^T G_i x`` its interference, both computed from the
    channels.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    channels: list[np.ndarray]
    noise_power: np.ndarray
    weights: np.ndarray
    powers: np.ndarray
    serving_mask: np.ndarray
    offsets: list[int]
    rho_l: float = 0.0

    @property
    def num_users(self) -> int:
        return len(self.weights)

    @property
    def size(self) -> int:
        return self.offsets[-1]

    def bs_slices(self, k: int) -> tuple[slice, slice]:
        lo, hi = self.offsets[k], self.offsets[k + 1]
        return slice(lo, hi), slice(self.size + lo, self.size + hi)


class FwOptions(BaseModel):
    """Schema for Frank-Wolfe options. ``eta`` and ``tau`` drive the adaptive rule's curvature estimate."""
    rule: StepRule = StepRule.DIMINISHING
    omega: float = Field(default=settings.FW_OMEGA, gt=0.5, le=1.0)
    eps_g: float = Field(default=settings.FW_EPS_G, gt=0)
    max_iter: int = Field(default=settings.FW_MAX_ITER, ge=1)
    eta: float = Field(default=settings.FW_ADAPTIVE_ETA, gt=0, le=1)
    tau: float = Field(default=settings.FW_ADAPTIVE_TAU, gt=1)
    seed: int = 0


class FwRequest(BaseModel):
    """Schema for a Frank-Wolfe solve request."""
    scenario: ScenarioDocument
    options: FwOptions = Field(default_factory=FwOptions)
