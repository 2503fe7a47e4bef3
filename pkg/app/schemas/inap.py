from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.config import settings
from app.schemas.scenario import ScenarioDocument


class InApPoint(BaseModel):
    """
    Expansion point of the inner approximation: beamformers (same layout as
    ``BeamformingSolution.beamformers``), SINR surrogates mu and
    interference-plus-noise slacks u.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    beamformers: list[np.ndarray]
    mu: np.ndarray
    u: np.ndarray


class CqpModel(BaseModel):
    """
    Linearization data at an expansion point. ``g[k]`` is (N, M_k) with row i
    equal to g_ik; ``A`` is (N, K+1).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    g: list[np.ndarray]
    A: np.ndarray
    w_tilde: np.ndarray
    mu: np.ndarray
    u: np.ndarray


class InApOptions(BaseModel):
    """Schema for inner-approximation options."""
    eps: float = Field(default=settings.INAP_EPS, gt=0)
    window: int = Field(default=settings.INAP_WINDOW, ge=1)
    max_iter: int = Field(default=settings.INAP_MAX_ITER, ge=1)
    seed: int = 0


class InApRequest(BaseModel):
    """Schema for an inner-approximation solve request."""
    scenario: ScenarioDocument
    options: InApOptions = Field(default_factory=InApOptions)
    cb_mask: bool = False
    initial: Optional[list[list[list[list[float]]]]] = None
