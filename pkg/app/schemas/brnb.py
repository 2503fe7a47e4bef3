import heapq
import itertools
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.config import settings
from app.schemas.scenario import BeamformingSolution, ScenarioDocument


class BranchRule(str, Enum):
    """Edge selection rule used when a rate box is split in two."""
    LONGEST = "longest"
    WEIGHTED = "weighted"


class RateBox(BaseModel):
    """Box [lower, upper] of rate vectors with its cached upper bound."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    lower: np.ndarray
    upper: np.ndarray
    ub: float

    @property
    def edges(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.edges))


class BrnbState(BaseModel):
    """
    Box queue and incumbent; ``start`` holds the beamformer behind an
    unchanged initial incumbent. The queue is a max-heap on ``ub`` (stored as
    ``(-ub, insertion_index, box)``) so ties resolve to the earliest insertion.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    weights: np.ndarray
    r_best: np.ndarray
    lb_best: float
    UB: float = float("inf")
    eps: float = settings.BRNB_EPS
    eps_bi: float = settings.BRNB_EPS_BI
    iteration: int = 0
    sdr_solves: int = 0
    start: Optional[BeamformingSolution] = None
    queue: list = Field(default_factory=list)
    counter: itertools.count = Field(default_factory=itertools.count)

    def objective(self, r: np.ndarray) -> float:
        return float(self.weights @ r)

    def push(self, box: RateBox) -> bool:
        """Insert a box unless its bound already falls below the incumbent."""
        if box.ub < self.lb_best:
            return False
        heapq.heappush(self.queue, (-box.ub, next(self.counter), box))
        return True

    def pop(self) -> RateBox:
        return heapq.heappop(self.queue)[2]

    def discard_dominated(self) -> None:
        """Drop boxes whose bound fell below an improved incumbent."""
        self.queue = [entry for entry in self.queue if entry[2].ub >= self.lb_best]
        heapq.heapify(self.queue)

    @property
    def open_boxes(self) -> int:
        return len(self.queue)

    def refresh_upper_bound(self) -> float:
        top = -self.queue[0][0] if self.queue else -np.inf
        self.UB = float(max(top, self.lb_best))
        return self.UB

    @property
    def gap(self) -> float:
        if self.lb_best > 0:
            return (self.UB - self.lb_best) / self.lb_best
        return self.UB - self.lb_best


class BoundOutcome(BaseModel):
    """Result of bounding one reduced box."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    box: Optional[RateBox]
    delta_low: float = 0.0
    delta_up: float = 0.0
    feasible_point: Optional[np.ndarray] = None
    uncertain: bool = False


class BrnbOptions(BaseModel):
    """Schema for branch-reduce-and-bound options."""
    eps: float = Field(default=settings.BRNB_EPS, gt=0)
    eps_bi: float = Field(default=settings.BRNB_EPS_BI, gt=0)
    rule: BranchRule = BranchRule.WEIGHTED
    max_iter: int = Field(default=settings.BRNB_MAX_ITER, ge=1)
    seed: int = 0


class BrnbRequest(BaseModel):
    """Schema for a global-optimum solve request."""
    scenario: ScenarioDocument
    options: BrnbOptions = Field(default_factory=BrnbOptions)

