from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class ConeKind(str, Enum):
    """Cone tags for the blocks of a conic program."""
    ZERO = "zero"
    NONNEGATIVE = "nonnegative"
    SECOND_ORDER = "second_order"
    PSD = "psd"


class ConicStatus(str, Enum):
    """Termination status reported by the interior-point solver."""
    OPTIMAL = "optimal"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"
    ITERATION_LIMIT = "iteration_limit"
    NUMERICAL_ERROR = "numerical_error"


class ConeBlock(BaseModel):
    """Schema for one cone block; ``dim`` counts entries (svec length for PSD)."""
    kind: ConeKind
    dim: int = Field(ge=0)
    side: Optional[int] = None


class ConicProgram(BaseModel):
    """Standard form: minimize c^T x subject to A x = b, x in the product cone."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    cones: list[ConeBlock]
    names: dict[str, tuple[int, int]] = Field(default_factory=dict)

    @property
    def num_vars(self) -> int:
        return int(self.c.shape[0])

    @property
    def num_rows(self) -> int:
        return int(self.b.shape[0])

    def value(self, x: np.ndarray, name: str) -> np.ndarray:
        """Slice of a primal vector belonging to a named variable block."""
        start, size = self.names[name]
        return x[start:start + size]


class ConicSolution(BaseModel):
    """Schema for a solver result with its certificate residuals."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    status: ConicStatus
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    primal_objective: float
    dual_objective: float
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int

    def usable(self, accept_tol: float) -> bool:
        """Optimal, or an iteration-limited iterate whose residuals are all below ``accept_tol``."""
        if self.status == ConicStatus.OPTIMAL:
            return True
        if self.status == ConicStatus.ITERATION_LIMIT:
            return max(self.primal_residual, self.dual_residual, self.gap) <= accept_tol
        return False


class Phase1Result(BaseModel):
    """Schema for a single-shift feasibility verdict; ``margin`` is the interior depth of ``x``."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    feasible: bool
    slack: float
    margin: float = 0.0
    status: ConicStatus
    x: Optional[np.ndarray] = None
