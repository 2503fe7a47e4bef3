from enum import IntEnum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.config import settings
from app.schemas.scenario import ScenarioDocument


class MessageType(IntEnum):
    """Message tags on the server-to-server channel (one byte on the wire)."""
    GLOBAL_PARTIAL_Q = 1
    GLOBAL_PARTIAL_Y = 2
    GLOBAL_Q = 3
    GLOBAL_Y = 4
    INTERFERENCE_U = 5
    SUM_A = 6
    STOP_FLAG = 7


INNER_MESSAGE_TYPES = frozenset(
    {MessageType.GLOBAL_PARTIAL_Q, MessageType.GLOBAL_PARTIAL_Y, MessageType.GLOBAL_Q, MessageType.GLOBAL_Y}
)
OUTER_MESSAGE_TYPES = frozenset({MessageType.INTERFERENCE_U, MessageType.SUM_A})

# STOP_FLAG payloads
CONTINUE, STOP_INNER, SHUTDOWN = 0.0, 1.0, 2.0


class Message(BaseModel):
    """
    One record between server 1 and server ``server`` (0-based, >= 1).
    Direction follows from the type.
    """
    model_config = ConfigDict(frozen=True)

    outer_iter: int = Field(ge=0)
    inner_iter: int = Field(ge=0)
    type: MessageType
    user: int = Field(ge=0)
    server: int = Field(ge=0)
    payload: tuple[float, ...]

    @field_validator("payload")
    @classmethod
    def check_payload(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if len(v) not in (1, 2):
            raise ValueError("payload carries one or two floats")
        return v


class MecAssignment(BaseModel):
    """Partition of BS indices over edge servers; ``servers[0]`` owns the macro BS."""
    servers: list[list[int]]

    @property
    def num_servers(self) -> int:
        return len(self.servers)


class AdmmOptions(BaseModel):
    """Schema for distributed solver options. ``max_inner`` None runs the inner stage to convergence."""
    eps_rel: float = Field(default=settings.ADMM_EPS_REL, gt=0)
    m0: float = Field(default=settings.ADMM_M0, gt=0)
    adaptive: bool = False
    tau: float = Field(default=settings.ADMM_TAU, gt=1)
    beta: float = Field(default=settings.ADMM_BETA, gt=1)
    freeze_after: int = Field(default=settings.ADMM_FREEZE_AFTER, ge=0)
    max_inner: Optional[int] = Field(default=None, ge=1)
    max_outer: int = Field(default=settings.ADMM_MAX_OUTER, ge=1)
    eps_ia: float = Field(default=settings.INAP_EPS, gt=0)
    outer_window: int = Field(default=settings.ADMM_OUTER_WINDOW, ge=1)
    seed: int = 0
    multiprocess: bool = False
    reference_wsr: Optional[float] = None

    def inner_done(self, j: int) -> bool:
        return self.max_inner is not None and j >= self.max_inner


class CoordinatorState(BaseModel):
    """
    Local block of server 1. Consensus arrays are (N, D-1); multipliers and
    globals are (N, D-1, 2) with the last axis ordered (q, y).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    beamformers: list[np.ndarray]
    mu: np.ndarray
    u: np.ndarray
    q_tilde: np.ndarray
    y_tilde: np.ndarray
    xi: np.ndarray
    phi: np.ndarray
    phi_prev: np.ndarray
    penalty: float
    g: list[np.ndarray] = Field(default_factory=list)
    A_total: Optional[np.ndarray] = None
    w_tilde: Optional[np.ndarray] = None

    @property
    def local_pi(self) -> np.ndarray:
        return np.stack([self.q_tilde, self.y_tilde], axis=-1)


class EdgeState(BaseModel):
    """Local block of server d >= 2. Globals and multipliers are (N, 2) ordered (q, y)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    server: int
    beamformers: list[np.ndarray]
    q_hat: np.ndarray
    y_hat: np.ndarray
    rho: np.ndarray
    phi: np.ndarray
    phi_prev: np.ndarray
    penalty: float
    u: Optional[np.ndarray] = None
    g: list[np.ndarray] = Field(default_factory=list)

    @property
    def local_pi(self) -> np.ndarray:
        return np.stack([self.q_hat, self.y_hat], axis=-1)


class AdmmIterate(BaseModel):
    """All local, global and multiplier blocks at one inner iteration."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    coordinator: CoordinatorState
    edges: list[EdgeState]
    outer_iter: int = 0
    inner_iter: int = 0

    @property
    def primal_residual(self) -> float:
        """Largest |pi - phi| over server 1's copies and every edge's local sums."""
        gaps = [np.abs(self.coordinator.local_pi - self.coordinator.phi).ravel()]
        gaps += [np.abs(e.local_pi - e.phi).ravel() for e in self.edges]
        return float(np.max(np.concatenate(gaps), initial=0.0))


class ResidualReport(BaseModel):
    """Per-server primal/dual residual norms with their relative tolerances."""
    server: int
    primal: float
    dual: float
    eps_pri: float
    eps_dua: float
    eps_rel: float

    @staticmethod
    def _ratio(norm: float, tol: float) -> float:
        if tol > 0:
            return norm / tol
        return 0.0 if norm == 0 else float("inf")

    @property
    def primal_ratio(self) -> float:
        return self._ratio(self.primal, self.eps_pri)

    @property
    def dual_ratio(self) -> float:
        return self._ratio(self.dual, self.eps_dua)

    @property
    def converged(self) -> bool:
        return self.primal <= self.eps_pri and self.dual <= self.eps_dua


class AdmmRequest(BaseModel):
    """Schema for a distributed solve request."""
    scenario: ScenarioDocument
    assignment: MecAssignment
    options: AdmmOptions = Field(default_factory=AdmmOptions)
