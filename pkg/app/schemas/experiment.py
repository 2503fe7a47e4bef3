from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from app.config import settings
from app.schemas.admm import AdmmOptions
from app.schemas.brnb import BrnbOptions
from app.schemas.fw import FwOptions
from app.schemas.inap import InApOptions
from app.schemas.scenario import ScenarioConfig

ALGORITHMS = ("brnb", "inap", "admm", "fw")
WEIGHT_PRESET_NAMES = ("ones", "uniform", "w3", "w4")


class ExperimentSpec(BaseModel):
    """
    One experiment: a scenario template (re-seeded per run) or a list of
    scenario files paired with ``seeds``, the algorithms to run on each, and
    where to write results.
    """
    config: Optional[ScenarioConfig] = None
    scenario_files: list[str] = Field(default_factory=list)
    seeds: list[int]
    algorithms: list[str] = Field(default_factory=lambda: ["inap"])
    output_dir: str = "results"
    weights_preset: Optional[str] = None
    cb_mask: bool = False
    num_servers: int = Field(default=2, ge=1)
    brnb: BrnbOptions = Field(default_factory=BrnbOptions)
    inap: InApOptions = Field(default_factory=InApOptions)
    admm: AdmmOptions = Field(default_factory=AdmmOptions)
    fw: FwOptions = Field(default_factory=FwOptions)

    @field_validator("seeds")
    @classmethod
    def check_seeds(cls, v: list[int]) -> list[int]:
        if not v:
            raise ValueError("at least one seed is required")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v

    @field_validator("algorithms")
    @classmethod
    def check_algorithms(cls, v: list[str]) -> list[str]:
        unknown = [a for a in v if a not in ALGORITHMS]
        if unknown or not v:
            raise ValueError(f"algorithms must be a non-empty subset of {ALGORITHMS}, got {v}")
        # Fixed run order so paired references exist when admm runs
        return [a for a in ALGORITHMS if a in v]

    @field_validator("weights_preset")
    @classmethod
    def check_preset(cls, v: Optional[str]) -> Optional[str]:
        if v is not None and v not in WEIGHT_PRESET_NAMES:
            raise ValueError(f"weights_preset must be one of {WEIGHT_PRESET_NAMES}")
        return v

    @model_validator(mode="after")
    def check_sources(self) -> "ExperimentSpec":
        if self.config is None and not self.scenario_files:
            raise ValueError("either config or scenario_files is required")
        if self.scenario_files:
            if len(self.scenario_files) != len(self.seeds):
                raise ValueError("scenario_files and seeds must pair up one to one")
            missing = [f for f in self.scenario_files if not Path(f).is_file()]
            if missing:
                raise ValueError(f"scenario files not found: {missing}")
        return self


class ResultRecord(BaseModel):
    """One row of results.csv."""
    schema_version: int = settings.RESULTS_SCHEMA_VERSION
    seed: int
    algorithm: str
    K: int
    N: int
    wsr: float = float("nan")
    iterations: int = 0
    wall_time_s: float = 0.0
    gap: float = float("nan")
    ratio: float = float("nan")
    status: str = "ok"


class RunOutput(BaseModel):
    """Everything one (seed, algorithm) job hands back to the merger."""
    record: ResultRecord
    trace: list[dict[str, Any]] = Field(default_factory=list)


class CdfRequest(BaseModel):
    """Schema for an empirical CDF request."""
    records: list[dict[str, Any]]
    field: str = "wsr"


class CdfRow(BaseModel):
    value: float
    percentile: float


class CompareRequest(BaseModel):
    """Schema for a coordinated-beamforming vs. joint-transmission comparison."""
    config: ScenarioConfig
    seeds: list[int]
    options: InApOptions = Field(default_factory=InApOptions)
