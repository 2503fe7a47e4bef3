from typing import Optional
from pydantic_settings import BaseSettings
from pydantic import field_validator


class Settings(BaseSettings):
    # Project Info
    PROJECT_NAME: str = "NCJT Beamforming"
    VERSION: str = "1.0.0"
    API_V1_STR: str = "/api/v1"
    ENVIRONMENT: str = "development"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_DIR: str = "logs"
    LOG_TO_FILE: bool = True

    # Conic solver
    CONIC_TOL: float = 1e-8
    CONIC_MAX_ITER: int = 200
    CONIC_STEP_FRACTION: float = 0.99
    CONIC_MAX_PSD_SIDE: int = 64
    CONIC_REGULARIZATION: float = 1e-11
    CONIC_REFINEMENT_STEPS: int = 2
    CONIC_RETRY_ATTEMPTS: int = 3
    CONIC_ACCEPT_TOL: float = 1e-6
    FEAS_TOL: float = 1e-7

    # Scenario defaults
    SCENARIO_RADIUS_M: float = 500.0
    SCENARIO_ANNULUS_INNER_M: float = 200.0
    PATH_LOSS_EXPONENT: float = 5.0
    NOISE_DENSITY_DBM_PER_HZ: float = -174.0
    BANDWIDTH_HZ: float = 1e6
    POWER_MACRO_DBM: float = 40.0
    POWER_SMALL_DBM: float = 30.0
    ANTENNAS_MACRO: int = 4
    ANTENNAS_SMALL: int = 2
    MIN_DISTANCE_M: float = 1.0

    # Branch-reduce-and-bound
    BRNB_EPS: float = 0.005
    BRNB_EPS_BI: float = 1e-3
    BRNB_MAX_ITER: int = 5000
    BRNB_RANK_TOL: float = 1e-6
    BRNB_CERTIFY_MARGIN: float = 1e-6
    BRNB_MARGIN_CAP: float = 1.0
    EXTRACTION_SINR_TOL: float = 1e-6

    # Inner approximation
    INAP_EPS: float = 1e-2
    INAP_WINDOW: int = 3
    INAP_MAX_ITER: int = 100
    INAP_MONOTONE_SLACK: float = 1e-6

    # Consensus ADMM
    ADMM_EPS_REL: float = 1e-3
    ADMM_M0: float = 1.0
    ADMM_TAU: float = 2.0
    ADMM_BETA: float = 5.0
    ADMM_FREEZE_AFTER: int = 50
    ADMM_MAX_OUTER: int = 50
    ADMM_OUTER_WINDOW: int = 1

    # Frank-Wolfe
    FW_EPS_G: float = 1.0
    FW_MAX_ITER: int = 1_000_000
    FW_OMEGA: float = 0.75
    FW_ADAPTIVE_ETA: float = 0.1
    FW_ADAPTIVE_TAU: float = 2.0

    # Experiment harness
    WORKERS: int = 1
    RESULTS_SCHEMA_VERSION: int = 1
    # Off: timing columns are written as 0 so reruns are byte-identical
    HARNESS_RECORD_TIMINGS: bool = True

    # CORS
    BACKEND_CORS_ORIGINS: list[str] = ["*"]

    # Rate Limiting
    RATE_LIMIT_PER_MINUTE: int = 60

    # OpenTelemetry
    ENABLE_OPENTELEMETRY: bool = False
    OTEL_EXPORTER_OTLP_ENDPOINT: Optional[str] = None

    # Sentry
    SENTRY_DSN: Optional[str] = None

    @field_validator("WORKERS")
    @classmethod
    def check_workers(cls, v: int) -> int:
        if v < 1:
            raise ValueError("WORKERS must be at least 1")
        return v

    @field_validator("CONIC_TOL", "FEAS_TOL", "BRNB_EPS", "BRNB_EPS_BI", "INAP_EPS", "ADMM_EPS_REL")
    @classmethod
    def check_positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("tolerances must be positive")
        return v

    class Config:
        case_sensitive = True
        env_file = ".env"


settings = Settings()
