from fastapi import APIRouter, HTTPException, status
from loguru import logger
from starlette.concurrency import run_in_threadpool

from app.core.constants import NATS_PER_BIT
from app.schemas.scenario import (
    EvaluationRequest,
    EvaluationResponse,
    ScenarioConfig,
    ScenarioDocument,
)
from app.services.scenario_service import scenario_service

scenario_router = APIRouter(prefix="/scenarios", tags=["scenarios"])


@scenario_router.post("/generate", response_model=ScenarioDocument)
async def generate_scenario(config: ScenarioConfig):
    """Draw a scenario from its config; the same config always yields the same document."""
    try:
        scenario = await run_in_threadpool(scenario_service.generate_scenario, config)
        return scenario_service.to_document(scenario)
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    except Exception as e:
        logger.error(f"Error generating scenario: {str(e)}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Failed to generate scenario",
        )


@scenario_router.post("/evaluate", response_model=EvaluationResponse)
async def evaluate_solution(request: EvaluationRequest):
    """Per-user SINR and rates, WSR and per-BS power of a solution."""
    try:
        scenario = scenario_service.from_document(request.scenario)
        solution = scenario_service.solution_from_document(request.solution, scenario)
        scale = 1.0 / NATS_PER_BIT if request.bits else 1.0
        rates = scenario_service.user_rates(scenario, solution) * scale
        return EvaluationResponse(
            sinr=scenario_service.sinr_all(scenario, solution).tolist(),
            rates=rates.tolist(),
            wsr=float(scenario.weights @ rates),
            bs_power=scenario_service.bs_power(solution).tolist(),
            power_feasible=scenario_service.check_power_feasible(scenario, solution),
            unit="bits/s/Hz" if request.bits else "nats/s/Hz",
        )
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    except Exception as e:
        logger.error(f"Error evaluating solution: {str(e)}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Failed to evaluate solution",
        )


@scenario_router.post("/rate-bounds")
async def rate_bounds(document: ScenarioDocument):
    """Interference-free per-user rate bounds in nats."""
    try:
        scenario = scenario_service.from_document(document)
        return {"upper_bounds": scenario_service.rate_upper_bounds(scenario).tolist()}
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
