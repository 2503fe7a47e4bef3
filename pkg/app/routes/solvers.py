import math
from typing import Any

from fastapi import APIRouter, HTTPException, Request, status
from loguru import logger
from starlette.concurrency import run_in_threadpool

from app.config import settings
from app.dependencies.limiter import limiter
from app.schemas.admm import AdmmRequest
from app.schemas.brnb import BrnbRequest
from app.schemas.fw import FwRequest
from app.schemas.inap import InApRequest
from app.schemas.scenario import BeamformingSolution, NetworkScenario, SolutionDocument, SolveResponse
from app.services.admm_service import admm_service
from app.services.brnb_service import brnb_service
from app.services.fw_service import fw_service
from app.services.inap_service import inap_service
from app.services.scenario_service import scenario_service

solver_router = APIRouter(prefix="/solvers", tags=["solvers"])

RATE_LIMIT = f"{settings.RATE_LIMIT_PER_MINUTE}/minute"


def json_safe(value: Any) -> Any:
    """Non-finite floats become null; JSON has no NaN or infinity."""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    return value


def _response(scenario: NetworkScenario, solution: BeamformingSolution, trace: list[dict]) -> SolveResponse:
    document = scenario_service.solution_to_document(solution)
    document = document.model_copy(update={"metadata": json_safe(document.metadata)})
    return SolveResponse(
        solution=document,
        wsr=scenario_service.weighted_sum_rate(scenario, solution),
        trace=json_safe(trace),
    )


async def _run(name: str, fn, *args):
    try:
        return await run_in_threadpool(fn, *args)
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    except Exception as e:
        logger.error(f"Error in {name} solve: {str(e)}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail=f"Failed to run {name}",
        )


@solver_router.post("/brnb", response_model=SolveResponse)
@limiter.limit(RATE_LIMIT)
async def solve_brnb(request: Request, body: BrnbRequest):
    """Global optimum within the requested relative gap."""
    scenario = scenario_service.from_document(body.scenario)
    solution, _, _, trace = await _run("brnb", brnb_service.brnb_solve, scenario, body.options)
    return _response(scenario, solution, trace)


@solver_router.post("/inap", response_model=SolveResponse)
@limiter.limit(RATE_LIMIT)
async def solve_inap(request: Request, body: InApRequest):
    """Inner approximation, optionally restricted to nearest-BS service."""
    scenario = scenario_service.from_document(body.scenario)
    if body.cb_mask:
        scenario = scenario_service.with_mask(scenario, scenario_service.nearest_bs_mask(scenario))
    start = None
    if body.initial is not None:
        try:
            start = scenario_service.solution_from_document(SolutionDocument(beamformers=body.initial), scenario)
        except ValueError as e:
            raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    solution, trace = await _run("inap", inap_service.inap_solve, scenario, body.options, start)
    return _response(scenario, solution, trace)


@solver_router.post("/admm", response_model=SolveResponse)
@limiter.limit(RATE_LIMIT)
async def solve_admm(request: Request, body: AdmmRequest):
    """Distributed solve over the given server assignment."""
    scenario = scenario_service.from_document(body.scenario)
    solution, trace, _ = await _run("admm", admm_service.admm_solve, scenario, body.assignment, body.options)
    return _response(scenario, solution, trace)


@solver_router.post("/fw", response_model=SolveResponse)
@limiter.limit(RATE_LIMIT)
async def solve_fw(request: Request, body: FwRequest):
    scenario = scenario_service.from_document(body.scenario)
    solution, trace = await _run("fw", fw_service.fw_solve, scenario, body.options)
    return _response(scenario, solution, trace)
