from fastapi import APIRouter, HTTPException, status
from loguru import logger
from starlette.concurrency import run_in_threadpool

from app.schemas.experiment import CdfRequest, CdfRow, CompareRequest
from app.services.experiment_service import experiment_service

experiment_router = APIRouter(prefix="/experiments", tags=["experiments"])


@experiment_router.post("/cdf", response_model=list[CdfRow])
async def empirical_cdf(request: CdfRequest):
    """Empirical CDF of one field over result records."""
    try:
        return experiment_service.cdf(request.records, request.field)
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))


@experiment_router.post("/compare")
async def compare_modes(request: CompareRequest):
    """Paired joint-transmission vs. nearest-BS WSRs per seed."""
    try:
        return await run_in_threadpool(
            experiment_service.compare_modes, request.config, request.seeds, request.options
        )
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    except Exception as e:
        logger.error(f"Error comparing modes: {str(e)}")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Failed to compare modes",
        )
