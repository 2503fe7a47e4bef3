from fastapi import APIRouter
from app.routes.scenarios import scenario_router
from app.routes.solvers import solver_router
from app.routes.experiments import experiment_router

api_router = APIRouter()

# Scenario generation and evaluation
api_router.include_router(scenario_router)

# Solvers - rate limited, the heavy endpoints
api_router.include_router(solver_router)

# Experiment post-processing
api_router.include_router(experiment_router)
