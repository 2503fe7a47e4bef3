"""Seed fan-out for the experiment harness."""
from functools import partial
from multiprocessing import get_context

from loguru import logger

from app.schemas.experiment import ExperimentSpec, RunOutput


def run_seed_job(spec: ExperimentSpec, index: int) -> list[RunOutput]:
    from app.services.experiment_service import experiment_service

    logger.debug(f"Worker starting seed {spec.seeds[index]}")
    return experiment_service.run_seed(spec, index)


def run_seeds(spec: ExperimentSpec, workers: int) -> list[list[RunOutput]]:
    """One job per seed; results come back in seed order whatever the pool size."""
    indices = list(range(len(spec.seeds)))
    job = partial(run_seed_job, spec)
    # Distributed runs spawn their own edge processes, which daemonic pool workers cannot do
    if workers <= 1 or len(indices) == 1 or ("admm" in spec.algorithms and spec.admm.multiprocess):
        return [job(i) for i in indices]
    with get_context("spawn").Pool(processes=min(workers, len(indices))) as pool:
        return pool.map(job, indices)
