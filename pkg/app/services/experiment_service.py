"""
Experiment harness: seeded runs of every solver, CSV outputs, empirical CDFs
and the joint-transmission vs. nearest-BS comparison.
"""
import math
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import numpy as np
import pandas as pd
from loguru import logger
from scipy.stats import rankdata

from app.config import settings
from app.core.constants import (
    ADMM_TRACE_COLUMNS,
    BRNB_TRACE_COLUMNS,
    CDF_COLUMNS,
    COMPARE_COLUMNS,
    FW_TRACE_COLUMNS,
    INAP_TRACE_COLUMNS,
    RESULT_COLUMNS,
    WEIGHT_PRESETS,
)
from app.core.exceptions import ConfigurationError
from app.schemas.experiment import ExperimentSpec, ResultRecord, RunOutput
from app.schemas.inap import InApOptions
from app.schemas.scenario import BeamformingSolution, NetworkScenario, ScenarioConfig
from app.services.admm_service import admm_service
from app.services.brnb_service import brnb_service
from app.services.fw_service import fw_service
from app.services.inap_service import inap_service
from app.services.scenario_service import scenario_service

TRACE_COLUMNS = {
    "brnb": BRNB_TRACE_COLUMNS,
    "inap": INAP_TRACE_COLUMNS,
    "admm": ADMM_TRACE_COLUMNS,
    "fw": FW_TRACE_COLUMNS,
}


def preset_weights(name: str, num_users: int) -> list[float]:
    """``ones``, ``uniform`` (1/N) or one of the fixed vectors, which only fit their own N."""
    if name == "ones":
        return [1.0] * num_users
    if name == "uniform":
        return [1.0 / num_users] * num_users
    weights = WEIGHT_PRESETS.get(name)
    if weights is None:
        raise ConfigurationError(f"Unknown weight preset '{name}'")
    if len(weights) != num_users:
        raise ConfigurationError(f"Preset '{name}' has {len(weights)} weights, scenario has {num_users} users")
    return list(weights)


def write_csv(rows: Iterable[dict], columns: list[str], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows), columns=columns).to_csv(path, index=False, na_rep="NaN")


class ExperimentService:
    def scenario_for(self, spec: ExperimentSpec, index: int) -> NetworkScenario:
        seed = spec.seeds[index]
        if spec.scenario_files:
            scenario = scenario_service.load_scenario(spec.scenario_files[index])
            if spec.weights_preset:
                weights = np.asarray(preset_weights(spec.weights_preset, scenario.num_users))
                scenario = scenario.model_copy(update={"weights": weights})
        else:
            update: dict[str, Any] = {"rng_seed": seed}
            if spec.weights_preset:
                update["weights"] = preset_weights(spec.weights_preset, spec.config.num_users)
            scenario = scenario_service.generate_scenario(spec.config.model_copy(update=update))
        if spec.cb_mask:
            scenario = scenario_service.with_mask(scenario, scenario_service.nearest_bs_mask(scenario))
        return scenario

    def _run_algorithm(
        self, algorithm: str, scenario: NetworkScenario, spec: ExperimentSpec, seed: int, reference: Optional[float]
    ) -> tuple[BeamformingSolution, list[dict], float]:
        """Returns (solution, trace, gap); gap is nan where the algorithm has none."""
        if algorithm == "brnb":
            solution, lb, ub, trace = brnb_service.brnb_solve(scenario, spec.brnb.model_copy(update={"seed": seed}))
            return solution, trace, solution.metadata["gap"]
        if algorithm == "inap":
            solution, trace = inap_service.inap_solve(scenario, spec.inap.model_copy(update={"seed": seed}))
            return solution, trace, float("nan")
        if algorithm == "admm":
            assignment = admm_service.sector_assignment(scenario, spec.num_servers)
            options = spec.admm.model_copy(update={"seed": seed, "reference_wsr": reference or spec.admm.reference_wsr})
            solution, trace, _ = admm_service.admm_solve(scenario, assignment, options)
            gap = trace[-1]["rel_gap"] if trace else float("nan")
            return solution, trace, gap
        solution, trace = fw_service.fw_solve(scenario, spec.fw.model_copy(update={"seed": seed}))
        return solution, trace, solution.metadata["fw_gap"]

    def run_seed(self, spec: ExperimentSpec, index: int) -> list[RunOutput]:
        """
        Every requested algorithm on one seed. A failing run becomes a record
        with its error status and the rest of the seed still runs.
        """
        seed = spec.seeds[index]
        scenario = self.scenario_for(spec, index)
        outputs: list[RunOutput] = []
        lb_best: Optional[float] = None
        reference: Optional[float] = None
        for algorithm in spec.algorithms:
            record = ResultRecord(seed=seed, algorithm=algorithm, K=scenario.num_bs - 1, N=scenario.num_users)
            trace: list[dict] = []
            try:
                solution, trace, gap = self._run_algorithm(algorithm, scenario, spec, seed, reference)
                wsr = scenario_service.weighted_sum_rate(scenario, solution)
                record.wsr = wsr
                record.iterations = solution.iterations
                record.wall_time_s = solution.wall_time_s if settings.HARNESS_RECORD_TIMINGS else 0.0
                record.gap = gap
                if algorithm == "brnb":
                    lb_best = solution.metadata["lb_best"]
                    reference = lb_best
                elif algorithm == "inap":
                    if lb_best:
                        record.ratio = wsr / lb_best
                    reference = reference or wsr
            except Exception as e:
                logger.error(f"Error running {algorithm} on seed {seed}: {str(e)}")
                record.status = f"error: {type(e).__name__}: {e}"
            if not settings.HARNESS_RECORD_TIMINGS:
                trace = [{**row, "wallclock_ms": 0.0} if "wallclock_ms" in row else row for row in trace]
            outputs.append(RunOutput(record=record, trace=trace))
        return outputs

    def run_experiment(self, spec: ExperimentSpec, workers: Optional[int] = None) -> list[ResultRecord]:
        """
        Fan seeds out over the worker pool, then write ``results.csv`` and
        ``traces/{algorithm}_seed{seed}.csv`` under the output directory in
        seed order.
        """
        from app.worker.tasks import run_seeds

        workers = workers or settings.WORKERS
        logger.info(
            f"Solver: experiment with {len(spec.seeds)} seeds x {spec.algorithms} on {workers} worker(s)"
        )
        per_seed = run_seeds(spec, workers)
        out = Path(spec.output_dir)
        records = []
        for outputs in per_seed:
            for output in outputs:
                record = output.record
                records.append(record)
                write_csv(
                    output.trace,
                    TRACE_COLUMNS[record.algorithm],
                    out / "traces" / f"{record.algorithm}_seed{record.seed}.csv",
                )
        write_csv((r.model_dump() for r in records), RESULT_COLUMNS, out / "results.csv")
        failures = sum(1 for r in records if r.status != "ok")
        if failures:
            logger.warning(f"{failures} of {len(records)} runs failed; see the status column")
        return records

    def load_records(self, path: Union[str, Path]) -> list[dict]:
        return pd.read_csv(path).to_dict(orient="records")

    def cdf(self, records: Iterable[Union[dict, ResultRecord]], field: str) -> list[dict]:
        """
        Empirical CDF of ``field`` over the records, one row per finite value
        in ascending order. Tied values share their averaged rank.
        """
        values = []
        for r in records:
            row = r.model_dump() if isinstance(r, ResultRecord) else r
            if field not in row:
                raise ConfigurationError(f"Record has no field '{field}'")
            value = float(row[field])
            if math.isfinite(value):
                values.append(value)
        if not values:
            raise ConfigurationError(f"No finite '{field}' values to build a CDF from")
        values = np.sort(np.asarray(values))
        percentiles = rankdata(values, method="average") / len(values)
        return [{"value": float(v), "percentile": float(p)} for v, p in zip(values, percentiles)]

    def compare_modes(
        self, config: ScenarioConfig, seeds: list[int], options: Optional[InApOptions] = None
    ) -> list[dict]:
        """
        InAp with full joint transmission vs. each user served by its nearest
        BS, both from the same initial beamformers (masked entries zeroed).
        """
        options = options or InApOptions()
        rows = []
        for seed in seeds:
            scenario = scenario_service.generate_scenario(config.model_copy(update={"rng_seed": seed}))
            masked = scenario_service.with_mask(scenario, scenario_service.nearest_bs_mask(scenario))
            start = scenario_service.random_feasible_solution(scenario, np.random.default_rng(seed))
            masked_start = BeamformingSolution(
                beamformers=[v * masked.serving_mask[:, k][:, None] for k, v in enumerate(start.beamformers)]
            )
            seeded = options.model_copy(update={"seed": seed})
            ncjt, _ = inap_service.inap_solve(scenario, seeded, start=start)
            cb, _ = inap_service.inap_solve(masked, seeded, start=masked_start)
            wsr_ncjt = scenario_service.weighted_sum_rate(scenario, ncjt)
            wsr_cb = scenario_service.weighted_sum_rate(masked, cb)
            rows.append(
                {
                    "seed": seed,
                    "K": scenario.num_bs - 1,
                    "N": scenario.num_users,
                    "wsr_ncjt": wsr_ncjt,
                    "wsr_cb": wsr_cb,
                    "delta": wsr_ncjt - wsr_cb,
                }
            )
            logger.info(f"Seed {seed}: ncjt={wsr_ncjt:.4f} cb={wsr_cb:.4f}")
        return rows

    def write_cdf(self, rows: list[dict], path: Union[str, Path]) -> None:
        write_csv(rows, CDF_COLUMNS, path)

    def write_compare(self, rows: list[dict], path: Union[str, Path]) -> None:
        write_csv(rows, COMPARE_COLUMNS, path)


# Create a singleton instance
experiment_service = ExperimentService()
