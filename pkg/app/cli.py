"""
Command line entry point: ``ncjt <subcommand> ...``.

Exit codes: 0 on success, 2 for invalid input (bad config, malformed files,
inconsistent options), 1 for anything unexpected.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from loguru import logger

from app.config import settings
from app.core.constants import (
    ADMM_TRACE_COLUMNS,
    BRNB_TRACE_COLUMNS,
    FW_TRACE_COLUMNS,
    INAP_TRACE_COLUMNS,
    NATS_PER_BIT,
)
from app.core.exceptions import ConfigurationError, NcjtError
from app.schemas.admm import AdmmOptions
from app.schemas.brnb import BranchRule, BrnbOptions
from app.schemas.experiment import ALGORITHMS, ExperimentSpec
from app.schemas.fw import FwOptions, StepRule
from app.schemas.inap import InApOptions
from app.schemas.scenario import BeamformingSolution, NetworkScenario, ScenarioConfig, SolutionDocument


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"0-9"`` or ``"1,4,7"``."""
    try:
        if "-" in text and "," not in text:
            lo, hi = text.split("-", 1)
            return list(range(int(lo), int(hi) + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"Malformed seed list '{text}'")


def parse_weights(text: Optional[str], num_users: int) -> Optional[list[float]]:
    from app.services.experiment_service import preset_weights

    if text is None:
        return None
    if text in ("ones", "uniform", "w3", "w4"):
        return preset_weights(text, num_users)
    try:
        return [float(w) for w in text.split(",")]
    except ValueError:
        raise ConfigurationError(f"Weights must be a preset or comma-separated numbers, got '{text}'")


def _load(args) -> NetworkScenario:
    from app.services.scenario_service import scenario_service

    scenario = scenario_service.load_scenario(args.scenario)
    if getattr(args, "cb_mask", False):
        scenario = scenario_service.with_mask(scenario, scenario_service.nearest_bs_mask(scenario))
    return scenario


def _finish(args, scenario: NetworkScenario, solution: BeamformingSolution, trace: list[dict], columns: list[str]):
    from app.services.experiment_service import write_csv
    from app.services.scenario_service import scenario_service

    if args.trace:
        write_csv(trace, columns, args.trace)
    if args.out:
        scenario_service.save_solution(solution, args.out)
    scale = 1.0 / NATS_PER_BIT if args.bits else 1.0
    rates = scenario_service.user_rates(scenario, solution) * scale
    summary = {
        "solver": solution.solver,
        "wsr": float(scenario.weights @ rates),
        "rates": rates.tolist(),
        "unit": "bits/s/Hz" if args.bits else "nats/s/Hz",
        "iterations": solution.iterations,
        "power_feasible": scenario_service.check_power_feasible(scenario, solution),
    }
    print(json.dumps(summary))


def cmd_generate(args) -> None:
    from app.services.scenario_service import scenario_service

    config = ScenarioConfig(
        num_small_bs=args.K,
        num_users=args.N,
        antennas_macro=args.antennas_macro,
        antennas_small=args.antennas_small,
        weights=parse_weights(args.weights, args.N),
        rng_seed=args.seed,
    )
    scenario = scenario_service.generate_scenario(config)
    scenario_service.save_scenario(scenario, args.out)
    logger.info(f"Wrote scenario K={args.K} N={args.N} seed={args.seed} to {args.out}")


def cmd_solve_brnb(args) -> None:
    from app.services.brnb_service import brnb_service

    scenario = _load(args)
    options = BrnbOptions(
        eps=args.eps, eps_bi=args.eps_bi, rule=BranchRule(args.rule), max_iter=args.max_iter, seed=args.seed
    )
    solution, _, _, trace = brnb_service.brnb_solve(scenario, options)
    _finish(args, scenario, solution, trace, BRNB_TRACE_COLUMNS)


def cmd_solve_inap(args) -> None:
    from app.services.inap_service import inap_service

    scenario = _load(args)
    options = InApOptions(eps=args.eps_ia, window=args.window, max_iter=args.max_iter, seed=args.seed)
    solution, trace = inap_service.inap_solve(scenario, options)
    _finish(args, scenario, solution, trace, INAP_TRACE_COLUMNS)


def cmd_solve_admm(args) -> None:
    from app.services.admm_service import admm_service
    from app.services.scenario_service import scenario_service

    scenario = _load(args)
    if args.servers:
        assignment = admm_service.parse_assignment(args.servers)
    else:
        assignment = admm_service.sector_assignment(scenario, args.num_servers)
    reference = None
    if args.ref:
        document = SolutionDocument.model_validate(json.loads(Path(args.ref).read_text()))
        reference = scenario_service.weighted_sum_rate(
            scenario, scenario_service.solution_from_document(document, scenario)
        )
    options = AdmmOptions(
        eps_rel=args.eps_rel,
        m0=args.m0,
        adaptive=args.adaptive,
        max_inner=args.i_admm,
        max_outer=args.max_outer,
        eps_ia=args.eps_ia,
        seed=args.seed,
        multiprocess=args.multiprocess,
        reference_wsr=reference,
    )
    solution, trace, _ = admm_service.admm_solve(scenario, assignment, options)
    _finish(args, scenario, solution, trace, ADMM_TRACE_COLUMNS)


def cmd_solve_fw(args) -> None:
    from app.services.fw_service import fw_service

    scenario = _load(args)
    options = FwOptions(
        rule=StepRule(args.rule), omega=args.omega, eps_g=args.eps_g, max_iter=args.max_iter, seed=args.seed
    )
    solution, trace = fw_service.fw_solve(scenario, options)
    _finish(args, scenario, solution, trace, FW_TRACE_COLUMNS)


def cmd_experiment(args) -> None:
    from app.services.experiment_service import experiment_service

    if args.spec:
        spec = ExperimentSpec.model_validate(json.loads(Path(args.spec).read_text()))
    else:
        if args.K is None or args.N is None:
            raise ConfigurationError("experiment needs --spec or both --K and --N")
        spec = ExperimentSpec(
            config=ScenarioConfig(num_small_bs=args.K, num_users=args.N),
            seeds=parse_seeds(args.seeds),
            algorithms=args.algorithms.split(","),
            output_dir=args.out_dir,
            weights_preset=args.weights,
            cb_mask=args.cb_mask,
            num_servers=args.num_servers,
        )
    records = experiment_service.run_experiment(spec, workers=args.workers)
    failed = sum(1 for r in records if r.status != "ok")
    print(json.dumps({"records": len(records), "failed": failed, "output_dir": spec.output_dir}))


def cmd_cdf(args) -> None:
    from app.services.experiment_service import experiment_service

    rows = experiment_service.cdf(experiment_service.load_records(args.results), args.field)
    experiment_service.write_cdf(rows, args.out)
    logger.info(f"Wrote {len(rows)} CDF rows of '{args.field}' to {args.out}")


def cmd_compare(args) -> None:
    from app.services.experiment_service import experiment_service

    config = ScenarioConfig(num_small_bs=args.K, num_users=args.N, weights=parse_weights(args.weights, args.N))
    options = InApOptions(eps=args.eps_ia, max_iter=args.max_iter)
    rows = experiment_service.compare_modes(config, parse_seeds(args.seeds), options)
    experiment_service.write_compare(rows, args.out)
    logger.info(f"Wrote {len(rows)} paired rows to {args.out}")


def _solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", required=True, help="scenario document (JSON)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", help="trace CSV path")
    p.add_argument("--out", help="solution document path")
    p.add_argument("--bits", action="store_true", help="report rates in bits/s/Hz")
    p.add_argument("--cb-mask", action="store_true", help="serve each user from its nearest BS only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncjt", description="WSR beamforming for noncoherent joint transmission")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="draw a random scenario")
    p.add_argument("--K", type=int, required=True, help="number of small BSs")
    p.add_argument("--N", type=int, required=True, help="number of users")
    p.add_argument("--antennas-macro", type=int, default=settings.ANTENNAS_MACRO)
    p.add_argument("--antennas-small", type=int, default=settings.ANTENNAS_SMALL)
    p.add_argument("--weights", help="ones | uniform | w3 | w4 | comma-separated values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("solve-brnb", help="global optimum by branch-reduce-and-bound")
    _solver_flags(p)
    p.add_argument("--eps", type=float, default=settings.BRNB_EPS)
    p.add_argument("--eps-bi", type=float, default=settings.BRNB_EPS_BI)
    p.add_argument("--rule", choices=[r.value for r in BranchRule], default=BranchRule.WEIGHTED.value)
    p.add_argument("--max-iter", type=int, default=settings.BRNB_MAX_ITER)
    p.set_defaults(func=cmd_solve_brnb)

    p = sub.add_parser("solve-inap", help="inner approximation")
    _solver_flags(p)
    p.add_argument("--eps-ia", type=float, default=settings.INAP_EPS)
    p.add_argument("--window", type=int, default=settings.INAP_WINDOW)
    p.add_argument("--max-iter", type=int, default=settings.INAP_MAX_ITER)
    p.set_defaults(func=cmd_solve_inap)

    p = sub.add_parser("solve-admm", help="distributed inner approximation over edge servers")
    _solver_flags(p)
    p.add_argument("--servers", help="BS indices per server, e.g. '0,1;2,3;4'")
    p.add_argument("--num-servers", type=int, default=2, help="sector split when --servers is absent")
    p.add_argument("--m0", type=float, default=settings.ADMM_M0)
    p.add_argument("--adaptive", action="store_true")
    p.add_argument("--i-admm", type=int, help="inner iteration cap (default: run to convergence)")
    p.add_argument("--eps-rel", type=float, default=settings.ADMM_EPS_REL)
    p.add_argument("--eps-ia", type=float, default=settings.INAP_EPS)
    p.add_argument("--max-outer", type=int, default=settings.ADMM_MAX_OUTER)
    p.add_argument("--ref", help="centralized solution document for the relative gap")
    p.add_argument("--multiprocess", action="store_true", help="one OS process per edge server")
    p.set_defaults(func=cmd_solve_admm)

    p = sub.add_parser("solve-fw", help="Frank-Wolfe baseline")
    _solver_flags(p)
    p.add_argument("--rule", choices=[r.value for r in StepRule], default=StepRule.DIMINISHING.value)
    p.add_argument("--omega", type=float, default=settings.FW_OMEGA)
    p.add_argument("--eps-g", type=float, default=settings.FW_EPS_G)
    p.add_argument("--max-iter", type=int, default=settings.FW_MAX_ITER)
    p.set_defaults(func=cmd_solve_fw)

    p = sub.add_parser("experiment", help="seeded runs with results.csv and per-run traces")
    p.add_argument("--spec", help="experiment spec (JSON); overrides the flags below")
    p.add_argument("--K", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--seeds", default="0")
    p.add_argument("--algorithms", default="inap", help=f"comma-separated subset of {','.join(ALGORITHMS)}")
    p.add_argument("--out-dir", default="results")
    p.add_argument("--weights", help="ones | uniform | w3 | w4")
    p.add_argument("--cb-mask", action="store_true")
    p.add_argument("--num-servers", type=int, default=2)
    p.add_argument("--workers", type=int, default=settings.WORKERS)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("cdf", help="empirical CDF of a results column")
    p.add_argument("--results", required=True)
    p.add_argument("--field", default="wsr")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cdf)

    p = sub.add_parser("compare", help="joint transmission vs. nearest-BS service")
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--seeds", default="0-9")
    p.add_argument("--weights", help="ones | uniform | w3 | w4")
    p.add_argument("--eps-ia", type=float, default=settings.INAP_EPS)
    p.add_argument("--max-iter", type=int, default=settings.INAP_MAX_ITER)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    import app.logging_config  # noqa: F401  (installs the sinks)

    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (NcjtError, ValueError) as e:
        logger.error(f"{args.command}: {str(e)}")
        return 2
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {str(e)}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
