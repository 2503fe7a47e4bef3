"""
Inner approximation: one conic-quadratic program per iteration.

At the expansion point (v, mu, u) every user's desired power over its slack,
``sum_k |h_ik v_ik|^2 / u_i``, is replaced by its first-order lower bound
``sum_k Re{g_ik v_ik} - A_ik u_i`` and ``log(1 + mu)`` by the tangent bound

    log(1 + mu) >= log(1 + mu_t) + 2 - 2 sqrt((1 + mu_t) / (1 + mu)),

which turns the rate objective into ``minimize sum_i w_i sqrt(1 + mu_t,i) pi_i``
with ``pi_i delta_i >= 1`` and ``delta_i^2 <= 1 + mu_i``.

The building blocks below are shared with the distributed solver.
"""
import time
from typing import Iterable, Optional

import numpy as np
from loguru import logger
from opentelemetry.trace import get_tracer

from app.config import settings
from app.core.conic import Affine, ConicProgramBuilder, VarBlock, solve_with_retry
from app.core.linalg import realify_row
from app.schemas.conic import ConicProgram, ConicSolution, ConicStatus
from app.schemas.inap import CqpModel, InApOptions, InApPoint
from app.schemas.scenario import BeamformingSolution, NetworkScenario
from app.services.scenario_service import scenario_service

tracer = get_tracer(__name__)


def log_lower_bound(mu: np.ndarray, mu_t: np.ndarray) -> np.ndarray:
    """Tangent lower bound of log(1 + mu) at mu_t."""
    mu, mu_t = np.asarray(mu, dtype=float), np.asarray(mu_t, dtype=float)
    return np.log1p(mu_t) + 2.0 - 2.0 * np.sqrt((1.0 + mu_t) / (1.0 + mu))


def beamformer_name(i: int, k: int) -> str:
    return f"v_{i}_{k}"


def add_beamformer_blocks(
    builder: ConicProgramBuilder, scenario: NetworkScenario, bs_set: Iterable[int]
) -> dict[tuple[int, int], VarBlock]:
    """Free realified blocks ``[Re v_ik; Im v_ik]`` for every served (user, BS) pair."""
    blocks = {}
    for k in bs_set:
        for i in range(scenario.num_users):
            if scenario.serves(i, k):
                blocks[i, k] = builder.add_free(beamformer_name(i, k), 2 * scenario.antennas[k])
    return blocks


def desired_surrogate(g: list[np.ndarray], blocks: dict[tuple[int, int], VarBlock], i: int) -> Affine:
    """sum_k Re{g_ik v_ik} over the BSs present in ``blocks``."""
    expr = Affine()
    for (j, k), blk in blocks.items():
        if j == i:
            expr = expr + blk.dot(realify_row(g[k][i])[0])
    return expr


def interference_terms(
    scenario: NetworkScenario, blocks: dict[tuple[int, int], VarBlock], i: int
) -> list[Affine]:
    """Re and Im of h_ik v_jk for every j != i over the BSs present in ``blocks``."""
    terms = []
    for (j, k), blk in blocks.items():
        if j == i:
            continue
        re, im = realify_row(scenario.channels[k][i])
        terms += [blk.dot(re), blk.dot(im)]
    return terms


def add_power_constraints(
    builder: ConicProgramBuilder,
    scenario: NetworkScenario,
    blocks: dict[tuple[int, int], VarBlock],
    bs_set: Iterable[int],
) -> None:
    """||v_k||^2 <= P_k as one second-order cone per BS."""
    for k in bs_set:
        entries = []
        for (i, kk), blk in blocks.items():
            if kk == k:
                entries += [blk[p] for p in range(blk.size)]
        if entries:
            builder.add_soc([Affine.constant(np.sqrt(scenario.powers[k])), *entries])


def add_log_bound_cones(builder: ConicProgramBuilder, num_users: int) -> tuple[VarBlock, VarBlock, VarBlock]:
    """mu >= 0, pi delta >= 1, delta^2 <= 1 + mu, delta >= 1."""
    mu = builder.add_nonnegative("mu", num_users)
    delta = builder.add_free("delta", num_users)
    pi = builder.add_free("pi", num_users)
    for i in range(num_users):
        builder.add_soc([pi[i] + delta[i], Affine.constant(2.0), pi[i] - delta[i]])
        builder.add_rotated_soc([delta[i]], 1.0 + mu[i], Affine.constant(1.0))
    builder.add_nonneg([delta[i] - 1.0 for i in range(num_users)], name="delta_floor")
    return mu, delta, pi


def read_beamformers(
    program: ConicProgram, x: np.ndarray, scenario: NetworkScenario, into: list[np.ndarray], bs_set: Iterable[int]
) -> None:
    for k in bs_set:
        M = scenario.antennas[k]
        for i in range(scenario.num_users):
            name = beamformer_name(i, k)
            if name in program.names:
                vec = program.value(x, name)
                into[k][i] = vec[:M] + 1j * vec[M:]


class InApService:
    def initial_point(
        self, scenario: NetworkScenario, seed: int = 0, start: Optional[BeamformingSolution] = None
    ) -> InApPoint:
        """
        Random power-feasible beamformers (or ``start``), with u set to the
        achieved interference plus noise and mu to the achieved SINR, so every
        constraint of the epigraph problem holds with equality.
        """
        if start is None:
            start = scenario_service.random_feasible_solution(scenario, np.random.default_rng(seed))
        u = scenario_service.interference_plus_noise(scenario, start)
        mu = scenario_service.sinr_all(scenario, start)
        return InApPoint(beamformers=[np.array(v, dtype=complex) for v in start.beamformers], mu=mu, u=u)

    def linearize(self, point: InApPoint, scenario: NetworkScenario) -> CqpModel:
        """
        g_ik = (2 / u_i) (v_ik)^H h_ik^H h_ik and A_ik = (|h_ik v_ik| / u_i)^2,
        with objective weights w_i sqrt(1 + mu_i).
        """
        g, A = [], np.zeros((scenario.num_users, scenario.num_bs))
        for k, (h, v) in enumerate(zip(scenario.channels, point.beamformers)):
            hv = np.sum(h * v, axis=1)
            g.append((2.0 / point.u)[:, None] * hv.conj()[:, None] * h)
            A[:, k] = (np.abs(hv) / point.u) ** 2
        mu = np.maximum(point.mu, 0.0)
        return CqpModel(g=g, A=A, w_tilde=scenario.weights * np.sqrt(1.0 + mu), mu=mu, u=point.u.copy())

    def build_cqp(self, model: CqpModel, scenario: NetworkScenario) -> ConicProgram:
        """Conic form of the convex approximation at the model's expansion point."""
        builder = ConicProgramBuilder()
        all_bs = range(scenario.num_bs)
        blocks = add_beamformer_blocks(builder, scenario, all_bs)
        mu, delta, pi = add_log_bound_cones(builder, scenario.num_users)
        u = builder.add_free("u", scenario.num_users)

        sinr_rows = []
        for i in range(scenario.num_users):
            surrogate = desired_surrogate(model.g, blocks, i)
            sinr_rows.append(surrogate - float(model.A[i].sum()) * u[i] - mu[i])
            builder.add_rotated_soc(
                interference_terms(scenario, blocks, i),
                u[i] - float(scenario.noise_power[i]),
                Affine.constant(1.0),
            )
        builder.add_nonneg(sinr_rows, name="sinr_slack")
        add_power_constraints(builder, scenario, blocks, all_bs)
        builder.minimize(pi.dot(model.w_tilde))
        return builder.build()

    def read_point(self, program: ConicProgram, solution: ConicSolution, scenario: NetworkScenario) -> InApPoint:
        beamformers = [np.zeros_like(h) for h in scenario.channels]
        read_beamformers(program, solution.x, scenario, beamformers, range(scenario.num_bs))
        mu = program.value(solution.x, "mu").copy()
        if np.any(mu < 0):
            logger.warning(f"Clamping negative mu {mu.min():.3e} to zero")
            mu = np.maximum(mu, 0.0)
        return InApPoint(beamformers=beamformers, mu=mu, u=program.value(solution.x, "u").copy())

    def solve_cqp(self, point: InApPoint, scenario: NetworkScenario) -> tuple[Optional[InApPoint], ConicSolution]:
        """Linearize, build and solve one approximation; the point is None when unusable."""
        model = self.linearize(point, scenario)
        program = self.build_cqp(model, scenario)
        solution = solve_with_retry(program)
        if not solution.usable(settings.CONIC_ACCEPT_TOL):
            return None, solution
        return self.read_point(program, solution, scenario), solution

    def inap_solve(
        self,
        scenario: NetworkScenario,
        options: Optional[InApOptions] = None,
        start: Optional[BeamformingSolution] = None,
    ) -> tuple[BeamformingSolution, list[dict]]:
        """
        Iterate convex approximations until the WSR gained over the last
        ``window`` iterations drops below ``eps`` or ``max_iter`` is reached.
        Returns the best iterate and one trace row per iteration.
        """
        options = options or InApOptions()
        started = time.perf_counter()
        work = scenario_service.normalized(scenario)
        point = self.initial_point(work, options.seed, start)

        def wsr_of(p: InApPoint) -> float:
            return scenario_service.weighted_sum_rate(work, BeamformingSolution(beamformers=p.beamformers))

        history = [wsr_of(point)]
        best, best_wsr = point, history[0]
        trace = [self._trace_row(0, history[0], work, point, "initial", started)]
        iteration = 0
        with tracer.start_as_current_span("inap_solve"):
            try:
                for iteration in range(1, options.max_iter + 1):
                    new_point, solution = self.solve_cqp(point, work)
                    if new_point is None:
                        logger.warning(f"InAp CQP failed at iteration {iteration} with status {solution.status.value}")
                        trace.append(self._trace_row(iteration, history[-1], work, point, solution.status.value, started))
                        break
                    point = new_point
                    wsr = wsr_of(point)
                    if wsr < history[-1] - settings.INAP_MONOTONE_SLACK:
                        logger.warning(f"InAp WSR decreased by {history[-1] - wsr:.3e} at iteration {iteration}")
                    history.append(wsr)
                    if wsr > best_wsr:
                        best, best_wsr = point, wsr
                    trace.append(self._trace_row(iteration, wsr, work, point, solution.status.value, started))
                    logger.debug(f"InAp iter {iteration}: wsr={wsr:.6f}")
                    if len(history) > options.window and history[-1] - history[-1 - options.window] < options.eps:
                        break
            except Exception as e:
                logger.error(f"Error in inner approximation: {str(e)}")
                raise

        elapsed = time.perf_counter() - started
        logger.info(f"Solver: inap finished in {iteration} iterations, wsr={best_wsr:.6f} ({elapsed:.2f}s)")
        result = BeamformingSolution(
            beamformers=best.beamformers,
            solver="inap",
            iterations=iteration,
            wall_time_s=elapsed,
            metadata={"mu": best.mu.tolist(), "u": best.u.tolist()},
        )
        return result, trace

    def _trace_row(
        self, iteration: int, wsr: float, scenario: NetworkScenario, point: InApPoint, status: str, started: float
    ) -> dict:
        return {
            "iter": iteration,
            "wsr": wsr,
            "surrogate": float(scenario.weights @ np.log1p(np.maximum(point.mu, 0.0))),
            "cqp_status": status,
            "wallclock_ms": (time.perf_counter() - started) * 1000.0,
        }


# Create a singleton instance
inap_service = InApService()
