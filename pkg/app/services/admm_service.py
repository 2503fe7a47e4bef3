"""
Consensus ADMM over edge servers for the inner-approximation subproblem.

Server 1 (index 0) owns the macro BS and the per-user variables mu, u, delta,
pi plus copies (q~, y~) of every other server's interference and desired
surrogate sums; server d owns its BSs and the local sums (q^, y^). Globals
(q, y) tie the copies together. Consensus arrays use user-major,
server-minor order with the trailing axis ordered (q, y).
"""
import math
import time
from collections import defaultdict
from typing import Optional

import numpy as np
from loguru import logger
from opentelemetry.trace import get_tracer

from app.config import settings
from app.core.conic import Affine, ConicProgramBuilder, solve_with_retry
from app.core.exceptions import ConfigurationError, InvariantViolation
from app.schemas.admm import (
    INNER_MESSAGE_TYPES,
    OUTER_MESSAGE_TYPES,
    AdmmIterate,
    AdmmOptions,
    CoordinatorState,
    EdgeState,
    MecAssignment,
    Message,
    ResidualReport,
)
from app.schemas.inap import CqpModel, InApPoint
from app.schemas.scenario import BeamformingSolution, NetworkScenario
from app.services.inap_service import (
    add_beamformer_blocks,
    add_log_bound_cones,
    add_power_constraints,
    desired_surrogate,
    inap_service,
    interference_terms,
    read_beamformers,
)
from app.services.scenario_service import scenario_service

tracer = get_tracer(__name__)


def edge_partial(state: EdgeState) -> np.ndarray:
    """Server d's share of the global numerator, ``rho + m_d pi^`` as (N, 2)."""
    return state.rho + state.penalty * state.local_pi


def global_update(
    mult_local: np.ndarray,
    penalty_local: float,
    pi_local: np.ndarray,
    partial_remote: np.ndarray,
    penalty_remote: np.ndarray,
) -> np.ndarray:
    """
    Minimizer of the augmented Lagrangian over the globals:
    ``phi = (xi + m_1 pi~ + rho + m_d pi^) / (m_1 + m_d)``.

    Arrays are (N, D-1, 2); ``partial_remote`` holds ``rho + m_d pi^`` as
    sent by the edges and ``penalty_remote`` holds m_d per server.
    """
    m_d = np.asarray(penalty_remote, dtype=float)[None, :, None]
    return (mult_local + penalty_local * pi_local + partial_remote) / (penalty_local + m_d)


def multiplier_update(mult: np.ndarray, penalty, pi_local: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """mult + m (pi - phi)."""
    return mult + penalty * (pi_local - phi)


def residuals(
    server: int,
    pi_local: np.ndarray,
    phi: np.ndarray,
    phi_prev: np.ndarray,
    mult: np.ndarray,
    penalty: float,
    eps_rel: float,
) -> ResidualReport:
    """Primal ``pi - phi`` and dual ``m (phi - phi_prev)`` with relative tolerances."""
    return ResidualReport(
        server=server,
        primal=float(np.linalg.norm(pi_local - phi)),
        dual=float(np.linalg.norm(penalty * (phi - phi_prev))),
        eps_pri=eps_rel * max(float(np.linalg.norm(pi_local)), float(np.linalg.norm(phi))),
        eps_dua=eps_rel * float(np.linalg.norm(mult)),
        eps_rel=eps_rel,
    )


def adaptive_penalty(
    penalty: float, report: ResidualReport, tau: float, beta: float, iteration: int, freeze_after: int, m0: float
) -> float:
    """
    Residual balancing: grow by tau when the scaled primal residual dominates,
    shrink when the scaled dual residual does, otherwise hold. Fixed to m0
    once ``iteration``, counted over the whole run, reaches ``freeze_after``.
    """
    if iteration >= freeze_after:
        return m0
    if report.primal_ratio > beta * report.dual_ratio:
        return penalty * tau
    if report.dual_ratio > beta * report.primal_ratio:
        return penalty / tau
    return penalty


def message_accounting(ledger: list[Message], num_users: int, num_servers: int) -> list[dict]:
    """
    Scalar counts per (outer, inner, server, stage). Every inner iteration
    must move exactly 4 N (D - 1) scalars; a mismatch raises InvariantViolation.
    Stop flags are control traffic and are not counted.
    """
    counts: dict[tuple[int, int, int, str], int] = defaultdict(int)
    per_inner: dict[tuple[int, int], int] = defaultdict(int)
    for m in ledger:
        if m.type in INNER_MESSAGE_TYPES:
            counts[m.outer_iter, m.inner_iter, m.server, "inner"] += 1
            per_inner[m.outer_iter, m.inner_iter] += 1
        elif m.type in OUTER_MESSAGE_TYPES:
            counts[m.outer_iter, m.inner_iter, m.server, "outer"] += 1

    expected = 4 * num_users * (num_servers - 1)
    for (outer, inner), total in per_inner.items():
        if total != expected:
            raise InvariantViolation(
                f"Inner iteration ({outer}, {inner}) moved {total} scalars, expected {expected}"
            )
    return [
        {"outer_iter": o, "inner_iter": j, "server": d, "stage": stage, "scalars": n}
        for (o, j, d, stage), n in sorted(counts.items())
    ]


class AdmmService:
    def validate_assignment(self, scenario: NetworkScenario, assignment: MecAssignment) -> None:
        """Servers non-empty and disjoint, covering every BS, with the macro BS on server 1."""
        seen = []
        for d, bs_set in enumerate(assignment.servers):
            if not bs_set:
                raise ConfigurationError(f"Server {d + 1} owns no BS")
            seen += bs_set
        if sorted(seen) != list(range(scenario.num_bs)):
            raise ConfigurationError(
                f"Assignment {assignment.servers} is not a partition of BSs 0..{scenario.num_bs - 1}"
            )
        if 0 not in assignment.servers[0]:
            raise ConfigurationError("Server 1 must own the macro BS")

    def sector_assignment(self, scenario: NetworkScenario, num_servers: int) -> MecAssignment:
        """
        Server 1 takes the macro BS; the small BSs are split into angular
        sectors around it, one sector per remaining server.
        """
        if num_servers < 1 or num_servers > scenario.num_bs:
            raise ConfigurationError(f"Cannot spread {scenario.num_bs} BSs over {num_servers} servers")
        if num_servers == 1:
            return MecAssignment(servers=[list(range(scenario.num_bs))])
        small = list(range(1, scenario.num_bs))
        angles = [math.atan2(*scenario.bs_positions[k][::-1]) % (2 * math.pi) for k in small]
        ordered = [k for _, k in sorted(zip(angles, small))]
        chunks = np.array_split(np.asarray(ordered, dtype=int), num_servers - 1)
        assignment = MecAssignment(servers=[[0]] + [sorted(int(k) for k in chunk) for chunk in chunks])
        self.validate_assignment(scenario, assignment)
        return assignment

    def parse_assignment(self, spec: str) -> MecAssignment:
        """``"0,1;2;3,4"`` -> servers [[0, 1], [2], [3, 4]]."""
        try:
            servers = [[int(k) for k in part.split(",") if k.strip()] for part in spec.split(";")]
        except ValueError:
            raise ConfigurationError(f"Malformed server spec '{spec}'")
        return MecAssignment(servers=servers)

    def initial_states(
        self, scenario: NetworkScenario, assignment: MecAssignment, options: AdmmOptions, point: InApPoint
    ) -> tuple[CoordinatorState, list[EdgeState]]:
        """q = y = 1, xi = rho = 1, penalties m0; beamformers from the shared initial point."""
        N, Dbar = scenario.num_users, assignment.num_servers - 1
        coordinator = CoordinatorState(
            beamformers=[v.copy() for v in point.beamformers],
            mu=point.mu.copy(),
            u=point.u.copy(),
            q_tilde=np.ones((N, Dbar)),
            y_tilde=np.ones((N, Dbar)),
            xi=np.ones((N, Dbar, 2)),
            phi=np.ones((N, Dbar, 2)),
            phi_prev=np.ones((N, Dbar, 2)),
            penalty=options.m0,
        )
        edges = [
            EdgeState(
                server=d,
                beamformers=[v.copy() for v in point.beamformers],
                q_hat=np.ones(N),
                y_hat=np.ones(N),
                rho=np.ones((N, 2)),
                phi=np.ones((N, 2)),
                phi_prev=np.ones((N, 2)),
                penalty=options.m0,
            )
            for d in range(1, assignment.num_servers)
        ]
        return coordinator, edges

    def server_sums(
        self, scenario: NetworkScenario, beamformers: list[np.ndarray], g: list[np.ndarray], bs_set: list[int]
    ) -> np.ndarray:
        """(N, 2) array of ``sum_{k in bs_set} sum_{j != i} |h_ik v_jk|^2`` and ``sum_{k in bs_set} Re{g_ik v_ik}``."""
        sums = np.zeros((scenario.num_users, 2))
        for k in bs_set:
            hv = scenario.channels[k] @ beamformers[k].T
            power = np.abs(hv) ** 2
            sums[:, 0] += power.sum(axis=1) - np.diag(power)
            sums[:, 1] += np.real(np.sum(g[k] * beamformers[k], axis=1))
        return sums

    def lift_centralized(
        self,
        scenario: NetworkScenario,
        assignment: MecAssignment,
        model: CqpModel,
        point: InApPoint,
        options: Optional[AdmmOptions] = None,
    ) -> AdmmIterate:
        """
        Consensus iterate with zero multipliers whose local copies and globals
        all equal the server sums of a centralized approximation point.
        ``model`` is the linearization the point was solved at.
        """
        options = options or AdmmOptions()
        N, D = scenario.num_users, assignment.num_servers
        sums = np.zeros((N, D - 1, 2))
        for d in range(1, D):
            sums[:, d - 1] = self.server_sums(scenario, point.beamformers, model.g, assignment.servers[d])
        coordinator = CoordinatorState(
            beamformers=[v.copy() for v in point.beamformers],
            mu=point.mu.copy(),
            u=point.u.copy(),
            q_tilde=sums[:, :, 0].copy(),
            y_tilde=sums[:, :, 1].copy(),
            xi=np.zeros_like(sums),
            phi=sums.copy(),
            phi_prev=sums.copy(),
            penalty=options.m0,
            g=model.g,
            A_total=model.A.sum(axis=1),
            w_tilde=model.w_tilde,
        )
        edges = [
            EdgeState(
                server=d,
                beamformers=[v.copy() for v in point.beamformers],
                q_hat=sums[:, d - 1, 0].copy(),
                y_hat=sums[:, d - 1, 1].copy(),
                rho=np.zeros((N, 2)),
                phi=sums[:, d - 1].copy(),
                phi_prev=sums[:, d - 1].copy(),
                penalty=options.m0,
                u=point.u.copy(),
                g=model.g,
            )
            for d in range(1, D)
        ]
        return AdmmIterate(coordinator=coordinator, edges=edges)

    def local_linearization(
        self, scenario: NetworkScenario, beamformers: list[np.ndarray], u: np.ndarray, bs_set: list[int]
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """g rows for every BS and ``sum_{k in bs_set} A_ik`` from locally held beamformers."""
        model = inap_service.linearize(
            InApPoint(beamformers=beamformers, mu=np.zeros(scenario.num_users), u=u), scenario
        )
        return model.g, model.A[:, bs_set].sum(axis=1)

    def server1_update(self, state: CoordinatorState, scenario: NetworkScenario, bs_set: list[int]) -> bool:
        """
        Solve the coordinator's conic subproblem

            min  sum_i w~_i pi_i + xi^T (pi~ - phi~) + (m / 2) ||pi~ - phi~||^2

        over its feasible set. On failure the previous local values are kept
        and False is returned.
        """
        N, Dbar = scenario.num_users, state.q_tilde.shape[1]
        builder = ConicProgramBuilder()
        blocks = add_beamformer_blocks(builder, scenario, bs_set)
        mu, delta, pi = add_log_bound_cones(builder, N)
        u = builder.add_free("u", N)
        q_t = builder.add_free("q_tilde", N * Dbar) if Dbar else None
        y_t = builder.add_free("y_tilde", N * Dbar) if Dbar else None

        sinr_rows = []
        for i in range(N):
            row = desired_surrogate(state.g, blocks, i) - float(state.A_total[i]) * u[i] - mu[i]
            remote_interference = Affine()
            for c in range(Dbar):
                row = row + y_t[i * Dbar + c]
                remote_interference = remote_interference + q_t[i * Dbar + c]
            sinr_rows.append(row)
            builder.add_rotated_soc(
                interference_terms(scenario, blocks, i),
                u[i] - float(scenario.noise_power[i]) - remote_interference,
                Affine.constant(1.0),
            )
        builder.add_nonneg(sinr_rows, name="sinr_slack")
        add_power_constraints(builder, scenario, blocks, bs_set)

        objective = pi.dot(state.w_tilde)
        if Dbar:
            s = builder.add_nonnegative("penalty_epigraph", 1)
            gaps = []
            for i in range(N):
                for c in range(Dbar):
                    gaps += [q_t[i * Dbar + c] - state.phi[i, c, 0], y_t[i * Dbar + c] - state.phi[i, c, 1]]
            builder.add_rotated_soc(gaps, s[0], Affine.constant(1.0))
            objective = objective + q_t.dot(state.xi[:, :, 0].ravel()) + y_t.dot(state.xi[:, :, 1].ravel())
            objective = objective + 0.5 * state.penalty * s[0]
        builder.minimize(objective)

        program = builder.build()
        solution = solve_with_retry(program)
        if not solution.usable(settings.CONIC_ACCEPT_TOL):
            logger.warning(f"Server 1 subproblem failed ({solution.status.value}); keeping previous iterate")
            return False
        read_beamformers(program, solution.x, scenario, state.beamformers, bs_set)
        state.mu = np.maximum(program.value(solution.x, "mu"), 0.0)
        state.u = program.value(solution.x, "u").copy()
        if Dbar:
            state.q_tilde = program.value(solution.x, "q_tilde").reshape(N, Dbar).copy()
            state.y_tilde = program.value(solution.x, "y_tilde").reshape(N, Dbar).copy()
        return True

    def serverd_update(self, state: EdgeState, scenario: NetworkScenario, bs_set: list[int]) -> bool:
        """
        Solve server d's subproblem

            min  rho^T (pi^ - phi^) + (m_d / 2) ||pi^ - phi^||^2

        subject to its desired-surrogate, interference and power constraints.
        """
        N = scenario.num_users
        builder = ConicProgramBuilder()
        blocks = add_beamformer_blocks(builder, scenario, bs_set)
        q_h = builder.add_free("q_hat", N)
        y_h = builder.add_free("y_hat", N)

        rows = []
        for i in range(N):
            rows.append(desired_surrogate(state.g, blocks, i) - y_h[i])
            builder.add_rotated_soc(interference_terms(scenario, blocks, i), q_h[i], Affine.constant(1.0))
        builder.add_nonneg(rows, name="desired_slack")
        add_power_constraints(builder, scenario, blocks, bs_set)

        s = builder.add_nonnegative("penalty_epigraph", 1)
        gaps = []
        for i in range(N):
            gaps += [q_h[i] - state.phi[i, 0], y_h[i] - state.phi[i, 1]]
        builder.add_rotated_soc(gaps, s[0], Affine.constant(1.0))
        builder.minimize(q_h.dot(state.rho[:, 0]) + y_h.dot(state.rho[:, 1]) + 0.5 * state.penalty * s[0])

        program = builder.build()
        solution = solve_with_retry(program)
        if not solution.usable(settings.CONIC_ACCEPT_TOL):
            logger.warning(
                f"Server {state.server + 1} subproblem failed ({solution.status.value}); keeping previous iterate"
            )
            return False
        read_beamformers(program, solution.x, scenario, state.beamformers, bs_set)
        state.q_hat = program.value(solution.x, "q_hat").copy()
        state.y_hat = program.value(solution.x, "y_hat").copy()
        return True

    def admm_solve(
        self,
        scenario: NetworkScenario,
        assignment: MecAssignment,
        options: Optional[AdmmOptions] = None,
    ) -> tuple[BeamformingSolution, list[dict], list[Message]]:
        """
        Outer inner-approximation loop with an ADMM inner stage.

        Runs on the power-normalized scenario so consensus sums, globals and
        multipliers are all of order one. Returns the final beamformers, one
        trace row per inner iteration (outer_iter, inner_iter, wsr, rel_gap,
        max_rel_residual, messages) and the message ledger.
        """
        from app.worker.actors import Coordinator, make_transport

        options = options or AdmmOptions()
        self.validate_assignment(scenario, assignment)
        started = time.perf_counter()
        work = scenario_service.power_normalized(scenario)
        point = inap_service.initial_point(work, options.seed)
        coordinator_state, edge_states = self.initial_states(work, assignment, options, point)

        transport = make_transport(work, assignment, options, edge_states)
        coordinator = Coordinator(work, assignment, options, coordinator_state, transport)
        with tracer.start_as_current_span("admm_solve") as span:
            span.set_attribute("ncjt.num_servers", assignment.num_servers)
            try:
                rows = coordinator.run()
            except Exception as e:
                logger.error(f"Error in distributed solve: {str(e)}")
                raise
            finally:
                transport.close()
            span.set_attribute("ncjt.inner_iterations", len(rows))

        beamformers = coordinator.assemble_beamformers()
        elapsed = time.perf_counter() - started
        accounting = message_accounting(coordinator.ledger, work.num_users, assignment.num_servers)
        solution = BeamformingSolution(
            beamformers=beamformers,
            solver="admm",
            iterations=len(rows),
            wall_time_s=elapsed,
            metadata={
                "outer_iterations": coordinator.outer_iter,
                "inner_iterations": len(rows),
                "scalars_exchanged": sum(row["scalars"] for row in accounting),
                "mu": coordinator.state.mu.tolist(),
                "primal_residual": coordinator.iterate().primal_residual,
            },
        )
        wsr = scenario_service.weighted_sum_rate(work, solution)
        logger.info(
            f"Solver: admm finished after {coordinator.outer_iter} outer / {len(rows)} inner iterations, "
            f"wsr={wsr:.6f} ({elapsed:.2f}s)"
        )
        return solution, rows, coordinator.ledger


# Create a singleton instance
admm_service = AdmmService()
