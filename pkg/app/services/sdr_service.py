"""
Semidefinite relaxation of the rate-target feasibility problem and rank-one
beamformer recovery.

Each complex covariance V_ik (M_k x M_k, Hermitian PSD) is carried by a real
symmetric 2M_k x 2M_k PSD block X_ik standing for ``realify(V_ik)``, so that

    h V h^H = tr(realify(h^H h) X) / 2     and     tr V = tr X / 2.

Only (user, BS) pairs allowed by the serving mask get a block.
"""
from typing import Optional

import numpy as np
from loguru import logger

from app.config import settings
from app.core.conic import Affine, ConicProgramBuilder, phase1_feasibility, solve_with_retry
from app.core.exceptions import InvariantViolation, StructuralError
from app.core.linalg import hermitian_from_realified, realify_hermitian, realify_row, smat, svec
from app.schemas.conic import ConicProgram
from app.schemas.scenario import BeamformingSolution, NetworkScenario
from app.services.scenario_service import scenario_service


def _block_name(i: int, k: int) -> str:
    return f"X_{i}_{k}"


class SdrService:
    def sinr_targets(self, rates: np.ndarray) -> np.ndarray:
        """r~_i = exp(r_i) - 1."""
        return np.expm1(np.maximum(np.asarray(rates, dtype=float), 0.0))

    def build_program(self, scenario: NetworkScenario, rates: np.ndarray, min_trace: bool = False) -> ConicProgram:
        """
        SINR rows ``sum_k h_ik V_ik h_ik^H - r~_i sum_k sum_{j != i} h_ik V_jk h_ik^H >= r~_i sigma_i^2``
        and power rows ``sum_i tr V_ik <= P_k``. With ``min_trace`` the total
        trace is minimized, otherwise the program has no objective.
        """
        targets = self.sinr_targets(rates)
        N, B = scenario.num_users, scenario.num_bs
        builder = ConicProgramBuilder()
        blocks = {}
        for i in range(N):
            for k in range(B):
                if scenario.serves(i, k):
                    blocks[i, k] = builder.add_psd(_block_name(i, k), 2 * scenario.antennas[k])

        # gain[i][k] = svec coefficients of h_ik V h_ik^H
        gains = [
            [0.5 * svec(realify_hermitian(np.outer(h[i].conj(), h[i]))) for h in scenario.channels]
            for i in range(N)
        ]
        traces = [0.5 * svec(np.eye(2 * M)) for M in scenario.antennas]

        sinr_rows = []
        for i in range(N):
            expr = Affine()
            for (j, k), blk in blocks.items():
                coeff = gains[i][k] if j == i else -targets[i] * gains[i][k]
                expr = expr + blk.dot(coeff)
            sinr_rows.append(expr - targets[i] * scenario.noise_power[i])
        builder.add_nonneg(sinr_rows, name="sinr_slack")

        power_rows = []
        for k in range(B):
            expr = Affine()
            for (j, kk), blk in blocks.items():
                if kk == k:
                    expr = expr - blk.dot(traces[k])
            power_rows.append(expr + scenario.powers[k])
        builder.add_nonneg(power_rows, name="power_slack")

        if min_trace:
            objective = Affine()
            for (j, k), blk in blocks.items():
                objective = objective + blk.dot(traces[k])
            builder.minimize(objective)
        return builder.build()

    def feasibility_verdict(
        self, scenario: NetworkScenario, rates: np.ndarray, upper_bounds: Optional[np.ndarray] = None
    ) -> tuple[Optional[bool], bool]:
        """
        Phase-one verdict on the relaxed feasibility problem for a rate vector,
        paired with whether the point is certified: feasible with an interior
        margin above ``BRNB_CERTIFY_MARGIN``, so that beamformers can be
        recovered there without sitting on the tolerance boundary.

        The verdict is ``None`` when the conic solver could not reach one.
        Targets at or below zero are trivially feasible; targets above the
        interference-free bound are rejected without a solve.
        """
        rates = np.asarray(rates, dtype=float)
        if rates.shape != (scenario.num_users,):
            raise StructuralError(f"Expected {scenario.num_users} rates, got shape {rates.shape}")
        if np.all(rates <= 0):
            return True, True
        if upper_bounds is None:
            upper_bounds = scenario_service.rate_upper_bounds(scenario)
        if np.any(rates > upper_bounds):
            return False, False
        result = phase1_feasibility(self.build_program(scenario, rates), margin_cap=settings.BRNB_MARGIN_CAP)
        if np.isnan(result.slack):
            logger.warning(f"SDR feasibility undecided at rates {np.round(rates, 6).tolist()} ({result.status.value})")
            return None, False
        return result.feasible, result.margin > settings.BRNB_CERTIFY_MARGIN

    def check_feasibility(
        self, scenario: NetworkScenario, rates: np.ndarray, upper_bounds: Optional[np.ndarray] = None
    ) -> Optional[bool]:
        """True/False/None feasibility of the relaxed problem for a rate vector."""
        return self.feasibility_verdict(scenario, rates, upper_bounds)[0]

    def _covariances(self, program: ConicProgram, x: np.ndarray, scenario: NetworkScenario) -> dict[tuple[int, int], np.ndarray]:
        covariances = {}
        for i in range(scenario.num_users):
            for k in range(scenario.num_bs):
                name = _block_name(i, k)
                if name in program.names:
                    covariances[i, k] = hermitian_from_realified(smat(program.value(x, name)))
        return covariances

    def min_trace_covariances(self, scenario: NetworkScenario, rates: np.ndarray) -> Optional[dict[tuple[int, int], np.ndarray]]:
        """Solve the min-trace SDR; returns the complex covariances or None on failure."""
        program = self.build_program(scenario, rates, min_trace=True)
        solution = solve_with_retry(program)
        if not solution.usable(settings.CONIC_ACCEPT_TOL):
            logger.warning(f"Min-trace SDR ended with status {solution.status.value}")
            return None
        return self._covariances(program, solution.x, scenario)

    def interior_covariances(self, scenario: NetworkScenario, rates: np.ndarray) -> Optional[dict[tuple[int, int], np.ndarray]]:
        """Covariances of the deepest phase-one point; None unless it lies strictly inside."""
        program = self.build_program(scenario, rates)
        result = phase1_feasibility(program, margin_cap=settings.BRNB_MARGIN_CAP)
        if result.x is None or result.margin <= 0:
            return None
        return self._covariances(program, result.x, scenario)

    def sinr_shortfall(self, scenario: NetworkScenario, solution: BeamformingSolution, rates: np.ndarray) -> float:
        """Largest relative SINR deficit ``(r~_i - sinr_i) / r~_i`` over users with a positive target."""
        targets = self.sinr_targets(rates)
        achieved = scenario_service.sinr_all(scenario, solution)
        active = targets > 0
        if not np.any(active):
            return 0.0
        return float(max(0.0, np.max((targets[active] - achieved[active]) / targets[active])))

    def rank_one_vector(self, V: np.ndarray, rank_tol: float) -> Optional[np.ndarray]:
        """Scaled principal eigenvector when ``lambda_2 / lambda_1 <= rank_tol``."""
        eigvals, eigvecs = np.linalg.eigh(V)
        lam1 = eigvals[-1]
        if lam1 <= 0:
            return np.zeros(V.shape[0], dtype=complex)
        lam2 = eigvals[-2] if V.shape[0] > 1 else 0.0
        if max(lam2, 0.0) / lam1 > rank_tol:
            return None
        return np.sqrt(lam1) * eigvecs[:, -1]

    def extraction_cqp(
        self, scenario: NetworkScenario, i: int, k: int, V: np.ndarray
    ) -> np.ndarray:
        """
        maximize Re(h_ik v) subject to ||v||^2 <= tr V and
        |h_jk v|^2 <= h_jk V h_jk^H for every other user j.
        """
        M = scenario.antennas[k]
        H = scenario.channels[k]
        builder = ConicProgramBuilder()
        v = builder.add_free("v", 2 * M)
        budget = max(float(np.real(np.trace(V))), 0.0)
        builder.add_soc([Affine.constant(budget ** 0.5), *[v[p] for p in range(2 * M)]])
        for j in range(scenario.num_users):
            if j == i:
                continue
            leak = max(float(np.real(H[j] @ V @ H[j].conj())), 0.0)
            re, im = realify_row(H[j])
            builder.add_soc([Affine.constant(leak ** 0.5), v.dot(re), v.dot(im)])
        re, _ = realify_row(H[i])
        builder.minimize(-1.0 * v.dot(re))
        program = builder.build()
        solution = solve_with_retry(program)
        if not solution.usable(settings.CONIC_ACCEPT_TOL):
            raise InvariantViolation(
                f"Extraction program for user {i}, BS {k} failed with status {solution.status.value}"
            )
        x = program.value(solution.x, "v")
        return x[:M] + 1j * x[M:]

    def extract_beamformers(
        self, scenario: NetworkScenario, rates: np.ndarray, rank_tol: Optional[float] = None
    ) -> BeamformingSolution:
        """
        Recover beamformers meeting the rate targets: min-trace SDR, then an
        eigenvector for every rank-one block and the extraction CQP otherwise.

        When the min-trace program fails, the covariances of the deepest
        phase-one point are used instead. The relative SINR deficit is
        recorded as ``sinr_shortfall`` and ``targets_met`` compares it with
        ``EXTRACTION_SINR_TOL``.
        """
        rank_tol = settings.BRNB_RANK_TOL if rank_tol is None else rank_tol
        rates = np.asarray(rates, dtype=float)
        source = "min_trace"
        covariances = self.min_trace_covariances(scenario, rates)
        if covariances is None:
            source = "phase1"
            logger.warning("Min-trace SDR failed; recovering from the phase-one interior point")
            covariances = self.interior_covariances(scenario, rates)
        if covariances is None:
            raise InvariantViolation("No relaxed solution found for a rate vector reported feasible")

        beamformers = [np.zeros_like(h) for h in scenario.channels]
        extracted = 0
        for (i, k), V in covariances.items():
            v = self.rank_one_vector(V, rank_tol)
            if v is None:
                extracted += 1
                v = self.extraction_cqp(scenario, i, k, V)
            beamformers[k][i] = v
        if extracted:
            logger.info(f"Extraction CQP used for {extracted} higher-rank blocks")

        solution = BeamformingSolution(beamformers=beamformers, solver="brnb")
        shortfall = self.sinr_shortfall(scenario, solution, rates)
        met = shortfall <= settings.EXTRACTION_SINR_TOL
        if not met:
            logger.warning(f"Extracted beamformers miss the SINR targets by {shortfall:.3e} (relative)")
        solution.metadata.update(
            {"extraction": source, "cqp_blocks": extracted, "sinr_shortfall": shortfall, "targets_met": met}
        )
        return solution


# Create a singleton instance
sdr_service = SdrService()
