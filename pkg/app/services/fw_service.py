"""
Frank-Wolfe (conditional gradient) baseline.

The objective is ``g(x) = sum_i w_i [log(x^T H_i x + s_i) - log(x^T G_i x + s_i)]``
with s_i the noise power, which equals the weighted sum rate. Every product
``H_i x`` is formed blockwise from ``h_ik``: for a Hermitian ``Q`` the
realified product is ``[Re(Q v); Im(Q v)]``.
"""
import time
from typing import Optional

import numpy as np
from loguru import logger
from opentelemetry.trace import get_tracer

from app.schemas.fw import FwOptions, RealifiedProblem, StepRule
from app.schemas.scenario import BeamformingSolution, NetworkScenario
from app.services.scenario_service import scenario_service

tracer = get_tracer(__name__)


def stack_beamformers(beamformers: list[np.ndarray]) -> np.ndarray:
    v = np.concatenate([b.ravel() for b in beamformers])
    return np.concatenate([v.real, v.imag])


def unstack_beamformers(x: np.ndarray, problem: RealifiedProblem) -> list[np.ndarray]:
    v = x[: problem.size] + 1j * x[problem.size :]
    return [
        v[problem.offsets[k] : problem.offsets[k + 1]].reshape(h.shape).copy()
        for k, h in enumerate(problem.channels)
    ]


def received_terms(x: np.ndarray, problem: RealifiedProblem) -> list[np.ndarray]:
    """Per BS k the (N, N) matrix of h_ik v_jk (rows i receive, columns j stream)."""
    return [h @ v.T for h, v in zip(problem.channels, unstack_beamformers(x, problem))]


def quadratic_forms(x: np.ndarray, problem: RealifiedProblem) -> tuple[np.ndarray, np.ndarray]:
    """(x^T H_i x, x^T G_i x) for every user: total received power and interference."""
    R = sum(np.abs(t) ** 2 for t in received_terms(x, problem))
    total = R.sum(axis=1)
    return total, total - np.diag(R)


def objective(x: np.ndarray, problem: RealifiedProblem) -> float:
    total, interference = quadratic_forms(x, problem)
    s = problem.noise_power
    return float(problem.weights @ (np.log(total + s) - np.log(interference + s)))


class FwService:
    def realify_problem(self, scenario: NetworkScenario) -> RealifiedProblem:
        offsets = [0]
        for h in scenario.channels:
            offsets.append(offsets[-1] + h.size)
        mask = (
            scenario.serving_mask
            if scenario.serving_mask is not None
            else np.ones((scenario.num_users, scenario.num_bs), dtype=bool)
        )
        problem = RealifiedProblem(
            channels=[np.asarray(h, dtype=complex) for h in scenario.channels],
            noise_power=np.asarray(scenario.noise_power, dtype=float),
            weights=np.asarray(scenario.weights, dtype=float),
            powers=np.asarray(scenario.powers, dtype=float),
            serving_mask=mask,
            offsets=offsets,
        )
        problem.rho_l = self.lipschitz_bound(problem)
        return problem

    def gradient(self, x: np.ndarray, problem: RealifiedProblem) -> np.ndarray:
        """
        sum_i w_i (2 H_i x / (x^T H_i x + s_i) - 2 G_i x / (x^T G_i x + s_i)).

        Block (j, k) of the complex gradient is
        ``2 sum_i c_ij (h_ik v_jk) conj(h_ik)`` where c_ij collects the user
        weights and denominators. Masked pairs get zero.
        """
        terms = received_terms(x, problem)
        R = sum(np.abs(t) ** 2 for t in terms)
        total = R.sum(axis=1)
        s = problem.noise_power
        w = problem.weights
        N = problem.num_users
        coeff = np.tile((w / (total + s))[:, None], (1, N))
        coeff -= (w / (total - np.diag(R) + s))[:, None] * (1.0 - np.eye(N))
        blocks = []
        for k, (h, t) in enumerate(zip(problem.channels, terms)):
            block = 2.0 * (coeff * t).T @ h.conj()
            block *= problem.serving_mask[:, k][:, None]
            blocks.append(block.ravel())
        grad = np.concatenate(blocks)
        return np.concatenate([grad.real, grad.imag])

    def linear_oracle(self, c: np.ndarray, problem: RealifiedProblem) -> np.ndarray:
        """argmax c^T x over the per-BS balls: ``sqrt(P_k / c_k^T c_k) c_k``; a zero block maps to zero."""
        out = np.zeros_like(c)
        for k in range(len(problem.channels)):
            re, im = problem.bs_slices(k)
            norm_sq = float(c[re] @ c[re] + c[im] @ c[im])
            if norm_sq > 0:
                scale = np.sqrt(problem.powers[k] / norm_sq)
                out[re], out[im] = scale * c[re], scale * c[im]
        return out

    def lipschitz_bound(self, problem: RealifiedProblem) -> float:
        """
        sum_i w_i ((2 / s_i) ||H_i|| + (4 P / s_i^2) ||H_i||^2 + same for G_i),
        P the total power. Both block-diagonal matrices have spectral norm
        ``max_k ||h_ik||^2`` over served pairs (G_i is zero for a single user).
        """
        gains = np.stack([np.sum(np.abs(h) ** 2, axis=1) for h in problem.channels], axis=1)
        gains = gains * problem.serving_mask
        norm_h = gains.max(axis=1)
        norm_g = norm_h if problem.num_users > 1 else np.zeros_like(norm_h)
        s = problem.noise_power
        p_total = float(problem.powers.sum())
        per_user = (2.0 / s) * (norm_h + norm_g) + (4.0 * p_total / s**2) * (norm_h**2 + norm_g**2)
        return float(problem.weights @ per_user)

    def _adaptive_step(
        self, x: np.ndarray, d: np.ndarray, gap: float, value: float, problem: RealifiedProblem, L: float, options: FwOptions
    ) -> tuple[float, float]:
        """Short step with a backtracked curvature estimate; returns (step, L)."""
        d_sq = float(d @ d)
        if d_sq == 0:
            return 0.0, L
        L = max(L * options.eta, 1e-12 * problem.rho_l)
        while True:
            step = min(1.0, gap / (L * d_sq))
            if L >= problem.rho_l:
                return step, problem.rho_l
            if objective(x + step * d, problem) >= value + step * gap - 0.5 * L * step**2 * d_sq:
                return step, L
            L = min(L * options.tau, problem.rho_l)

    def fw_solve(
        self, scenario: NetworkScenario, options: Optional[FwOptions] = None
    ) -> tuple[BeamformingSolution, list[dict]]:
        """Conditional gradient ascent from a random feasible point until the FW gap drops to ``eps_g``."""
        options = options or FwOptions()
        started = time.perf_counter()
        work = scenario_service.normalized(scenario)
        problem = self.realify_problem(work)
        start = scenario_service.random_feasible_solution(work, np.random.default_rng(options.seed))
        x = stack_beamformers(start.beamformers)
        L = problem.rho_l
        trace = []
        iteration = 0
        with tracer.start_as_current_span("fw_solve"):
            try:
                for iteration in range(1, options.max_iter + 1):
                    c = self.gradient(x, problem)
                    d = self.linear_oracle(c, problem) - x
                    gap = max(float(c @ d), 0.0)
                    value = objective(x, problem)
                    if gap <= options.eps_g:
                        trace.append({"iter": iteration, "wsr": value, "fw_gap": gap, "step": 0.0})
                        break
                    if options.rule == StepRule.DIMINISHING:
                        step = float(iteration) ** (-options.omega)
                    else:
                        step, L = self._adaptive_step(x, d, gap, value, problem, L, options)
                    x = x + step * d
                    trace.append({"iter": iteration, "wsr": value, "fw_gap": gap, "step": step})
                    if iteration % 1000 == 0:
                        logger.debug(f"FW iter {iteration}: wsr={value:.6f} gap={gap:.3e}")
            except Exception as e:
                logger.error(f"Error in Frank-Wolfe: {str(e)}")
                raise

        elapsed = time.perf_counter() - started
        result = BeamformingSolution(
            beamformers=unstack_beamformers(x, problem),
            solver="fw",
            iterations=iteration,
            wall_time_s=elapsed,
            metadata={"rule": options.rule.value, "rho_l": problem.rho_l, "fw_gap": trace[-1]["fw_gap"]},
        )
        logger.info(
            f"Solver: fw finished in {iteration} iterations, wsr={objective(x, problem):.6f} ({elapsed:.2f}s)"
        )
        return result, trace


# Create a singleton instance
fw_service = FwService()
