import time
from typing import Optional

import numpy as np
from loguru import logger
from opentelemetry.trace import get_tracer

from app.config import settings
from app.core.exceptions import EmptyQueueError
from app.schemas.brnb import BoundOutcome, BranchRule, BrnbOptions, BrnbState, RateBox
from app.schemas.scenario import BeamformingSolution, NetworkScenario
from app.services.scenario_service import scenario_service
from app.services.sdr_service import sdr_service

tracer = get_tracer(__name__)


class BrnbService:
    def select_box(self, state: BrnbState) -> RateBox:
        """
        Pop the open box with the largest upper bound. Ties go to the box
        inserted first.
        """
        if not state.queue:
            raise EmptyQueueError("No open boxes left")
        return state.pop()

    def branch(self, box: RateBox, weights: np.ndarray, rule: BranchRule) -> tuple[RateBox, RateBox]:
        """
        Split at the midpoint of the longest (optionally weighted) edge.

        The first child keeps the upper corner and inherits ``ub``; the second
        keeps the lower corner and is capped by the objective at its new upper
        corner. A zero-volume box is split along its first maximal edge.
        """
        edges = box.edges
        score = weights * edges if rule == BranchRule.WEIGHTED else edges
        i = int(np.argmax(score))
        mid = box.lower[i] + edges[i] / 2.0

        lower_1 = box.lower.copy()
        lower_1[i] = mid
        upper_2 = box.upper.copy()
        upper_2[i] = mid

        first = RateBox(lower=lower_1, upper=box.upper.copy(), ub=box.ub)
        second = RateBox(lower=box.lower.copy(), upper=upper_2, ub=min(box.ub, float(weights @ upper_2)))
        return first, second

    def reduce(self, box: RateBox, lb_best: float, weights: np.ndarray) -> RateBox:
        """
        Remove the parts of a box that cannot hold a point better than the
        incumbent. The lower corner is raised by beta_i and the upper corner
        then lowered by alpha_i; zero-length edges leave a coordinate as is.
        """
        lower, upper = box.lower, box.upper
        f_upper = float(weights @ upper)

        edges = upper - lower
        beta = np.ones_like(edges)
        positive = edges > 0
        beta[positive] = np.minimum(1.0, (f_upper - lb_best) / (weights[positive] * edges[positive]))
        beta = np.clip(beta, 0.0, 1.0)
        new_lower = upper - beta * edges

        f_lower = float(weights @ new_lower)
        edges = upper - new_lower
        alpha = np.ones_like(edges)
        positive = edges > 0
        alpha[positive] = np.minimum(1.0, (box.ub - f_lower) / (weights[positive] * edges[positive]))
        alpha = np.clip(alpha, 0.0, 1.0)
        new_upper = new_lower + alpha * edges

        return RateBox(lower=new_lower, upper=new_upper, ub=min(box.ub, float(weights @ new_upper)))

    def bound(
        self,
        box: RateBox,
        scenario: NetworkScenario,
        state: BrnbState,
        upper_bounds: Optional[np.ndarray] = None,
    ) -> BoundOutcome:
        """
        Bisect along the box diagonal for the last feasible point.

        Tightens ``ub`` using the first infeasible point ``lower + delta_up * phi``.
        The incumbent only moves to points certified with an interior margin,
        so the farthest certified point ``lower + delta * phi`` may trail
        ``delta_low`` by up to one bisection step.
        A box whose lower corner is infeasible gets ``ub = 0`` and is dropped.
        Undecided feasibility checks count as infeasible for the bisection and
        suppress the ``ub`` tightening.
        """
        weights = state.weights
        certified: Optional[float] = None

        def feasible(r: np.ndarray, delta: float) -> Optional[bool]:
            nonlocal certified
            state.sdr_solves += 1
            verdict, inside = sdr_service.feasibility_verdict(scenario, r, upper_bounds)
            if verdict and inside and (certified is None or delta > certified):
                certified = delta
            return verdict

        base = feasible(box.lower, 0.0)
        if not base:
            if base is None:
                logger.warning("Lower corner undecided; discarding box")
            return BoundOutcome(box=None, uncertain=base is None)

        length = box.diagonal
        if length <= 0:
            if certified is not None:
                self._update_incumbent(state, box.lower)
            return BoundOutcome(box=box.model_copy(update={"ub": min(box.ub, state.objective(box.upper))}),
                                feasible_point=box.lower if certified is not None else None)
        phi = box.edges / length

        uncertain = False
        top = feasible(box.upper, length)
        if top:
            delta_low = delta_up = length
        else:
            uncertain = top is None
            lo, hi = 0.0, length
            while hi - lo > state.eps_bi:
                mid = (lo + hi) / 2.0
                verdict = feasible(box.lower + mid * phi, mid)
                if verdict:
                    lo = mid
                else:
                    uncertain = uncertain or verdict is None
                    hi = mid
            delta_low, delta_up = lo, hi

        point = None
        if certified is not None:
            point = box.lower + certified * phi
            self._update_incumbent(state, point)

        ub = box.ub
        if not uncertain:
            candidates = []
            for i in range(box.lower.shape[0]):
                corner = box.upper.copy()
                corner[i] = box.lower[i] + delta_up * phi[i]
                candidates.append(state.objective(corner))
            ub = min(max(candidates), ub)
        else:
            logger.warning("Bisection hit an undecided check; ub left untightened")
        return BoundOutcome(
            box=box.model_copy(update={"ub": ub}),
            delta_low=delta_low,
            delta_up=delta_up,
            feasible_point=point,
            uncertain=uncertain,
        )

    def _update_incumbent(self, state: BrnbState, r: np.ndarray) -> None:
        value = state.objective(r)
        if value > state.lb_best:
            state.lb_best = value
            state.r_best = np.array(r, dtype=float)
            state.start = None
            state.discard_dominated()

    def initial_state(self, scenario: NetworkScenario, options: BrnbOptions) -> BrnbState:
        """
        Incumbent from the rates of a random power-feasible beamformer, one box [0, r^].
        The beamformer is kept until the incumbent first moves.
        """
        rng = np.random.default_rng(options.seed)
        start = scenario_service.random_feasible_solution(scenario, rng)
        r0 = scenario_service.user_rates(scenario, start)
        state = BrnbState(
            weights=np.asarray(scenario.weights, dtype=float),
            r_best=r0,
            start=start,
            lb_best=float(scenario.weights @ r0),
            eps=options.eps,
            eps_bi=options.eps_bi,
        )
        r_hat = scenario_service.rate_upper_bounds(scenario)
        state.push(RateBox(lower=np.zeros_like(r_hat), upper=r_hat, ub=state.objective(r_hat)))
        state.refresh_upper_bound()
        return state

    def step(self, state: BrnbState, scenario: NetworkScenario, rule: BranchRule, upper_bounds: np.ndarray) -> None:
        """One select-branch-reduce-bound round."""
        box = self.select_box(state)
        for child in self.branch(box, state.weights, rule):
            if child.ub < state.lb_best:
                continue
            reduced = self.reduce(child, state.lb_best, state.weights)
            outcome = self.bound(reduced, scenario, state, upper_bounds)
            if outcome.box is not None:
                state.push(outcome.box)
        state.iteration += 1
        state.refresh_upper_bound()

    def brnb_solve(
        self, scenario: NetworkScenario, options: Optional[BrnbOptions] = None
    ) -> tuple[BeamformingSolution, float, float, list[dict]]:
        """
        Global WSR optimum up to relative gap ``eps``.

        Returns the extracted beamformers, lb_best, UB and one trace row per
        iteration (iter, lb_best, UB, gap, boxes_open, sdr_solves).
        """
        options = options or BrnbOptions()
        started = time.perf_counter()
        work = scenario_service.normalized(scenario)
        upper_bounds = scenario_service.rate_upper_bounds(work)
        with tracer.start_as_current_span("brnb_solve"):
            try:
                state = self.initial_state(work, options)
                trace = [self._trace_row(state)]
                while state.gap > state.eps and state.iteration < options.max_iter:
                    if not state.queue:
                        break
                    self.step(state, work, options.rule, upper_bounds)
                    trace.append(self._trace_row(state))
                    logger.debug(
                        f"BRnB iter {state.iteration}: lb={state.lb_best:.6f} UB={state.UB:.6f} "
                        f"gap={state.gap:.3e} open={state.open_boxes}"
                    )
                if state.gap > state.eps:
                    logger.warning(f"BRnB stopped at iteration {state.iteration} with gap {state.gap:.3e}")

                if state.start is not None:
                    solution = state.start.model_copy(update={"solver": "brnb", "metadata": {"extraction": "start"}})
                else:
                    solution = sdr_service.extract_beamformers(work, state.r_best)
            except Exception as e:
                logger.error(f"Error in branch-reduce-and-bound: {str(e)}")
                raise

        elapsed = time.perf_counter() - started
        solution = solution.model_copy(
            update={
                "iterations": state.iteration,
                "wall_time_s": elapsed,
                "metadata": {
                    **solution.metadata,
                    "lb_best": state.lb_best,
                    "UB": state.UB,
                    "gap": state.gap,
                    "r_best": state.r_best.tolist(),
                    "sdr_solves": state.sdr_solves,
                    "rule": options.rule.value,
                },
            }
        )
        logger.info(
            f"Solver: brnb finished in {state.iteration} iterations, lb={state.lb_best:.6f} "
            f"UB={state.UB:.6f} gap={state.gap:.3e} ({elapsed:.2f}s)"
        )
        return solution, state.lb_best, state.UB, trace

    def _trace_row(self, state: BrnbState) -> dict:
        return {
            "iter": state.iteration,
            "lb_best": state.lb_best,
            "UB": state.UB,
            "gap": state.gap,
            "boxes_open": state.open_boxes,
            "sdr_solves": state.sdr_solves,
        }


# Create a singleton instance
brnb_service = BrnbService()
