import math

import numpy as np
import pytest

from app.core.exceptions import EmptyQueueError
from app.schemas.brnb import BranchRule, BrnbOptions, BrnbState, RateBox
from app.schemas.scenario import ScenarioConfig
from app.services.brnb_service import brnb_service
from app.services.scenario_service import scenario_service
from app.services.sdr_service import sdr_service


def _state(weights, lb_best=0.0):
    weights = np.asarray(weights, dtype=float)
    return BrnbState(weights=weights, r_best=np.zeros_like(weights), lb_best=lb_best)


def _box(lower, upper, ub):
    return RateBox(lower=np.asarray(lower, dtype=float), upper=np.asarray(upper, dtype=float), ub=ub)


def _grid_optimum(scenario, steps=400):
    """Best WSR of a single-antenna BS over a power grid p1 + p2 <= P."""
    P = scenario.powers[0]
    h = np.abs(scenario.channels[0][:, 0]) ** 2
    w = scenario.weights
    grid = np.linspace(0.0, P, steps + 1)
    p1, p2 = np.meshgrid(grid, grid, indexing="ij")
    feasible = p1 + p2 <= P + 1e-12
    r1 = np.log1p(h[0] * p1 / (h[0] * p2 + 1.0))
    r2 = np.log1p(h[1] * p2 / (h[1] * p1 + 1.0))
    return float(np.max(np.where(feasible, w[0] * r1 + w[1] * r2, -np.inf)))


def test_select_box_largest_bound_first():
    """Test that the box with the larger upper bound is popped first."""
    # Setup
    state = _state([1.0])
    state.push(_box([0.0], [1.0], 3.0))
    state.push(_box([0.0], [2.0], 7.0))

    # Verify
    assert brnb_service.select_box(state).ub == 7.0


def test_select_box_ties_go_to_first_inserted():
    """Test the insertion-order tie rule."""
    # Setup
    state = _state([1.0])
    state.push(_box([0.0], [1.0], 5.0))
    state.push(_box([0.5], [1.0], 5.0))

    # Verify
    assert brnb_service.select_box(state).lower[0] == 0.0


def test_select_box_empty_queue():
    """Test that an empty queue raises EmptyQueueError."""
    with pytest.raises(EmptyQueueError):
        brnb_service.select_box(_state([1.0]))


def test_push_rejects_dominated_box():
    """Test that a box whose bound is below the incumbent is not queued."""
    # Setup
    state = _state([1.0], lb_best=2.0)

    # Verify
    assert not state.push(_box([0.0], [1.0], 1.0))
    assert state.open_boxes == 0


def test_branch_longest_edge():
    """Test the midpoint split of the longest edge."""
    # Setup
    box = _box([0.0, 0.0], [2.0, 1.0], 3.0)

    # Verify
    first, second = brnb_service.branch(box, np.ones(2), BranchRule.LONGEST)
    assert first.lower.tolist() == [1.0, 0.0] and first.upper.tolist() == [2.0, 1.0]
    assert second.lower.tolist() == [0.0, 0.0] and second.upper.tolist() == [1.0, 1.0]
    assert first.ub == 3.0
    assert second.ub == pytest.approx(2.0)


def test_branch_weighted_edge():
    """Test that the weighted rule splits the edge with the largest w_i * length."""
    # Setup
    box = _box([0.0, 0.0], [2.0, 1.0], 1.2)

    # Verify
    first, _ = brnb_service.branch(box, np.array([0.1, 1.0]), BranchRule.WEIGHTED)
    assert first.lower.tolist() == [0.0, 0.5]


def test_reduce_raises_lower_corner():
    """Test the reduction of [0, 1]^2 against an incumbent of 1.5."""
    # Setup
    box = _box([0.0, 0.0], [1.0, 1.0], 2.0)

    # Verify
    reduced = brnb_service.reduce(box, 1.5, np.ones(2))
    assert reduced.lower == pytest.approx([0.5, 0.5])
    assert reduced.upper == pytest.approx([1.0, 1.0])


def test_reduce_keeps_every_improving_point(rng):
    """Test that no point beating the incumbent is cut away."""
    for _ in range(50):
        # Setup
        weights = rng.uniform(0.1, 1.0, 3)
        upper = rng.uniform(0.5, 2.0, 3)
        box = _box(np.zeros(3), upper, float(weights @ upper))
        lb = 0.6 * float(weights @ upper)
        reduced = brnb_service.reduce(box, lb, weights)

        # Verify
        points = rng.uniform(0.0, 1.0, (200, 3)) * upper
        better = points[points @ weights >= lb]
        inside = np.all((better >= reduced.lower - 1e-12) & (better <= reduced.upper + 1e-12), axis=1)
        assert np.all(inside)


def test_check_feasibility_trivial_cases(toy_scenario):
    """Test zero targets and targets above the interference-free bound."""
    # Setup
    bounds = scenario_service.rate_upper_bounds(toy_scenario)

    # Verify
    assert sdr_service.check_feasibility(toy_scenario, np.zeros(2)) is True
    assert sdr_service.check_feasibility(toy_scenario, bounds + np.array([0.1, 0.0])) is False


def test_check_feasibility_single_user(single_user_scenario):
    """Test the verdict on both sides of log 2 for h = 1, P = 1."""
    assert sdr_service.check_feasibility(single_user_scenario, np.array([0.6])) is True
    assert sdr_service.check_feasibility(single_user_scenario, np.array([0.7])) is False


def test_check_feasibility_matches_power_control(scalar_two_user_scenario, rng):
    """Test SDR verdicts against the closed-form two-user power split."""
    # Setup
    P = scalar_two_user_scenario.powers[0]
    g = np.abs(scalar_two_user_scenario.channels[0][:, 0]) ** 2
    bounds = scenario_service.rate_upper_bounds(scalar_two_user_scenario)
    checked = 0
    for _ in range(40):
        rates = rng.uniform(0.05, 1.0, size=2) * bounds
        gamma = np.expm1(rates)
        coupling = gamma[0] * gamma[1]
        if abs(coupling - 1.0) < 0.05:
            continue
        total = np.inf
        if coupling < 1.0:
            p1 = (gamma[0] / g[0] + coupling / g[1]) / (1.0 - coupling)
            p2 = (gamma[1] / g[1] + coupling / g[0]) / (1.0 - coupling)
            total = p1 + p2
            if abs(total - P) < 0.05 * P:
                continue

        # Verify
        assert sdr_service.check_feasibility(scalar_two_user_scenario, rates) is bool(total <= P)
        checked += 1
    assert checked >= 10


def test_bound_moves_incumbent_only_to_certified_points(single_user_scenario):
    """Test that a box ending on the rate frontier never puts the incumbent on it."""
    # Setup
    state = _state([1.0])
    state.eps_bi = 1e-3
    box = _box([0.0], [math.log(2.0)], math.log(2.0))

    # Verify
    outcome = brnb_service.bound(box, single_user_scenario, state)
    assert outcome.box is not None
    assert state.lb_best < math.log(2.0)
    if state.lb_best > 0:
        assert sdr_service.feasibility_verdict(single_user_scenario, state.r_best) == (True, True)


def test_bound_single_user_bisection(single_user_scenario):
    """Test that bisection locates the rate frontier log 2 within eps_bi."""
    # Setup
    state = _state([1.0])
    state.eps_bi = 1e-3
    box = _box([0.0], [1.0], 1.0)

    # Verify
    outcome = brnb_service.bound(box, single_user_scenario, state)
    assert outcome.box is not None
    assert outcome.delta_low == pytest.approx(math.log(2.0), abs=2e-3)
    assert outcome.box.ub >= math.log(2.0) - 1e-9
    assert state.lb_best == pytest.approx(math.log(2.0), abs=2e-3)


def test_extract_beamformers_single_user_mrt():
    """Test that extraction for one user meets the SINR target to 1e-6."""
    # Setup
    scenario = scenario_service.build_scenario(
        channels=[np.array([[1.0 + 0.0j, 0.0 + 1.0j]])], powers=[1.0], noise_power=1.0
    )
    target = math.log(3.0) - 1e-4

    # Verify
    solution = sdr_service.extract_beamformers(scenario, np.array([target]))
    assert scenario_service.sinr(scenario, solution, 0) >= np.expm1(target) * (1.0 - 1e-6)
    assert solution.metadata["targets_met"] is True
    assert solution.metadata["extraction"] == "min_trace"
    assert scenario_service.check_power_feasible(scenario, solution, tol=1e-6)


def test_extract_beamformers_through_extraction_cqp():
    """Test the higher-rank path by forcing every block through the CQP."""
    # Setup
    scenario = scenario_service.build_scenario(
        channels=[np.array([[1.0 + 0.0j, 0.0 + 1.0j]])], powers=[1.0], noise_power=1.0
    )
    target = math.log(3.0) - 1e-3

    # Verify
    solution = sdr_service.extract_beamformers(scenario, np.array([target]), rank_tol=-1.0)
    assert solution.metadata["cqp_blocks"] == 1
    assert solution.metadata["targets_met"] is True


def test_extraction_cqp_rank_two_covariance():
    """Test that the CQP beats a rank-two covariance's desired power within its leakage caps."""
    # Setup
    scenario = scenario_service.build_scenario(
        channels=[np.array([[1.0 + 0.0j, 0.0 + 0.0j], [0.0 + 0.0j, 1.0 + 0.0j]])],
        powers=[1.0],
        noise_power=1.0,
    )
    V = 0.5 * np.eye(2, dtype=complex)
    H = scenario.channels[0]

    # Verify
    v = sdr_service.extraction_cqp(scenario, 0, 0, V)
    assert np.linalg.matrix_rank(V) == 2
    assert abs(H[0] @ v) ** 2 >= np.real(H[0] @ V @ H[0].conj()) - 1e-6
    assert abs(H[1] @ v) ** 2 <= np.real(H[1] @ V @ H[1].conj()) + 1e-6
    assert np.linalg.norm(v) ** 2 <= np.real(np.trace(V)) + 1e-6
    assert abs(H[0] @ v) ** 2 == pytest.approx(1.0, abs=1e-5)


def test_brnb_solve_single_user(single_user_scenario):
    """Test the global optimum log 2 for one user."""
    # Setup
    options = BrnbOptions(eps=0.01)

    # Verify
    solution, lb, ub, trace = brnb_service.brnb_solve(single_user_scenario, options)
    assert lb == pytest.approx(math.log(2.0), rel=0.02)
    assert ub >= lb
    assert trace[0]["iter"] == 0


def test_brnb_solve_matches_power_grid(scalar_two_user_scenario):
    """Test the two-user scalar instance against a dense power-split grid."""
    # Setup
    options = BrnbOptions(eps=0.02)
    best = _grid_optimum(scalar_two_user_scenario)

    # Verify
    solution, lb, ub, trace = brnb_service.brnb_solve(scalar_two_user_scenario, options)
    assert ub >= best - 1e-3
    assert lb >= best / 1.02 - 1e-3
    assert scenario_service.weighted_sum_rate(scalar_two_user_scenario, solution) >= lb - 1e-3
    assert all(a["lb_best"] <= b["lb_best"] for a, b in zip(trace, trace[1:]))
    assert all(b["UB"] <= a["UB"] + 1e-12 for a, b in zip(trace, trace[1:]))
    assert trace[-1]["gap"] <= 0.02 or trace[-1]["boxes_open"] == 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_brnb_solve_generated_scenarios(seed):
    """Test that BRnB finishes on generated multi-antenna scenarios with valid beamformers."""
    # Setup
    config = ScenarioConfig(num_small_bs=2, num_users=2, antennas_macro=4, antennas_small=2, rng_seed=seed)
    scenario = scenario_service.generate_scenario(config)
    options = BrnbOptions(eps=0.05, eps_bi=1e-2, max_iter=40, seed=seed)

    # Verify
    solution, lb, ub, trace = brnb_service.brnb_solve(scenario, options)
    assert ub >= lb > 0
    assert scenario_service.check_power_feasible(scenario, solution, tol=1e-6)
    if solution.metadata["extraction"] != "start":
        assert solution.metadata["targets_met"] is True
    assert scenario_service.weighted_sum_rate(scenario, solution) >= lb * (1.0 - 1e-5)
    assert all(b["UB"] <= a["UB"] + 1e-12 for a, b in zip(trace, trace[1:]))
    assert all(b["lb_best"] >= a["lb_best"] for a, b in zip(trace, trace[1:]))
