import numpy as np
import pytest
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import SimpleSpanProcessor
from opentelemetry.sdk.trace.export.in_memory_span_exporter import InMemorySpanExporter

from app.core.conic import solve_with_retry
from app.core.exceptions import ConfigurationError, InvariantViolation
from app.schemas.admm import AdmmOptions, MecAssignment, Message, MessageType, ResidualReport
from app.schemas.inap import InApOptions
from app.schemas.scenario import ScenarioConfig
from app.services import admm_service as admm_module
from app.services.admm_service import (
    adaptive_penalty,
    admm_service,
    global_update,
    message_accounting,
    multiplier_update,
    residuals,
)
from app.services.inap_service import inap_service
from app.services.scenario_service import scenario_service
from app.worker.actors import Coordinator, EdgeServer, InProcessTransport


def _report(primal, dual, eps_pri=1.0, eps_dua=1.0):
    return ResidualReport(server=1, primal=primal, dual=dual, eps_pri=eps_pri, eps_dua=eps_dua, eps_rel=1e-3)


def _inner_records(outer, inner, server, num_users, kinds):
    return [
        Message(outer_iter=outer, inner_iter=inner, type=kind, user=i, server=server, payload=(1.0,))
        for kind in kinds
        for i in range(num_users)
    ]


def test_global_update_closed_form():
    """Test phi = (xi + m1 pi~ + rho + m_d pi^) / (m1 + m_d) for one user and one edge."""
    # Setup
    xi = np.array([[[1.0, -1.0]]])
    pi_local = np.array([[[2.0, 4.0]]])
    rho, m_d, pi_hat = np.array([0.5, 0.5]), 3.0, np.array([1.0, 0.0])
    partial = (rho + m_d * pi_hat)[None, None, :]

    # Verify
    phi = global_update(xi, 1.0, pi_local, partial, np.array([m_d]))
    assert phi[0, 0] == pytest.approx([(1.0 + 2.0 + 0.5 + 3.0) / 4.0, (-1.0 + 4.0 + 0.5) / 4.0])


def test_global_update_is_consensus_fixed_point():
    """Test that equal copies with zero multipliers give back the common value."""
    # Setup
    pi = np.full((2, 1, 2), 0.7)

    # Verify
    phi = global_update(np.zeros_like(pi), 2.0, pi, 5.0 * pi, np.array([5.0]))
    assert np.allclose(phi, pi)


def test_multiplier_update():
    """Test the dual ascent step mult + m (pi - phi)."""
    assert multiplier_update(np.array([1.0]), 2.0, np.array([3.0]), np.array([1.0])) == pytest.approx([5.0])


def test_residuals_norms_and_tolerances():
    """Test primal, dual and relative tolerances against hand-computed values."""
    # Setup
    pi = np.array([3.0, 4.0])
    phi = np.array([0.0, 0.0])
    phi_prev = np.array([1.0, 0.0])

    # Verify
    report = residuals(2, pi, phi, phi_prev, np.array([0.0, 2.0]), 2.0, 0.1)
    assert report.primal == pytest.approx(5.0)
    assert report.dual == pytest.approx(2.0)
    assert report.eps_pri == pytest.approx(0.5)
    assert report.eps_dua == pytest.approx(0.2)
    assert not report.converged


def test_residual_ratio_with_zero_tolerance():
    """Test that a zero tolerance gives ratio 0 for a zero norm and inf otherwise."""
    assert _report(0.0, 0.0, eps_pri=0.0, eps_dua=0.0).primal_ratio == 0.0
    assert _report(1.0, 0.0, eps_pri=0.0, eps_dua=0.0).primal_ratio == float("inf")


def test_adaptive_penalty_rules():
    """Test grow, shrink, hold and freeze."""
    assert adaptive_penalty(1.0, _report(10.0, 1.0), 2.0, 5.0, 1, 50, 1.0) == 2.0
    assert adaptive_penalty(1.0, _report(1.0, 10.0), 2.0, 5.0, 1, 50, 1.0) == 0.5
    assert adaptive_penalty(1.0, _report(2.0, 1.0), 2.0, 5.0, 1, 50, 1.0) == 1.0
    assert adaptive_penalty(8.0, _report(10.0, 1.0), 2.0, 5.0, 50, 50, 1.0) == 1.0


def test_message_accounting_counts_stages():
    """Test per-stage counts and that stop flags are left out."""
    # Setup
    N, D = 2, 2
    inner = [MessageType.GLOBAL_PARTIAL_Q, MessageType.GLOBAL_PARTIAL_Y, MessageType.GLOBAL_Q, MessageType.GLOBAL_Y]
    ledger = _inner_records(1, 0, 1, N, [MessageType.INTERFERENCE_U, MessageType.SUM_A])
    ledger += _inner_records(1, 1, 1, N, inner)
    ledger.append(Message(outer_iter=1, inner_iter=1, type=MessageType.STOP_FLAG, user=0, server=1, payload=(1.0,)))

    # Verify
    rows = message_accounting(ledger, N, D)
    assert {(r["inner_iter"], r["stage"]): r["scalars"] for r in rows} == {(0, "outer"): 4, (1, "inner"): 8}


def test_message_accounting_rejects_short_iteration():
    """Test that an inner iteration missing records violates the count invariant."""
    # Setup
    ledger = _inner_records(1, 1, 1, 2, [MessageType.GLOBAL_Q, MessageType.GLOBAL_Y])

    # Verify
    with pytest.raises(InvariantViolation):
        message_accounting(ledger, 2, 2)


def test_validate_assignment_errors(small_scenario):
    """Test empty servers, non-partitions and a misplaced macro BS."""
    for servers in ([[0, 1], []], [[0, 1]], [[0, 1], [1, 2]], [[1, 2], [0]]):
        with pytest.raises(ConfigurationError):
            admm_service.validate_assignment(small_scenario, MecAssignment(servers=servers))


def test_sector_assignment(small_scenario):
    """Test that sectors cover every BS with the macro BS alone on server 1."""
    # Verify
    assert admm_service.sector_assignment(small_scenario, 1).servers == [[0, 1, 2]]
    assignment = admm_service.sector_assignment(small_scenario, 3)
    assert assignment.servers[0] == [0]
    assert sorted(k for s in assignment.servers[1:] for k in s) == [1, 2]
    with pytest.raises(ConfigurationError):
        admm_service.sector_assignment(small_scenario, 4)


def test_parse_assignment():
    """Test the semicolon and comma server syntax."""
    # Verify
    assert admm_service.parse_assignment("0,1;2;3,4").servers == [[0, 1], [2], [3, 4]]
    with pytest.raises(ConfigurationError):
        admm_service.parse_assignment("0;x")


def test_single_server_matches_centralized_step(small_scenario):
    """Test that one server and one outer iteration reproduce one centralized approximation step."""
    # Setup
    assignment = MecAssignment(servers=[[0, 1, 2]])
    options = AdmmOptions(max_outer=1, seed=3)

    # Verify
    solution, trace, ledger = admm_service.admm_solve(small_scenario, assignment, options)
    _, inap_trace = inap_service.inap_solve(small_scenario, InApOptions(max_iter=1, seed=3))
    assert ledger == []
    assert len(trace) == 1
    assert trace[0]["wsr"] == pytest.approx(inap_trace[1]["wsr"], rel=1e-5)


def test_distributed_solve_keeps_message_invariant(small_scenario):
    """Test a three-server run: counts per inner iteration, feasibility and trace columns."""
    # Setup
    assignment = MecAssignment(servers=[[0], [1], [2]])
    options = AdmmOptions(max_inner=4, max_outer=2, seed=1, reference_wsr=1.0)
    N = small_scenario.num_users

    # Verify
    solution, trace, ledger = admm_service.admm_solve(small_scenario, assignment, options)
    rows = message_accounting(ledger, N, 3)
    inner_totals = {}
    for r in rows:
        if r["stage"] == "inner":
            key = (r["outer_iter"], r["inner_iter"])
            inner_totals[key] = inner_totals.get(key, 0) + r["scalars"]
    assert set(inner_totals.values()) == {4 * N * 2}
    assert scenario_service.check_power_feasible(small_scenario, solution, tol=1e-5)
    assert solution.metadata["scalars_exchanged"] == sum(r["scalars"] for r in rows)
    assert all(row["messages"] <= next_row["messages"] for row, next_row in zip(trace, trace[1:]))
    assert set(trace[0]) == {"outer_iter", "inner_iter", "wsr", "rel_gap", "max_rel_residual", "messages"}
    assert max(r["inner_iter"] for r in trace) <= 4


def test_adaptive_penalty_run_completes(small_scenario):
    """Test that residual balancing runs through the protocol without breaking the count invariant."""
    # Setup
    assignment = admm_service.sector_assignment(small_scenario, 2)
    options = AdmmOptions(max_inner=3, max_outer=1, adaptive=True)

    # Verify
    solution, trace, ledger = admm_service.admm_solve(small_scenario, assignment, options)
    assert len(trace) <= 3
    assert np.isnan(trace[0]["rel_gap"])
    assert solution.metadata["outer_iterations"] == 1


def test_multiprocess_matches_in_process(small_scenario):
    """Test that the pipe transport reproduces the in-process run exactly."""
    # Setup
    assignment = MecAssignment(servers=[[0], [1, 2]])
    options = AdmmOptions(max_inner=2, max_outer=1, seed=5)

    # Verify
    local, local_trace, _ = admm_service.admm_solve(small_scenario, assignment, options)
    remote, remote_trace, _ = admm_service.admm_solve(
        small_scenario, assignment, options.model_copy(update={"multiprocess": True})
    )
    assert [r["wsr"] for r in remote_trace] == [r["wsr"] for r in local_trace]
    for v1, v2 in zip(local.beamformers, remote.beamformers):
        assert np.array_equal(v1, v2)


def _centralized_step(scenario, seed):
    work = scenario_service.power_normalized(scenario)
    model = inap_service.linearize(inap_service.initial_point(work, seed), work)
    program = inap_service.build_cqp(model, work)
    solution = solve_with_retry(program)
    return work, model, inap_service.read_point(program, solution, work), solution


def _server1_objective(state, mu, q_tilde, y_tilde):
    gap = np.stack([q_tilde, y_tilde], axis=-1) - state.phi
    return float(
        state.w_tilde @ (1.0 / np.sqrt(1.0 + mu)) + np.sum(state.xi * gap) + 0.5 * state.penalty * np.sum(gap**2)
    )


def _serverd_objective(state, q_hat, y_hat):
    gap = np.stack([q_hat, y_hat], axis=-1) - state.phi
    return float(np.sum(state.rho * gap) + 0.5 * state.penalty * np.sum(gap**2))


def _mix(first, second, t):
    return [(1.0 - t) * a + t * b for a, b in zip(first, second)]


def test_inner_stage_uncapped_by_default():
    """Test that no inner iteration count ends the stage unless a cap is given."""
    assert not AdmmOptions().inner_done(10**9)
    assert not AdmmOptions(max_inner=3).inner_done(2)
    assert AdmmOptions(max_inner=3).inner_done(3)


def test_global_update_minimizes_over_a_scan(rng):
    """Test the closed form against a dense scan of the augmented Lagrangian in each entry."""
    # Setup
    xi = rng.normal(size=(2, 2, 2))
    pi_local = rng.normal(size=(2, 2, 2))
    rho = rng.normal(size=(2, 2, 2))
    pi_hat = rng.normal(size=(2, 2, 2))
    m1, m_d = 1.5, np.array([0.5, 3.0])
    partial = rho + m_d[None, :, None] * pi_hat
    grid = np.linspace(-10.0, 10.0, 200_001)

    # Verify
    phi = global_update(xi, m1, pi_local, partial, m_d)
    for idx in np.ndindex(phi.shape):
        md = m_d[idx[1]]
        values = (
            xi[idx] * (pi_local[idx] - grid)
            + 0.5 * m1 * (pi_local[idx] - grid) ** 2
            + rho[idx] * (pi_hat[idx] - grid)
            + 0.5 * md * (pi_hat[idx] - grid) ** 2
        )
        assert phi[idx] == pytest.approx(grid[np.argmin(values)], abs=2e-4)


def test_lifted_centralized_point_is_consensus_feasible(small_scenario):
    """Test that copying the centralized sums to every server keeps server 1 feasible at the same objective."""
    # Setup
    work, model, point, solution = _centralized_step(small_scenario, 3)
    assignment = MecAssignment(servers=[[0], [1], [2]])

    # Verify
    lifted = admm_service.lift_centralized(work, assignment, model, point)
    st = lifted.coordinator
    assert lifted.primal_residual == 0.0
    own = admm_service.server_sums(work, point.beamformers, model.g, [0])
    sinr_row = own[:, 1] + st.y_tilde.sum(axis=1) - st.A_total * st.u - st.mu
    slack = st.u - work.noise_power - st.q_tilde.sum(axis=1) - own[:, 0]
    assert np.all(sinr_row >= -1e-6)
    assert np.all(slack >= -1e-6)
    objective = _server1_objective(st, st.mu, st.q_tilde, st.y_tilde)
    assert objective == pytest.approx(solution.primal_objective, rel=1e-5)

    assert admm_service.server1_update(st, work, assignment.servers[0])
    assert _server1_objective(st, st.mu, st.q_tilde, st.y_tilde) <= objective + 1e-6


def test_server1_update_beats_random_feasible_points(small_scenario, rng):
    """Test that the returned block is no worse than random points of server 1's feasible set."""
    # Setup
    work, model, point, _ = _centralized_step(small_scenario, 1)
    assignment = MecAssignment(servers=[[0], [1], [2]])
    st = admm_service.lift_centralized(work, assignment, model, point).coordinator
    st.xi = rng.normal(scale=0.1, size=st.xi.shape)
    st.phi = st.phi * (1.0 + 0.05 * rng.normal(size=st.phi.shape))
    base = [v.copy() for v in st.beamformers]

    # Verify
    assert admm_service.server1_update(st, work, [0])
    best = _server1_objective(st, st.mu, st.q_tilde, st.y_tilde)
    checked = 0
    for _ in range(100):
        other = scenario_service.random_feasible_solution(work, rng).beamformers
        beamformers = _mix(base, other, rng.uniform(0.0, 0.5))
        own = admm_service.server_sums(work, beamformers, st.g, [0])
        q_tilde = st.phi[:, :, 0] + 0.1 * rng.normal(size=st.q_tilde.shape)
        y_tilde = st.phi[:, :, 1] + 0.1 * rng.normal(size=st.y_tilde.shape)
        u = work.noise_power + q_tilde.sum(axis=1) + own[:, 0]
        mu = own[:, 1] + y_tilde.sum(axis=1) - st.A_total * u
        if np.any(mu < 0) or np.any(u - work.noise_power - q_tilde.sum(axis=1) < 0):
            continue
        checked += 1
        assert best <= _server1_objective(st, mu, q_tilde, y_tilde) + 1e-6
    assert checked > 0


def test_serverd_update_beats_random_feasible_points(small_scenario, rng):
    """Test that an edge's returned sums are no worse than random points of its feasible set."""
    # Setup
    work, model, point, _ = _centralized_step(small_scenario, 2)
    assignment = MecAssignment(servers=[[0], [1, 2]])
    edge = admm_service.lift_centralized(work, assignment, model, point).edges[0]
    edge.rho = rng.normal(scale=0.1, size=edge.rho.shape)
    edge.phi = edge.phi * (1.0 + 0.05 * rng.normal(size=edge.phi.shape))
    base = [v.copy() for v in edge.beamformers]

    # Verify
    assert admm_service.serverd_update(edge, work, [1, 2])
    best = _serverd_objective(edge, edge.q_hat, edge.y_hat)
    for _ in range(100):
        other = scenario_service.random_feasible_solution(work, rng).beamformers
        sums = admm_service.server_sums(work, _mix(base, other, rng.uniform()), edge.g, [1, 2])
        q_hat = sums[:, 0] + np.abs(rng.normal(scale=0.1, size=2))
        y_hat = sums[:, 1] - np.abs(rng.normal(scale=0.1, size=2))
        assert best <= _serverd_objective(edge, q_hat, y_hat) + 1e-6


def test_message_counts_do_not_depend_on_antennas():
    """Test that doubling the small-BS antenna count leaves every per-iteration count unchanged."""
    # Setup
    assignment = MecAssignment(servers=[[0], [1], [2]])
    options = AdmmOptions(max_inner=2, max_outer=1, seed=2)
    counts = []
    for antennas in (1, 2):
        config = ScenarioConfig(num_small_bs=2, num_users=2, antennas_macro=2, antennas_small=antennas, rng_seed=4)
        _, _, ledger = admm_service.admm_solve(scenario_service.generate_scenario(config), assignment, options)
        counts.append({(r["server"], r["stage"], r["scalars"]) for r in message_accounting(ledger, 2, 3)})

    # Verify
    expected = {(d, stage, n) for d in (1, 2) for stage, n in (("inner", 8), ("outer", 4))}
    assert counts[0] == counts[1] == expected


def test_adaptive_freeze_counts_all_inner_iterations(small_scenario):
    """Test that the penalty freeze counts inner iterations across outer iterations on every server."""
    # Setup
    assignment = MecAssignment(servers=[[0], [1], [2]])
    options = AdmmOptions(max_inner=2, max_outer=3, outer_window=5, adaptive=True, freeze_after=3, m0=1.0)
    work = scenario_service.power_normalized(small_scenario)
    coordinator_state, edge_states = admm_service.initial_states(
        work, assignment, options, inap_service.initial_point(work, 0)
    )
    edges = [EdgeServer(work, assignment.servers[s.server], options, s) for s in edge_states]
    coordinator = Coordinator(work, assignment, options, coordinator_state, InProcessTransport(edges))

    # Verify
    rows = coordinator.run()
    assert len(rows) >= 3
    assert coordinator.inner_total == len(rows)
    assert all(edge.inner_total == len(rows) for edge in edges)
    assert coordinator.state.penalty == 1.0
    assert all(edge.state.penalty == 1.0 for edge in edges)


@pytest.mark.parametrize("servers", [[[0], [1, 2]], [[0], [1], [2]]], ids=["two_servers", "three_servers"])
def test_uncapped_distributed_solve_matches_centralized(servers):
    """Test that the uncapped inner stage ends within 1% of the centralized approximation."""
    # Setup
    scenario = scenario_service.generate_scenario(ScenarioConfig(num_small_bs=2, num_users=2, rng_seed=0))
    central, _ = inap_service.inap_solve(scenario, InApOptions(seed=0))
    reference = scenario_service.weighted_sum_rate(scenario, central)
    options = AdmmOptions(seed=0, reference_wsr=reference)

    # Verify
    solution, trace, _ = admm_service.admm_solve(scenario, MecAssignment(servers=servers), options)
    wsr = scenario_service.weighted_sum_rate(scenario, solution)
    assert (reference - wsr) / reference <= 1e-2
    assert trace[-1]["max_rel_residual"] <= 1.0
    assert scenario_service.check_power_feasible(scenario, solution, tol=1e-5)
    assert solution.metadata["primal_residual"] >= 0.0


def test_admm_solve_records_a_span(small_scenario, monkeypatch):
    """Test that a distributed solve emits its span with the server count."""
    # Setup
    exporter = InMemorySpanExporter()
    provider = TracerProvider()
    provider.add_span_processor(SimpleSpanProcessor(exporter))
    monkeypatch.setattr(admm_module, "tracer", provider.get_tracer(__name__))

    # Verify
    admm_service.admm_solve(small_scenario, MecAssignment(servers=[[0], [1, 2]]), AdmmOptions(max_inner=1, max_outer=1))
    spans = exporter.get_finished_spans()
    assert [span.name for span in spans] == ["admm_solve"]
    assert spans[0].attributes["ncjt.num_servers"] == 2
