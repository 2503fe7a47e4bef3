import math

import numpy as np
import pytest

from app.core.exceptions import ConfigurationError, StructuralError
from app.schemas.scenario import BeamformingSolution, ScenarioConfig
from app.services.scenario_service import dbm_to_watts, noise_power_watts, scenario_service


def _brute_force_sinr(scenario, beamformers, i):
    desired = sum(abs(scenario.channels[k][i] @ beamformers[k][i]) ** 2 for k in range(scenario.num_bs))
    interference = sum(
        abs(scenario.channels[k][i] @ beamformers[k][j]) ** 2
        for k in range(scenario.num_bs)
        for j in range(scenario.num_users)
        if j != i
    )
    return desired / (interference + scenario.noise_power[i])


def test_generate_scenario_is_deterministic(small_config):
    """Test that the same config and seed reproduce identical channels."""
    # Setup
    first = scenario_service.generate_scenario(small_config)
    second = scenario_service.generate_scenario(small_config)

    # Verify
    for h1, h2 in zip(first.channels, second.channels):
        assert np.array_equal(h1, h2)
    assert np.array_equal(first.user_positions, second.user_positions)


def test_generate_scenario_geometry_and_budgets(small_scenario):
    """Test positions, powers and noise against the simulation setup."""
    # Verify
    radii = np.linalg.norm(small_scenario.bs_positions[1:], axis=1)
    assert np.all(radii >= 200.0) and np.all(radii <= 500.0)
    assert np.all(np.linalg.norm(small_scenario.user_positions, axis=1) <= 500.0)
    assert small_scenario.powers[0] == pytest.approx(10.0)
    assert small_scenario.powers[1] == pytest.approx(1.0)
    assert small_scenario.noise_power[0] == pytest.approx(noise_power_watts(-174.0, 1e6))
    assert small_scenario.antennas == [2, 1, 1]


def test_unit_conversions():
    """Test dBm and noise density conversions."""
    assert dbm_to_watts(30.0) == pytest.approx(1.0)
    assert dbm_to_watts(40.0) == pytest.approx(10.0)
    assert noise_power_watts(-174.0, 1e6) == pytest.approx(10 ** (-14.4), rel=1e-12)


def test_generate_scenario_rejects_bad_annulus():
    """Test that an annulus wider than the region is a configuration error."""
    # Setup
    config = ScenarioConfig(num_small_bs=1, num_users=1, region_radius_m=100.0, small_bs_annulus_inner_m=200.0)

    # Verify
    with pytest.raises(ConfigurationError):
        scenario_service.generate_scenario(config)


def test_generate_scenario_rejects_wrong_weight_count():
    """Test that the weight vector must match the user count."""
    with pytest.raises(ConfigurationError):
        scenario_service.generate_scenario(ScenarioConfig(num_small_bs=1, num_users=3, weights=[1.0, 1.0]))


def test_sinr_single_user_single_antenna(single_user_scenario):
    """Test SINR of a single user without interference: |h v|^2 / sigma^2."""
    # Setup
    solution = BeamformingSolution(beamformers=[np.array([[0.5 + 0.5j]])])

    # Verify
    assert scenario_service.sinr(single_user_scenario, solution, 0) == pytest.approx(0.5)


def test_sinr_matches_brute_force(toy_scenario, rng):
    """Test vectorized SINR against a direct double sum."""
    for _ in range(5):
        # Setup
        solution = scenario_service.random_feasible_solution(toy_scenario, rng)

        # Verify
        for i in range(toy_scenario.num_users):
            expected = _brute_force_sinr(toy_scenario, solution.beamformers, i)
            assert scenario_service.sinr(toy_scenario, solution, i) == pytest.approx(expected, rel=1e-12)


def test_sinr_rejects_bad_user_index(toy_scenario):
    """Test that an out-of-range user is a structural error."""
    with pytest.raises(StructuralError):
        scenario_service.sinr(toy_scenario, scenario_service.zero_solution(toy_scenario), 5)


def test_weighted_sum_rate_zero_and_scaling(toy_scenario, rng):
    """Test WSR of the zero solution and its invariance under noise normalization."""
    # Setup
    solution = scenario_service.random_feasible_solution(toy_scenario, rng)
    normalized = scenario_service.normalized(toy_scenario)

    # Verify
    assert scenario_service.weighted_sum_rate(toy_scenario, scenario_service.zero_solution(toy_scenario)) == 0.0
    assert scenario_service.weighted_sum_rate(normalized, solution) == pytest.approx(
        scenario_service.weighted_sum_rate(toy_scenario, solution), rel=1e-12
    )
    assert np.allclose(normalized.noise_power, 1.0)


def test_power_normalized_bounds_received_power(small_scenario, rng):
    """Test that power normalization keeps SINR and puts received power plus noise below 1."""
    # Setup
    scaled = scenario_service.power_normalized(small_scenario)

    # Verify
    for _ in range(10):
        solution = scenario_service.random_feasible_solution(small_scenario, rng)
        assert scenario_service.sinr_all(scaled, solution) == pytest.approx(
            scenario_service.sinr_all(small_scenario, solution), rel=1e-10
        )
        received = scenario_service.received_power(scaled, solution).sum(axis=1) + scaled.noise_power
        assert np.all(received <= 1.0 + 1e-12)


def test_weighted_sum_rate_rejects_shape_mismatch(toy_scenario):
    """Test that a solution with the wrong block shapes is rejected."""
    # Setup
    bad = BeamformingSolution(beamformers=[np.zeros((2, 3), dtype=complex), np.zeros((2, 1), dtype=complex)])

    # Verify
    with pytest.raises(StructuralError):
        scenario_service.weighted_sum_rate(toy_scenario, bad)


def test_rate_upper_bounds_single_user(single_user_scenario):
    """Test the interference-free bound log(1 + P |h|^2 / sigma^2)."""
    assert scenario_service.rate_upper_bounds(single_user_scenario)[0] == pytest.approx(math.log(2.0))


def test_rate_upper_bounds_dominate_random_solutions(toy_scenario, rng):
    """Test that no power-feasible solution beats the per-user bounds."""
    # Setup
    bounds = scenario_service.rate_upper_bounds(toy_scenario)

    # Verify
    for _ in range(100):
        solution = scenario_service.random_feasible_solution(toy_scenario, rng)
        assert np.all(scenario_service.user_rates(toy_scenario, solution) <= bounds + 1e-12)


def test_check_power_feasible(toy_scenario, rng):
    """Test the per-BS budget check on the zero, random and over-budget solutions."""
    # Setup
    solution = scenario_service.random_feasible_solution(toy_scenario, rng)
    full = [v * math.sqrt(p / np.sum(np.abs(v) ** 2)) for v, p in zip(solution.beamformers, toy_scenario.powers)]
    over = BeamformingSolution(beamformers=[1.01 * v for v in full])

    # Verify
    assert scenario_service.check_power_feasible(toy_scenario, scenario_service.zero_solution(toy_scenario))
    assert scenario_service.check_power_feasible(toy_scenario, solution)
    assert scenario_service.check_power_feasible(toy_scenario, BeamformingSolution(beamformers=full))
    assert not scenario_service.check_power_feasible(toy_scenario, over)


def test_nearest_bs_mask_and_masked_start(small_scenario, rng):
    """Test that the CB mask picks one BS per user and random starts respect it."""
    # Setup
    mask = scenario_service.nearest_bs_mask(small_scenario)
    masked = scenario_service.with_mask(small_scenario, mask)
    solution = scenario_service.random_feasible_solution(masked, rng)

    # Verify
    assert np.all(mask.sum(axis=1) == 1)
    for k, v in enumerate(solution.beamformers):
        assert np.all(v[~mask[:, k]] == 0)


def test_scenario_document_roundtrip_is_exact(small_scenario, tmp_path):
    """Test that saving and loading a scenario preserves every float."""
    # Setup
    path = tmp_path / "scenario.json"
    scenario_service.save_scenario(small_scenario, path)

    # Verify
    loaded = scenario_service.load_scenario(path)
    for h1, h2 in zip(small_scenario.channels, loaded.channels):
        assert np.array_equal(h1, h2)
    assert np.array_equal(small_scenario.noise_power, loaded.noise_power)
