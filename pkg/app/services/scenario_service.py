import json
import math
from pathlib import Path
from typing import Optional, Union

import numpy as np
from loguru import logger

from app.config import settings
from app.core.exceptions import ConfigurationError, StructuralError
from app.schemas.scenario import (
    BeamformingSolution,
    NetworkScenario,
    ScenarioConfig,
    ScenarioDocument,
    SolutionDocument,
)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def noise_power_watts(density_dbm_per_hz: float, bandwidth_hz: float) -> float:
    """sigma^2 = 10^((N0 + 10 log10(BW) - 30) / 10) watts."""
    return 10.0 ** ((density_dbm_per_hz + 10.0 * math.log10(bandwidth_hz) - 30.0) / 10.0)


def channel_from_distance(h_hat: np.ndarray, distance: float, path_loss_exponent: float) -> np.ndarray:
    """h = sqrt(distance^-beta) * h_hat."""
    return np.sqrt(distance ** (-path_loss_exponent)) * np.asarray(h_hat)


def _complex_to_pairs(arr: np.ndarray) -> list:
    return np.stack([arr.real, arr.imag], axis=-1).tolist()


def _pairs_to_complex(pairs: list) -> np.ndarray:
    arr = np.asarray(pairs, dtype=float)
    if arr.size == 0:
        return np.zeros(arr.shape[:-1] if arr.ndim > 1 else (0,), dtype=complex)
    return arr[..., 0] + 1j * arr[..., 1]


class ScenarioService:
    def validate_config(self, config: ScenarioConfig) -> None:
        """
        Cross-field checks the schema cannot express.
        """
        if config.small_bs_annulus_inner_m >= config.region_radius_m:
            raise ConfigurationError(
                f"Annulus inner radius {config.small_bs_annulus_inner_m} must be below region radius {config.region_radius_m}"
            )
        for name in ("power_macro_dbm", "power_small_dbm", "noise_density_dbm_per_hz"):
            if not math.isfinite(getattr(config, name)):
                raise ConfigurationError(f"{name} must be finite")
        if config.weights is not None:
            if len(config.weights) != config.num_users:
                raise ConfigurationError(
                    f"Expected {config.num_users} weights, got {len(config.weights)}"
                )
            if any(not (w > 0 and math.isfinite(w)) for w in config.weights):
                raise ConfigurationError("Weights must be strictly positive")
        if config.serving_mask is not None:
            mask = np.asarray(config.serving_mask, dtype=bool)
            if mask.shape != (config.num_users, config.num_small_bs + 1):
                raise ConfigurationError(
                    f"Serving mask must be {config.num_users}x{config.num_small_bs + 1}, got {mask.shape}"
                )
            if not np.all(mask.any(axis=1)):
                raise ConfigurationError("Every user needs at least one serving BS")

    def generate_scenario(self, config: ScenarioConfig) -> NetworkScenario:
        """
        Draw a network from a seeded PCG64 stream. Draw order: small-BS
        positions (ascending k, radius then angle), user positions (ascending
        i, radius then angle), then channels in (i, k) row-major order with
        real parts drawn before imaginary parts.
        """
        self.validate_config(config)
        rng = np.random.default_rng(config.rng_seed)
        K, N = config.num_small_bs, config.num_users
        R, r_in = config.region_radius_m, config.small_bs_annulus_inner_m

        bs_positions = np.zeros((K + 1, 2))
        for k in range(1, K + 1):
            radius = math.sqrt(rng.uniform(r_in ** 2, R ** 2))
            angle = rng.uniform(0.0, 2.0 * math.pi)
            bs_positions[k] = (radius * math.cos(angle), radius * math.sin(angle))

        user_positions = np.zeros((N, 2))
        for i in range(N):
            radius = R * math.sqrt(rng.uniform(0.0, 1.0))
            angle = rng.uniform(0.0, 2.0 * math.pi)
            user_positions[i] = (radius * math.cos(angle), radius * math.sin(angle))

        distances = np.linalg.norm(user_positions[:, None, :] - bs_positions[None, :, :], axis=2)
        distances = np.maximum(distances, settings.MIN_DISTANCE_M)

        antennas = [config.antennas_macro] + [config.antennas_small] * K
        channels = [np.zeros((N, M), dtype=complex) for M in antennas]
        for i in range(N):
            for k in range(K + 1):
                M = antennas[k]
                h_hat = (rng.standard_normal(M) + 1j * rng.standard_normal(M)) / math.sqrt(2.0)
                channels[k][i] = channel_from_distance(h_hat, distances[i, k], config.path_loss_exponent)

        sigma2 = noise_power_watts(config.noise_density_dbm_per_hz, config.bandwidth_hz)
        powers = np.array(
            [dbm_to_watts(config.power_macro_dbm)] + [dbm_to_watts(config.power_small_dbm)] * K
        )
        weights = np.ones(N) if config.weights is None else np.asarray(config.weights, dtype=float)
        mask = None if config.serving_mask is None else np.asarray(config.serving_mask, dtype=bool)

        logger.info(f"Generated scenario K={K} N={N} seed={config.rng_seed}")
        return NetworkScenario(
            config=config,
            bs_positions=bs_positions,
            user_positions=user_positions,
            distances=distances,
            channels=channels,
            noise_power=np.full(N, sigma2),
            powers=powers,
            weights=weights,
            serving_mask=mask,
        )

    def build_scenario(
        self,
        channels: list[np.ndarray],
        powers: list[float],
        noise_power: Union[float, list[float]],
        weights: Optional[list[float]] = None,
        serving_mask: Optional[np.ndarray] = None,
    ) -> NetworkScenario:
        """
        Assemble a scenario from explicit channels (used for hand-built instances).
        """
        channels = [np.atleast_2d(np.asarray(h, dtype=complex)) for h in channels]
        N = channels[0].shape[0]
        if any(h.shape[0] != N for h in channels):
            raise StructuralError("All channel blocks must have one row per user")
        if len(powers) != len(channels):
            raise StructuralError(f"Expected {len(channels)} power budgets, got {len(powers)}")
        noise = np.broadcast_to(np.asarray(noise_power, dtype=float), (N,)).copy()
        if np.any(noise <= 0):
            raise ConfigurationError("Noise power must be positive")
        if np.any(np.asarray(powers) <= 0):
            raise ConfigurationError("Power budgets must be positive")
        w = np.ones(N) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (N,) or np.any(w <= 0):
            raise ConfigurationError("Weights must be N strictly positive values")
        K = len(channels) - 1
        config = ScenarioConfig(
            num_small_bs=K,
            num_users=N,
            antennas_macro=channels[0].shape[1],
            antennas_small=channels[1].shape[1] if K else settings.ANTENNAS_SMALL,
            weights=w.tolist(),
            serving_mask=None if serving_mask is None else np.asarray(serving_mask, dtype=bool).tolist(),
        )
        return NetworkScenario(
            config=config,
            bs_positions=np.zeros((K + 1, 2)),
            user_positions=np.zeros((N, 2)),
            distances=np.ones((N, K + 1)),
            channels=channels,
            noise_power=noise,
            powers=np.asarray(powers, dtype=float),
            weights=w,
            serving_mask=None if serving_mask is None else np.asarray(serving_mask, dtype=bool),
        )

    def normalized(self, scenario: NetworkScenario) -> NetworkScenario:
        """
        Divide each user's channels by its noise standard deviation so that
        every noise power becomes 1. SINR, rates and WSR are unchanged.
        """
        scale = 1.0 / np.sqrt(scenario.noise_power)
        return scenario.model_copy(
            update={
                "channels": [h * scale[:, None] for h in scenario.channels],
                "noise_power": np.ones(scenario.num_users),
            }
        )

    def power_normalized(self, scenario: NetworkScenario) -> NetworkScenario:
        """
        Divide each user's channels and noise amplitude by
        sqrt(sigma_i^2 + sum_k P_k ||h_ik||^2), the largest received power plus
        noise it could see. Received powers then lie in [0, 1]; SINR, rates
        and WSR are unchanged.
        """
        gain = sum(p * np.sum(np.abs(h) ** 2, axis=1) for h, p in zip(scenario.channels, scenario.powers))
        total = scenario.noise_power + gain
        scale = 1.0 / np.sqrt(total)
        return scenario.model_copy(
            update={
                "channels": [h * scale[:, None] for h in scenario.channels],
                "noise_power": scenario.noise_power / total,
            }
        )

    def nearest_bs_mask(self, scenario: NetworkScenario) -> np.ndarray:
        """Coordinated-beamforming mask: each user served only by its nearest BS."""
        mask = np.zeros((scenario.num_users, scenario.num_bs), dtype=bool)
        mask[np.arange(scenario.num_users), np.argmin(scenario.distances, axis=1)] = True
        return mask

    def with_mask(self, scenario: NetworkScenario, mask: Optional[np.ndarray]) -> NetworkScenario:
        config = scenario.config.model_copy(
            update={"serving_mask": None if mask is None else np.asarray(mask, dtype=bool).tolist()}
        )
        return scenario.model_copy(update={"serving_mask": mask, "config": config})

    def zero_solution(self, scenario: NetworkScenario) -> BeamformingSolution:
        return BeamformingSolution(
            beamformers=[np.zeros_like(h) for h in scenario.channels], solver="zero"
        )

    def random_feasible_solution(
        self, scenario: NetworkScenario, rng: np.random.Generator
    ) -> BeamformingSolution:
        """
        Random complex Gaussian directions; BS k spends a uniformly drawn
        fraction of P_k. Masked beamformers are zero.
        """
        beamformers = []
        for k, h in enumerate(scenario.channels):
            N, M = h.shape
            v = (rng.standard_normal((N, M)) + 1j * rng.standard_normal((N, M))) / math.sqrt(2.0)
            if scenario.serving_mask is not None:
                v *= scenario.serving_mask[:, k][:, None]
            total = float(np.sum(np.abs(v) ** 2))
            fraction = rng.uniform(0.0, 1.0)
            if total > 0:
                v *= math.sqrt(fraction * scenario.powers[k] / total)
            beamformers.append(v)
        return BeamformingSolution(beamformers=beamformers, solver="random")

    def received_power(self, scenario: NetworkScenario, solution: BeamformingSolution) -> np.ndarray:
        """Matrix R with R[i, j] = sum_k |h_ik v_jk|^2."""
        self._check_dims(scenario, solution)
        N = scenario.num_users
        R = np.zeros((N, N))
        for h, v in zip(scenario.channels, solution.beamformers):
            R += np.abs(h @ v.T) ** 2
        return R

    def interference_plus_noise(self, scenario: NetworkScenario, solution: BeamformingSolution) -> np.ndarray:
        R = self.received_power(scenario, solution)
        return R.sum(axis=1) - np.diag(R) + scenario.noise_power

    def sinr_all(self, scenario: NetworkScenario, solution: BeamformingSolution) -> np.ndarray:
        R = self.received_power(scenario, solution)
        desired = np.diag(R)
        return desired / (R.sum(axis=1) - desired + scenario.noise_power)

    def sinr(self, scenario: NetworkScenario, solution: BeamformingSolution, user: int) -> float:
        """
        Aggregated SINR of one user:
        sum_k |h_ik v_ik|^2 / (sum_k sum_{j != i} |h_ik v_jk|^2 + sigma_i^2).
        """
        if not 0 <= user < scenario.num_users:
            raise StructuralError(f"User index {user} out of range")
        return float(self.sinr_all(scenario, solution)[user])

    def user_rates(self, scenario: NetworkScenario, solution: BeamformingSolution) -> np.ndarray:
        """Per-user rates ln(1 + SINR) in nats."""
        return np.log1p(self.sinr_all(scenario, solution))

    def weighted_sum_rate(self, scenario: NetworkScenario, solution: BeamformingSolution) -> float:
        return float(scenario.weights @ self.user_rates(scenario, solution))

    def rate_upper_bounds(self, scenario: NetworkScenario) -> np.ndarray:
        """r^_i = ln(1 + sum_k P_k ||h_ik||^2 / sigma_i^2), over serving BSs only in CB mode."""
        gain = np.zeros(scenario.num_users)
        for k, h in enumerate(scenario.channels):
            g = scenario.powers[k] * np.sum(np.abs(h) ** 2, axis=1)
            if scenario.serving_mask is not None:
                g = g * scenario.serving_mask[:, k]
            gain += g
        return np.log1p(gain / scenario.noise_power)

    def bs_power(self, solution: BeamformingSolution) -> np.ndarray:
        return np.array([float(np.sum(np.abs(v) ** 2)) for v in solution.beamformers])

    def check_power_feasible(
        self, scenario: NetworkScenario, solution: BeamformingSolution, tol: float = 1e-9
    ) -> bool:
        """Every BS within its budget up to a relative tolerance."""
        self._check_dims(scenario, solution)
        return bool(np.all(self.bs_power(solution) <= scenario.powers * (1.0 + tol)))

    def _check_dims(self, scenario: NetworkScenario, solution: BeamformingSolution) -> None:
        if len(solution.beamformers) != scenario.num_bs:
            raise StructuralError(
                f"Solution has {len(solution.beamformers)} BS blocks, scenario has {scenario.num_bs}"
            )
        for k, (h, v) in enumerate(zip(scenario.channels, solution.beamformers)):
            if v.shape != h.shape:
                raise StructuralError(f"BS {k}: beamformer shape {v.shape} does not match channel {h.shape}")

    # Serialization

    def to_document(self, scenario: NetworkScenario) -> ScenarioDocument:
        return ScenarioDocument(
            config=scenario.config,
            bs_positions=scenario.bs_positions.tolist(),
            user_positions=scenario.user_positions.tolist(),
            distances=scenario.distances.tolist(),
            channels=[_complex_to_pairs(h) for h in scenario.channels],
            noise_power=scenario.noise_power.tolist(),
            powers=scenario.powers.tolist(),
            weights=scenario.weights.tolist(),
            serving_mask=None if scenario.serving_mask is None else scenario.serving_mask.tolist(),
        )

    def from_document(self, document: ScenarioDocument) -> NetworkScenario:
        channels = [_pairs_to_complex(h) for h in document.channels]
        N = len(document.noise_power)
        channels = [h.reshape(N, -1) for h in channels]
        return NetworkScenario(
            config=document.config,
            bs_positions=np.asarray(document.bs_positions, dtype=float).reshape(-1, 2),
            user_positions=np.asarray(document.user_positions, dtype=float).reshape(-1, 2),
            distances=np.asarray(document.distances, dtype=float),
            channels=channels,
            noise_power=np.asarray(document.noise_power, dtype=float),
            powers=np.asarray(document.powers, dtype=float),
            weights=np.asarray(document.weights, dtype=float),
            serving_mask=None if document.serving_mask is None else np.asarray(document.serving_mask, dtype=bool),
        )

    def solution_to_document(self, solution: BeamformingSolution) -> SolutionDocument:
        return SolutionDocument(
            beamformers=[_complex_to_pairs(v) for v in solution.beamformers],
            solver=solution.solver,
            iterations=solution.iterations,
            wall_time_s=solution.wall_time_s,
            metadata=solution.metadata,
        )

    def solution_from_document(self, document: SolutionDocument, scenario: NetworkScenario) -> BeamformingSolution:
        if len(document.beamformers) != scenario.num_bs:
            raise StructuralError(f"Expected {scenario.num_bs} beamformer blocks, got {len(document.beamformers)}")
        beamformers = []
        for k, (v, h) in enumerate(zip(document.beamformers, scenario.channels)):
            block = _pairs_to_complex(v)
            if block.size != h.size:
                raise StructuralError(f"Beamformer block {k} has {block.size} entries, expected {h.size}")
            beamformers.append(block.reshape(h.shape))
        return BeamformingSolution(
            beamformers=beamformers,
            solver=document.solver,
            iterations=document.iterations,
            wall_time_s=document.wall_time_s,
            metadata=document.metadata,
        )

    def save_scenario(self, scenario: NetworkScenario, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_document(scenario).model_dump_json(indent=2))

    def load_scenario(self, path: Union[str, Path]) -> NetworkScenario:
        try:
            document = ScenarioDocument.model_validate(json.loads(Path(path).read_text()))
        except Exception as e:
            logger.error(f"Error loading scenario from {path}: {str(e)}")
            raise
        return self.from_document(document)

    def save_solution(self, solution: BeamformingSolution, path: Union[str, Path]) -> None:
        Path(path).write_text(self.solution_to_document(solution).model_dump_json(indent=2))


# Create a singleton instance
scenario_service = ScenarioService()
