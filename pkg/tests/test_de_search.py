import numpy as np
import pytest
from numpy.testing import assert_allclose

import rng as seeding
from config import DEFAULT_DE_BOUNDS
from de_search import (
    LITERATURE_VECTOR, Population, check_idm_bounds, de_generation, fitness, run_de,
)
from errors import ConfigError
from metrics import shared_params_rmse
from models import DeConfig
from trajectory_data import generate_synthetic

SPHERE_BOUNDS = ((-5.0, 5.0),) * 7


def sphere(x):
    return float(np.dot(x, x))


@pytest.fixture(scope="module")
def single_driver(two_driver_truth, leaders):
    return generate_synthetic({"d1": two_driver_truth["d1"]}, leaders[:2], n_instances_per_driver=2)


class TestFitness:

    def test_truth_has_zero_error_on_clean_data(self, single_driver):
        truth = single_driver.truth["d1"].to_array()
        assert fitness(truth, single_driver.dataset, 0.0) == pytest.approx(0.0, abs=1e-10)

    def test_regularization_adds_distance(self, single_driver):
        params = LITERATURE_VECTOR.copy()
        params[0] += 3.0
        data = single_driver.dataset
        assert_allclose(fitness(params, data, 1.0), shared_params_rmse(params, data) + 3.0)

    def test_literature_has_no_penalty(self, single_driver):
        data = single_driver.dataset
        assert_allclose(
            fitness(LITERATURE_VECTOR, data, 0.5), shared_params_rmse(LITERATURE_VECTOR, data)
        )

    def test_invalid_params_are_infinitely_bad(self, single_driver):
        params = LITERATURE_VECTOR.copy()
        params[3] = 0.0
        assert fitness(params, single_driver.dataset) == float("inf")


class TestGeneration:

    def _population(self, config, objective=sphere):
        rng = seeding.spawn(0, seeding.DE, 0)
        lower, upper = config.lower, config.upper
        members = lower + rng.uniform(size=(config.population_size, 7)) * (upper - lower)
        return Population(members, np.array([objective(m) for m in members]))

    def test_selection_never_worsens_and_stays_in_bounds(self):
        config = DeConfig(bounds=SPHERE_BOUNDS, population_size=10, differential_weight=1.9)
        population = self._population(config)
        rng = seeding.spawn(1, seeding.DE, 0)
        for _ in range(20):
            following = de_generation(rng, population, config, sphere)
            assert following.members.shape == population.members.shape
            assert np.all(following.fitness <= population.fitness)
            assert np.all(following.members >= config.lower)
            assert np.all(following.members <= config.upper)
            population = following

    def test_every_evaluated_trial_is_in_bounds(self):
        config = DeConfig(bounds=SPHERE_BOUNDS, population_size=8, differential_weight=1.5)
        seen = []

        def recording(x):
            seen.append(np.array(x))
            return sphere(x)

        population = self._population(config)
        de_generation(seeding.spawn(2, seeding.DE, 0), population, config, recording)
        seen = np.array(seen)
        assert len(seen) == 8
        assert np.all((seen >= -5.0) & (seen <= 5.0))

    def test_zero_crossover_changes_one_coordinate(self):
        config = DeConfig(bounds=SPHERE_BOUNDS, population_size=6, crossover_prob=0.0)
        population = self._population(config)
        trials = []
        de_generation(
            seeding.spawn(3, seeding.DE, 0), population, config,
            lambda x: trials.append(np.array(x)) or sphere(x),
        )
        for trial, target in zip(trials, population.members):
            assert np.sum(trial != target) <= 1


class TestRunDe:

    def test_sphere_converges(self):
        config = DeConfig(
            bounds=SPHERE_BOUNDS, population_size=28, n_generations=300,
            differential_weight=0.5, crossover_prob=0.9, seed=0,
        )
        result = run_de(config, objective=sphere)
        assert result.best.fitness < 1e-6
        assert_allclose(result.best.params, 0.0, atol=1e-3)
        assert result.n_evaluations == 28 * 301

    def test_history_is_monotone(self):
        config = DeConfig(bounds=SPHERE_BOUNDS, population_size=12, n_generations=60, seed=2)
        result = run_de(config, objective=sphere)
        history = np.array(result.history)
        assert len(history) == 61
        assert np.all(np.diff(history) <= 0)
        assert len(result.population_rmse) == 61

    def test_same_seed_same_result(self, single_driver):
        config = DeConfig(population_size=8, n_generations=5, seed=3)
        assert run_de(config, single_driver.dataset) == run_de(config, single_driver.dataset)

    def test_best_rmse_is_unregularized(self, single_driver):
        config = DeConfig(population_size=8, n_generations=5, seed=3, **{"lambda": 0.5})
        result = run_de(config, single_driver.dataset)
        assert_allclose(result.best_rmse, shared_params_rmse(result.best.params, single_driver.dataset))
        assert result.best.fitness >= result.best_rmse

    def test_needs_data_or_objective(self):
        with pytest.raises(ConfigError):
            run_de(DeConfig())


class TestBounds:

    def test_inverted_bounds_rejected(self):
        with pytest.raises(ValueError, match="must be <"):
            DeConfig(bounds=((1.0, 1.0),) + DEFAULT_DE_BOUNDS[1:])

    def test_nonpositive_v0_bound_rejected(self):
        config = DeConfig(bounds=((0.0, 40.0),) + DEFAULT_DE_BOUNDS[1:])
        with pytest.raises(ConfigError, match="v0"):
            check_idm_bounds(config)

    def test_wrong_dimension_rejected(self):
        with pytest.raises(ConfigError):
            check_idm_bounds(DeConfig(bounds=SPHERE_BOUNDS[:3]))


@pytest.mark.slow
class TestRecovery:

    def test_noise_free_recovery(self, single_driver):
        config = DeConfig(population_size=28, n_generations=300, seed=0)
        result = run_de(config, single_driver.dataset)
        assert result.best_rmse < 0.05
        assert np.all(result.best.params > config.lower)
        assert np.all(result.best.params < config.upper)

    def test_regularization_pulls_toward_literature(self, single_driver):
        distances = []
        for lam in (0.0, 1.0, 100.0):
            config = DeConfig(population_size=28, n_generations=150, seed=0, **{"lambda": lam})
            best = run_de(config, single_driver.dataset).best.params
            distances.append(np.linalg.norm(best - LITERATURE_VECTOR))
        assert distances[0] >= distances[1] >= distances[2]
