"""
Differential evolution (rand/1/bin) over the seven IDM parameters.

Fitness is minimized: the mean per-instance RMSE of a shared parameter vector
plus lambda times its Euclidean distance from the literature values. Trial
vectors are clipped to the search box, so every evaluated candidate lies
inside the bounds.
"""
from typing import Callable, NamedTuple, Optional

import numpy as np
from loguru import logger
from tqdm import tqdm

import rng as seeding
from config import LITERATURE_VALUES, PARAM_NAMES, SHOW_PROGRESS
from errors import ConfigError
from idm import params_valid
from metrics import shared_params_rmse
from models import Candidate, Dataset, DeConfig, DeResult

Objective = Callable[[np.ndarray], float]

LITERATURE_VECTOR = np.array([LITERATURE_VALUES[name] for name in PARAM_NAMES])

# parameters that must stay strictly positive for the model to be defined
_STRICTLY_POSITIVE = ("v0", "a", "b", "delta")


class Population(NamedTuple):
    members: np.ndarray
    fitness: np.ndarray


def regularization(params: np.ndarray, lambda_: float) -> float:
    return float(lambda_ * np.linalg.norm(np.asarray(params, dtype=float) - LITERATURE_VECTOR))


def fitness(params: np.ndarray, data: Dataset, lambda_: float = 0.0) -> float:
    """Regularized error of one shared parameter vector; +inf outside the valid region."""
    params = np.asarray(params, dtype=float)
    if not params_valid(params):
        return float("inf")
    error = shared_params_rmse(params, data)
    if not np.isfinite(error):
        return float("inf")
    return error + regularization(params, lambda_)


def check_idm_bounds(config: DeConfig) -> None:
    if len(config.bounds) != len(PARAM_NAMES):
        raise ConfigError(f"DE bounds need {len(PARAM_NAMES)} entries, got {len(config.bounds)}")
    for name, (lo, _) in zip(PARAM_NAMES, config.bounds):
        if name in _STRICTLY_POSITIVE and lo <= 0:
            raise ConfigError(f"lower bound for {name} must be > 0, got {lo}")
        if lo < 0:
            raise ConfigError(f"lower bound for {name} must be >= 0, got {lo}")


def de_generation(
    rng: np.random.Generator,
    population: Population,
    config: DeConfig,
    objective: Objective,
) -> Population:
    """One synchronous generation: build every trial from the current population, then select."""
    members = population.members
    size, dim = members.shape
    lower, upper = config.lower, config.upper

    trials = np.empty_like(members)
    for i in range(size):
        picks = rng.choice(size - 1, size=3, replace=False)
        r1, r2, r3 = picks + (picks >= i)
        mutant = members[r1] + config.differential_weight * (members[r2] - members[r3])
        cross = rng.uniform(size=dim) < config.crossover_prob
        cross[rng.integers(dim)] = True
        trials[i] = np.clip(np.where(cross, mutant, members[i]), lower, upper)

    trial_fitness = np.array([objective(t) for t in trials])
    keep = trial_fitness <= population.fitness
    return Population(
        members=np.where(keep[:, None], trials, members),
        fitness=np.where(keep, trial_fitness, population.fitness),
    )


def _population_error(population: Population, lambda_: float, has_data: bool) -> float:
    values = population.fitness
    if has_data and lambda_ > 0:
        distance = np.linalg.norm(population.members - LITERATURE_VECTOR, axis=1)
        values = values - lambda_ * distance
    finite = values[np.isfinite(values)]
    return float(finite.mean()) if finite.size else float("inf")


def run_de(
    config: DeConfig,
    data: Optional[Dataset] = None,
    objective: Optional[Objective] = None,
) -> DeResult:
    """Evolve a uniformly initialized population for ``config.n_generations``.

    Without an explicit ``objective`` the IDM fitness on ``data`` is minimized
    and ``best_rmse`` is the unregularized error of the winner.
    """
    if objective is None:
        if data is None:
            raise ConfigError("run_de needs either data or an objective")
        check_idm_bounds(config)
        lambda_ = config.lambda_

        def objective(x):
            return fitness(x, data, lambda_)

    rng = seeding.spawn(config.seed, seeding.DE, 0)
    lower, upper = config.lower, config.upper
    members = lower + rng.uniform(size=(config.population_size, len(lower))) * (upper - lower)
    population = Population(members, np.array([objective(m) for m in members]))
    n_evaluations = config.population_size

    history = [float(population.fitness.min())]
    population_rmse = [_population_error(population, config.lambda_, data is not None)]
    progress = tqdm(
        range(config.n_generations), desc="de", disable=not SHOW_PROGRESS, leave=False
    )
    for generation in progress:
        population = de_generation(rng, population, config, objective)
        n_evaluations += config.population_size
        history.append(float(population.fitness.min()))
        population_rmse.append(_population_error(population, config.lambda_, data is not None))
        if generation % 50 == 0:
            logger.debug(f"DE generation {generation}: best fitness {history[-1]:.5f}")

    best_idx = int(np.argmin(population.fitness))
    best = Candidate(params=population.members[best_idx], fitness=float(population.fitness[best_idx]))
    best_rmse = shared_params_rmse(best.params, data) if data is not None else best.fitness

    for name, value, lo, hi in zip(PARAM_NAMES, best.params, lower, upper):
        if data is not None and (np.isclose(value, lo) or np.isclose(value, hi)):
            logger.warning(f"DE best {name}={value:.4g} sits on the search bound [{lo}, {hi}]")
    logger.info(
        f"DE finished: F={config.differential_weight}, CR={config.crossover_prob}, "
        f"lambda={config.lambda_}, best fitness {best.fitness:.5f}, RMSE {best_rmse:.5f}"
    )
    return DeResult(
        best=best,
        best_rmse=float(best_rmse),
        history=tuple(history),
        population_rmse=tuple(population_rmse),
        n_evaluations=n_evaluations,
    )
