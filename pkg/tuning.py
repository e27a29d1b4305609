"""
Hyperparameter search for DE: (crossover probability, differential weight, lambda).

The tuning objective is the unregularized RMSE of the best DE candidate, so
cells with different lambda values are compared on the same footing. Grid
cells all run with the same DE seed.
"""
import warnings
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.optimize import minimize
from scipy.stats import norm, qmc
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import ConstantKernel, Matern
from tqdm import tqdm

import rng as seeding
from config import GRID_CR_RANGE, GRID_F_RANGE, GRID_LAMBDA_RANGE, PARAM_NAMES, SHOW_PROGRESS
from de_search import run_de
from errors import ConfigError
from models import Dataset, DeConfig, TuningResult

HYPERPARAMS = ("CR", "F", "lambda")
N_INITIAL = 5

Evaluator = Callable[[float, float, float], Mapping[str, float]]


def grid_values(lo: float, hi: float, step: float) -> np.ndarray:
    """Inclusive arithmetic range lo, lo+step, ... <= hi."""
    if step <= 0:
        raise ConfigError(f"grid step must be > 0, got {step}")
    if hi < lo:
        raise ConfigError(f"grid range is empty: lo={lo} > hi={hi}")
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(count), 12)


def grid_cells(
    cr_range: Sequence[float], f_range: Sequence[float], lambda_range: Sequence[float]
) -> List[Tuple[float, float, float]]:
    return [
        (float(cr), float(f), float(lam))
        for cr in grid_values(*cr_range)
        for f in grid_values(*f_range)
        for lam in grid_values(*lambda_range)
    ]


class DeEvaluator:
    """Runs DE for one hyperparameter triple; picklable for process pools."""

    def __init__(self, data: Dataset, base: DeConfig):
        self.data = data
        self.base = base

    def __call__(self, cr: float, f: float, lam: float) -> Dict[str, float]:
        config = DeConfig.model_validate({
            **self.base.model_dump(by_alias=True),
            "crossover_prob": cr,
            "differential_weight": f,
            "lambda": lam,
        })
        result = run_de(config, self.data)
        row = {
            "best_rmse": result.best_rmse,
            "best_fitness": result.best.fitness,
            "population_rmse": result.population_rmse[-1],
        }
        row.update(zip(PARAM_NAMES, map(float, result.best.params)))
        return row


def _evaluate_cell(job):
    evaluate, cell = job
    return evaluate(*cell)


def _row(cell: Tuple[float, float, float], outcome: Mapping[str, float]) -> Dict[str, float]:
    row = dict(zip(HYPERPARAMS, cell))
    row.update(outcome)
    return row


def _result(rows: List[Dict[str, float]]) -> TuningResult:
    table = pd.DataFrame(rows)
    best = table.loc[table["best_rmse"].idxmin()]
    incumbent = {name: float(best[name]) for name in HYPERPARAMS}
    incumbent["best_rmse"] = float(best["best_rmse"])
    return TuningResult(best=incumbent, table=table)


def grid_search(
    data: Optional[Dataset],
    cr_range: Sequence[float] = GRID_CR_RANGE,
    f_range: Sequence[float] = GRID_F_RANGE,
    lambda_range: Sequence[float] = GRID_LAMBDA_RANGE,
    de_base_config: Optional[DeConfig] = None,
    evaluate: Optional[Evaluator] = None,
    n_jobs: int = 1,
) -> TuningResult:
    """Exhaustive sweep; the incumbent is the cell with the lowest best RMSE."""
    if evaluate is None:
        if data is None:
            raise ConfigError("grid_search needs data or an evaluator")
        evaluate = DeEvaluator(data, de_base_config or DeConfig())
    cells = grid_cells(cr_range, f_range, lambda_range)
    logger.info(f"Grid search over {len(cells)} cells with {n_jobs} worker(s)")

    jobs = [(evaluate, cell) for cell in cells]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            outcomes = list(tqdm(
                pool.map(_evaluate_cell, jobs), total=len(jobs), desc="grid",
                disable=not SHOW_PROGRESS,
            ))
    else:
        outcomes = [_evaluate_cell(job) for job in tqdm(jobs, desc="grid", disable=not SHOW_PROGRESS)]

    result = _result([_row(cell, outcome) for cell, outcome in zip(cells, outcomes)])
    logger.info(f"Grid incumbent: {result.best}")
    return result


# ---------------------------------------------------------------------------
# Bayesian optimization
# ---------------------------------------------------------------------------


def _bounds_array(hyperparam_bounds) -> np.ndarray:
    if isinstance(hyperparam_bounds, Mapping):
        hyperparam_bounds = [hyperparam_bounds[name] for name in HYPERPARAMS]
    bounds = np.asarray(hyperparam_bounds, dtype=float)
    if bounds.shape != (3, 2):
        raise ConfigError("hyperparameter bounds must be three (lo, hi) pairs")
    for name, (lo, hi) in zip(HYPERPARAMS, bounds):
        if not hi > lo:
            raise ConfigError(f"degenerate bounds for {name}: [{lo}, {hi}]")
    return bounds


def fit_surrogate(
    x_unit: np.ndarray, y: np.ndarray, jitter: float = 1e-6, seed: int = 0
) -> GaussianProcessRegressor:
    """GP with an anisotropic Matern-5/2 kernel fitted on unit-cube inputs."""
    kernel = ConstantKernel(1.0, (1e-3, 1e3)) * Matern(
        length_scale=np.ones(x_unit.shape[1]), length_scale_bounds=(1e-2, 1e2), nu=2.5
    )
    gp = GaussianProcessRegressor(
        kernel=kernel, alpha=jitter, normalize_y=True, n_restarts_optimizer=2, random_state=seed
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        gp.fit(x_unit, y)
    return gp


def expected_improvement(
    gp: GaussianProcessRegressor, x_unit: np.ndarray, y_best: float, xi: float = 0.0
) -> np.ndarray:
    """EI for minimization."""
    mean, std = gp.predict(np.atleast_2d(x_unit), return_std=True)
    improvement = y_best - mean - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = improvement / std
        ei = improvement * norm.cdf(z) + std * norm.pdf(z)
    return np.where(std > 1e-12, ei, np.maximum(improvement, 0.0))


def propose_next(
    gp: GaussianProcessRegressor,
    y_best: float,
    rng: np.random.Generator,
    n_candidates: int = 512,
    n_polish: int = 5,
) -> Tuple[np.ndarray, float]:
    """Maximize EI over the unit cube: random candidates, then L-BFGS-B from the best few."""
    dim = gp.X_train_.shape[1]
    candidates = rng.uniform(size=(n_candidates, dim))
    scores = expected_improvement(gp, candidates, y_best)
    best_x, best_ei = candidates[np.argmax(scores)], float(scores.max())
    for start in candidates[np.argsort(scores)[-n_polish:]]:
        res = minimize(
            lambda u: -float(expected_improvement(gp, u, y_best)[0]),
            start, method="L-BFGS-B", bounds=[(0.0, 1.0)] * dim,
        )
        if np.isfinite(res.fun) and -res.fun > best_ei:
            best_x, best_ei = res.x, float(-res.fun)
    return np.clip(best_x, 0.0, 1.0), best_ei


def bayes_opt_tune(
    data: Optional[Dataset],
    hyperparam_bounds=None,
    budget: int = 30,
    de_base_config: Optional[DeConfig] = None,
    seed: int = 0,
    evaluate: Optional[Evaluator] = None,
    jitter: float = 1e-6,
) -> TuningResult:
    """GP + expected-improvement search with a Latin-hypercube warm start of five points."""
    if budget < N_INITIAL:
        raise ConfigError(f"BO budget must be >= {N_INITIAL}, got {budget}")
    bounds = _bounds_array(
        hyperparam_bounds if hyperparam_bounds is not None
        else {"CR": (0.1, 0.9), "F": (0.1, 1.9), "lambda": (0.0, 0.0001)}
    )
    if evaluate is None:
        if data is None:
            raise ConfigError("bayes_opt_tune needs data or an evaluator")
        evaluate = DeEvaluator(data, de_base_config or DeConfig())

    rng = seeding.spawn(seed, seeding.BAYES_OPT)
    lo, span = bounds[:, 0], bounds[:, 1] - bounds[:, 0]
    x_unit: List[np.ndarray] = list(qmc.LatinHypercube(d=3, seed=rng).random(N_INITIAL))
    rows, ys = [], []

    def record(u, phase, iteration, ei=float("nan")):
        cell = tuple(float(c) for c in lo + np.asarray(u) * span)
        outcome = evaluate(*cell)
        row = _row(cell, outcome)
        row.update(iteration=iteration, phase=phase, ei=ei)
        rows.append(row)
        ys.append(float(outcome["best_rmse"]))
        logger.debug(f"BO {phase} {iteration}: {cell} -> {ys[-1]:.5f}")

    for i, u in enumerate(x_unit):
        record(u, "init", i)

    for iteration in tqdm(range(N_INITIAL, budget), desc="bo", disable=not SHOW_PROGRESS):
        gp = fit_surrogate(
            np.array(x_unit), np.array(ys), jitter, seeding.sub_seed(seed, seeding.BAYES_OPT, iteration)
        )
        u, ei = propose_next(gp, min(ys), rng)
        x_unit.append(u)
        record(u, "ei", iteration, ei)

    result = _result(rows)
    logger.info(f"BO incumbent after {budget} evaluations: {result.best}")
    return result
