"""
Hamiltonian Monte Carlo: leapfrog integrator, Metropolis-corrected kernel,
chain runner and the incremental-restart calibration protocol.

Restart protocol: fresh chains of length base, 2*base, 3*base, ... all start
from the prior mean. After each run the mean log joint over the run's final
tail is compared with the previous run's; a relative change below the
tolerance ends the schedule. No single run exceeds max_total_steps.
"""
from typing import Callable, Dict, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from scipy.linalg import cho_solve, cholesky
from tqdm import tqdm

import rng as seeding
from config import PARAM_NAMES, SHOW_PROGRESS
from errors import DataValidationError, InvalidRegionError
from models import Chain, Dataset, HmcConfig, IdmParams, LatentState, LogDensity, ModelSpec, RestartResult
from prob_model import JointTarget, initial_state, realize_all

Target = Callable[[np.ndarray], LogDensity]
GradFn = Callable[[np.ndarray], np.ndarray]


class Metric:
    """Mass matrix M of the kinetic energy 0.5 * p' M^-1 p, diagonal (1-d) or dense (2-d)."""

    def __init__(self, mass: np.ndarray):
        mass = np.asarray(mass, dtype=float)
        self.dim = len(mass)
        self.dense = mass.ndim == 2
        if self.dense:
            self._lower = cholesky(mass, lower=True)
        else:
            self._diag = mass

    @classmethod
    def unit(cls, dim: int) -> "Metric":
        return cls(np.ones(dim))

    def momentum(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.normal(size=self.dim)
        return self._lower @ z if self.dense else z * np.sqrt(self._diag)

    def velocity(self, p: np.ndarray) -> np.ndarray:
        return cho_solve((self._lower, True), p) if self.dense else p / self._diag

    def kinetic(self, p: np.ndarray) -> float:
        return 0.5 * float(p @ self.velocity(p))


class HmcStep(NamedTuple):
    theta: np.ndarray
    accepted: bool
    density: LogDensity


def leapfrog(
    state: np.ndarray,
    momentum: np.ndarray,
    grad_fn: GradFn,
    step_size: float,
    n_steps: int,
    mass: Union[None, np.ndarray, Metric] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Half kick, n_steps of drift/kick, closing half kick.

    ``grad_fn`` returns the gradient of the log density and raises
    InvalidRegionError where it is undefined; the error propagates.
    """
    if isinstance(mass, Metric):
        metric = mass
    else:
        metric = Metric.unit(len(state)) if mass is None else Metric(mass)
    grad = grad_fn(state)
    x = np.array(state, dtype=float)
    p = np.array(momentum, dtype=float) + 0.5 * step_size * grad
    for i in range(n_steps):
        x = x + step_size * metric.velocity(p)
        grad = grad_fn(x)
        if i != n_steps - 1:
            p = p + step_size * grad
    p = p + 0.5 * step_size * grad
    return x, p


def hmc_step(
    rng: np.random.Generator,
    current: Union[LatentState, np.ndarray],
    target: Target,
    config: HmcConfig,
    current_density: Optional[LogDensity] = None,
    metric: Optional[Metric] = None,
) -> HmcStep:
    """One HMC transition. Rejected or divergent proposals return ``current`` unchanged."""
    theta = current.theta if isinstance(current, LatentState) else np.asarray(current, dtype=float)
    density = current_density if current_density is not None else target(theta)
    if not density.finite or density.gradient is None:
        raise InvalidRegionError("current state has -inf log joint")

    metric = metric if metric is not None else Metric(config.mass_vector(len(theta)))
    p0 = metric.momentum(rng)
    log_u = np.log(rng.uniform())
    last = {}

    def grad_fn(x):
        if x is theta:
            return density.gradient
        d = target(x)
        last["density"] = d
        if d.gradient is None or not np.all(np.isfinite(d.gradient)):
            raise InvalidRegionError("trajectory left the finite-density region")
        return d.gradient

    try:
        with np.errstate(over="ignore", invalid="ignore"):
            x1, p1 = leapfrog(theta, p0, grad_fn, config.step_size, config.n_leapfrog, metric)
    except InvalidRegionError:
        return HmcStep(theta, False, density)

    proposed = last["density"]
    with np.errstate(over="ignore", invalid="ignore"):
        h_current = -density.value + metric.kinetic(p0)
        h_proposed = -proposed.value + metric.kinetic(p1)
        log_accept = h_current - h_proposed
    if np.isfinite(log_accept) and log_u < log_accept:
        return HmcStep(x1, True, proposed)
    return HmcStep(theta, False, density)


def run_chain(
    target: Target,
    init: Union[LatentState, np.ndarray],
    n_steps: int,
    config: HmcConfig,
    rng: Optional[np.random.Generator] = None,
    desc: str = "hmc",
    metric: Optional[Metric] = None,
) -> Chain:
    """``n_steps`` sequential transitions; sample 0 is ``init``."""
    rng = rng if rng is not None else seeding.spawn(config.seed, seeding.HMC, 0)
    theta = init.theta if isinstance(init, LatentState) else np.asarray(init, dtype=float)
    density = target(theta)
    if not density.finite:
        raise InvalidRegionError("chain initialised in a -inf region")
    metric = metric if metric is not None else Metric(config.mass_vector(len(theta)))

    samples = np.empty((n_steps + 1, len(theta)))
    log_joints = np.empty(n_steps + 1)
    accepted = np.zeros(n_steps + 1, dtype=bool)
    samples[0], log_joints[0], accepted[0] = theta, density.value, True
    for t in tqdm(range(1, n_steps + 1), desc=desc, disable=not SHOW_PROGRESS, leave=False):
        step = hmc_step(rng, theta, target, config, density, metric)
        theta, density = step.theta, step.density
        samples[t], log_joints[t], accepted[t] = theta, density.value, step.accepted
    return Chain(samples=samples, log_joints=log_joints, accepted=accepted, config=config)


def _tail_mean(chain: Chain, fraction: float) -> float:
    n_tail = max(1, int(round(fraction * (len(chain) - 1))))
    return float(np.mean(chain.log_joints[-n_tail:]))


def resolve_metric(config: HmcConfig, target: Target, init: np.ndarray) -> Metric:
    """The configured mass, or the model's Fisher information at ``init`` when asked for."""
    if config.preconditioner != "fisher" or config.mass is not None:
        return Metric(config.mass_vector(len(init)))
    fisher = getattr(target, "fisher_matrix", None)
    if fisher is None:
        raise ValueError("the fisher preconditioner needs a model target")
    info = fisher(init)
    diag = info.diagonal()
    logger.debug(f"Fisher mass diagonal spans {diag.min():.3g} .. {diag.max():.3g}")
    return Metric(info)


def restart_calibrate(
    spec: ModelSpec,
    data: Dataset,
    config: HmcConfig,
    target: Optional[Target] = None,
) -> RestartResult:
    """Run the restart schedule and return the last run with its burn-in discarded.

    A run whose acceptance rate is below ``min_acceptance`` has a frozen tail,
    so it never takes part in a convergence comparison.
    """
    target = target if target is not None else JointTarget(spec, data)
    init = initial_state(spec).theta
    metric = resolve_metric(config, target, init)

    schedule, means, rates = [], [], []
    converged = False
    chain = None
    length, run_index = config.base_run_steps, 0
    while length <= config.max_total_steps:
        chain = run_chain(
            target, init, length, config,
            rng=seeding.spawn(config.seed, seeding.HMC, run_index),
            desc=f"run {run_index + 1} ({length} steps)",
            metric=metric,
        )
        mean = _tail_mean(chain, config.tail_fraction)
        schedule.append(length)
        means.append(mean)
        rates.append(chain.acceptance_rate)
        logger.info(
            f"Restart run {run_index + 1}: {length} steps, tail mean log joint {mean:.4f}, "
            f"acceptance {chain.acceptance_rate:.2f}"
        )
        if chain.acceptance_rate < config.min_acceptance:
            logger.warning(
                f"Run {run_index + 1} accepted {chain.acceptance_rate:.3f} of proposals "
                f"(floor {config.min_acceptance}); lower step_size or set a mass"
            )
        elif len(means) >= 2 and rates[-2] >= config.min_acceptance:
            change = abs(means[-1] - means[-2]) / max(abs(means[-2]), np.finfo(float).tiny)
            logger.debug(f"Relative change in tail mean: {change:.3e}")
            if change < config.convergence_tol:
                converged = True
                break
        length += config.base_run_steps
        run_index += 1

    if not converged:
        logger.warning(
            f"Restart schedule exhausted at {schedule[-1]} steps without convergence"
        )
    burn = int(config.burn_in_fraction * len(chain))
    retained = Chain(
        samples=chain.samples[burn:],
        log_joints=chain.log_joints[burn:],
        accepted=chain.accepted[burn:],
        config=config,
    )
    return RestartResult(
        chain=retained,
        schedule_log=tuple(schedule),
        tail_means=tuple(means),
        acceptance_rates=tuple(rates),
        converged=converged,
    )


# ---------------------------------------------------------------------------
# posterior mapping and export
# ---------------------------------------------------------------------------


def posterior_params(
    spec: ModelSpec, chain: Chain, drivers: Sequence[str]
) -> Dict[str, np.ndarray]:
    """Per-driver parameter samples, each an array (n_samples, 7) in PARAM_NAMES order."""
    if len(chain) == 0:
        raise ValueError("empty chain")
    if len(drivers) != spec.n_drivers:
        raise ValueError(f"{len(drivers)} driver ids for {spec.n_drivers} model drivers")
    realized = np.stack([realize_all(spec, theta) for theta in chain.samples])
    return {driver: realized[:, d, :] for d, driver in enumerate(drivers)}


def posterior_means(posterior: Dict[str, np.ndarray]) -> Dict[str, IdmParams]:
    return {driver: IdmParams.from_array(s.mean(axis=0)) for driver, s in posterior.items()}


def posterior_frame(posterior: Dict[str, np.ndarray]) -> pd.DataFrame:
    """Long format: driver_id, parameter_name, sample_index, value."""
    frames = []
    for driver, samples in posterior.items():
        m = len(samples)
        frames.append(pd.DataFrame({
            "driver_id": driver,
            "parameter_name": np.tile(PARAM_NAMES, m),
            "sample_index": np.repeat(np.arange(m), len(PARAM_NAMES)),
            "value": samples.ravel(),
        }))
    return pd.concat(frames, ignore_index=True)


def posterior_from_frame(frame: pd.DataFrame) -> Dict[str, np.ndarray]:
    expected = ["driver_id", "parameter_name", "sample_index", "value"]
    if list(frame.columns) != expected:
        raise DataValidationError(f"posterior CSV must have columns {','.join(expected)}")
    posterior = {}
    for driver, rows in frame.groupby("driver_id", sort=False):
        wide = rows.pivot(index="sample_index", columns="parameter_name", values="value")
        missing = [name for name in PARAM_NAMES if name not in wide.columns]
        if missing:
            raise DataValidationError(f"posterior for driver {driver} lacks {', '.join(missing)}")
        posterior[str(driver)] = wide[list(PARAM_NAMES)].to_numpy(dtype=float)
    return posterior


def batch_means_mcse(samples: np.ndarray, n_batches: int = 20) -> np.ndarray:
    """Monte-Carlo standard error of the mean per column, by non-overlapping batch means."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    batch = len(samples) // n_batches
    if batch < 1:
        raise ValueError("not enough samples for batch means")
    means = samples[: batch * n_batches].reshape(n_batches, batch, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)
