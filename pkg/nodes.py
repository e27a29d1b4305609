"""Calibration steps and the nodes of the prior-sensitivity sweep graph."""
from typing import Dict, List, NamedTuple, Optional

import numpy as np
from langgraph.types import Send
from loguru import logger

import rng as seeding
from de_search import run_de
from hmc import posterior_means, posterior_params, restart_calibrate
from metrics import BAYES_METHODS, assemble_table, build_report
from models import (
    CalibrationReport, CellState, Dataset, DeConfig, Formulation, HmcConfig, IdmParams,
    ModelSpec, RestartResult, SweepState,
)


class BayesOutcome(NamedTuple):
    report: CalibrationReport
    posterior: Dict[str, np.ndarray]
    restart: RestartResult


def calibrate_bayes(
    data: Dataset,
    formulation: Formulation,
    prior_sigma: float,
    hmc: HmcConfig,
    parameterization: str = "noncentered",
    kl_direction: str = "observed_to_predicted",
) -> BayesOutcome:
    """Sample one formulation with the restart protocol and score its posterior means."""
    spec = ModelSpec(
        formulation=formulation,
        prior_sigma=prior_sigma,
        n_drivers=data.n_drivers,
        parameterization=parameterization,
    )
    logger.info(
        f"Calibrating {formulation.value} model, prior sigma {prior_sigma}, "
        f"{data.n_drivers} drivers / {data.n_instances} instances"
    )
    restart = restart_calibrate(spec, data, hmc)
    posterior = posterior_params(spec, restart.chain, data.drivers)
    report = build_report(
        BAYES_METHODS[formulation],
        posterior_means(posterior),
        data,
        prior_sigma=prior_sigma,
        posterior=posterior,
        restart=restart,
        seed=hmc.seed,
        kl_direction=kl_direction,
        diagnostics={"parameterization": parameterization, "preconditioner": hmc.preconditioner},
    )
    return BayesOutcome(report, posterior, restart)


def calibrate_de(
    data: Dataset, config: DeConfig, kl_direction: str = "observed_to_predicted"
) -> CalibrationReport:
    """Run DE once and score its best candidate as a shared parameter set."""
    result = run_de(config, data)
    best = IdmParams.from_array(result.best.params)
    return build_report(
        "DE",
        {driver: best for driver in data.drivers},
        data,
        de_config=config,
        seed=config.seed,
        kl_direction=kl_direction,
        diagnostics={
            "best_fitness": result.best.fitness,
            "history": list(result.history),
            "population_rmse": list(result.population_rmse),
            "n_evaluations": result.n_evaluations,
        },
    )


# ---------------------------------------------------------------------------
# sweep graph nodes
# ---------------------------------------------------------------------------


def prepare_sweep(state: SweepState):
    """Check the sweep inputs before fanning out."""
    if not state["formulations"]:
        raise ValueError("sweep needs at least one formulation")
    if not state["prior_sigmas"] or min(state["prior_sigmas"]) <= 0:
        raise ValueError("prior sigmas must be a non-empty list of positive values")
    logger.info(
        f"Sweep: {len(state['formulations'])} formulations x "
        f"{len(state['prior_sigmas'])} prior sigmas"
    )
    return {"reports": []}


def fan_out_cells(state: SweepState) -> List[Send]:
    """Map step: one calibrate_cell run per (formulation, prior sigma)."""
    return [
        Send("calibrate_cell", {
            "data": state["data"],
            "formulation": Formulation(formulation),
            "prior_sigma": float(sigma),
            "hmc": state["hmc"],
            "parameterization": state["parameterization"],
            "seed": state["seed"],
            "cell": (f, s),
            "kl_direction": state["kl_direction"],
        })
        for f, formulation in enumerate(state["formulations"])
        for s, sigma in enumerate(state["prior_sigmas"])
    ]


def calibrate_cell(state: CellState):
    """Run one sweep cell; its HMC seed depends only on the cell's position."""
    f, s = state["cell"]
    hmc = state["hmc"].model_copy(
        update={"seed": seeding.sub_seed(state["seed"], seeding.SWEEP, f, s)}
    )
    outcome = calibrate_bayes(
        state["data"], state["formulation"], state["prior_sigma"], hmc,
        state["parameterization"], state["kl_direction"],
    )
    return {"reports": [outcome.report]}


def assemble_sweep_table(state: SweepState):
    rows = assemble_table(state["reports"])
    not_converged = [r for r in state["reports"] if r.converged is False]
    if not_converged:
        logger.warning(f"{len(not_converged)} sweep cell(s) did not converge")
    return {"table": rows}


def sweep_converged(reports: List[CalibrationReport]) -> Optional[bool]:
    flags = [r.converged for r in reports if r.converged is not None]
    return all(flags) if flags else None
