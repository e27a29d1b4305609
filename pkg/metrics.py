"""
Measures of error and report assembly.

Scoring convention for every method: the RMSE of a parameter set is the mean
over instances of each instance's RMSE between one-step predictions and the
observed acceleration. The KL measure fits a Gaussian to the observed and to
the predicted accelerations of each instance and averages KL(observed || predicted)
over instances (direction switchable).
"""
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import mean_squared_error

from config import PARAM_NAMES, SIGMA_FLOOR
from errors import DataValidationError
from idm import acceleration_from_columns, params_valid
from models import (
    CalibrationReport, Dataset, DeConfig, Formulation, IdmParams, Method, ParamSummary,
    RestartResult, TableRow,
)
from trajectory_data import literature_params_by_driver

QUANTILE_LEVELS = (0.05, 0.25, 0.5, 0.75, 0.95)
KL_DIRECTIONS = ("observed_to_predicted", "predicted_to_observed")

BAYES_METHODS: Dict[Formulation, Method] = {
    Formulation.POOLED: "Bayes-Pooled",
    Formulation.HIERARCHICAL: "Bayes-Hierarchical",
    Formulation.INDIVIDUAL: "Bayes-Individual",
}
_METHOD_ORDER = ("Bayes-Pooled", "Bayes-Hierarchical", "Bayes-Individual", "DE", "Literature")


def rmse(pred: Sequence[float], obs: Sequence[float]) -> float:
    pred = np.asarray(pred, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if pred.shape != obs.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {obs.shape}")
    if pred.size == 0:
        raise ValueError("rmse of an empty series")
    return float(np.sqrt(mean_squared_error(obs, pred)))


# ---------------------------------------------------------------------------
# dataset-level predictions
# ---------------------------------------------------------------------------


def params_matrix(params_by_driver: Mapping[str, IdmParams], data: Dataset) -> np.ndarray:
    """Stack per-driver parameters in the dataset's driver order."""
    missing = [d for d in data.drivers if d not in params_by_driver]
    if missing:
        raise DataValidationError(f"no parameters for driver {missing[0]}")
    return np.stack([params_by_driver[d].to_array() for d in data.drivers])


def stacked_predictions(matrix: np.ndarray, data: Dataset) -> np.ndarray:
    """One-step predictions for every row of the dataset; +inf rows for invalid params."""
    st = data.stacked
    rows = np.asarray(matrix, dtype=float)[st.row_driver]
    with np.errstate(all="ignore"):
        pred = acceleration_from_columns(rows.T, st.v, st.dv, st.s)
    return np.where(params_valid(rows), pred, np.inf)


def _per_instance_mean(values: np.ndarray, data: Dataset) -> np.ndarray:
    st = data.stacked
    return np.add.reduceat(values, st.offsets) / st.lengths


def _per_instance_std(values: np.ndarray, data: Dataset) -> np.ndarray:
    st = data.stacked
    mean = _per_instance_mean(values, data)
    dev = values - mean[st.row_instance]
    return np.sqrt(np.add.reduceat(dev * dev, st.offsets) / (st.lengths - 1))


def instance_rmses(pred: np.ndarray, data: Dataset) -> np.ndarray:
    if data.n_instances == 0:
        raise DataValidationError("dataset has no instances")
    with np.errstate(all="ignore"):
        resid = pred - data.stacked.a_obs
        return np.sqrt(_per_instance_mean(resid * resid, data))


def dataset_rmse(params_by_driver: Mapping[str, IdmParams], data: Dataset) -> float:
    pred = stacked_predictions(params_matrix(params_by_driver, data), data)
    return float(np.mean(instance_rmses(pred, data)))


def shared_params_rmse(params: np.ndarray, data: Dataset) -> float:
    """dataset_rmse for one parameter vector shared by every driver."""
    matrix = np.tile(np.asarray(params, dtype=float), (data.n_drivers, 1))
    return float(np.mean(instance_rmses(stacked_predictions(matrix, data), data)))


# ---------------------------------------------------------------------------
# KL divergence
# ---------------------------------------------------------------------------


def gaussian_kl(mu1, sd1, mu2, sd2):
    """KL(N(mu1, sd1^2) || N(mu2, sd2^2)); vectorizes over numpy inputs."""
    sd1 = np.asarray(sd1, dtype=float)
    sd2 = np.asarray(sd2, dtype=float)
    if np.any(sd1 <= 0) or np.any(sd2 <= 0):
        raise ValueError("standard deviations must be positive")
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    kl = np.log(sd2 / sd1) + (sd1 ** 2 + (mu1 - mu2) ** 2) / (2.0 * sd2 ** 2) - 0.5
    return float(kl) if kl.ndim == 0 else kl


def avg_kl(
    params_by_driver: Mapping[str, IdmParams],
    data: Dataset,
    direction: str = "observed_to_predicted",
    sigma_floor: float = SIGMA_FLOOR,
) -> float:
    if direction not in KL_DIRECTIONS:
        raise ValueError(f"direction must be one of {KL_DIRECTIONS}, got {direction!r}")
    if data.n_instances == 0:
        raise DataValidationError("dataset has no instances")
    pred = stacked_predictions(params_matrix(params_by_driver, data), data)
    obs = data.stacked.a_obs
    mu_obs = _per_instance_mean(obs, data)
    sd_obs = np.maximum(_per_instance_std(obs, data), sigma_floor)
    with np.errstate(all="ignore"):
        mu_pred = _per_instance_mean(pred, data)
        sd_pred = np.maximum(_per_instance_std(pred, data), sigma_floor)
    if direction == "observed_to_predicted":
        kl = gaussian_kl(mu_obs, sd_obs, mu_pred, sd_pred)
    else:
        kl = gaussian_kl(mu_pred, sd_pred, mu_obs, sd_obs)
    return float(np.mean(kl))


# ---------------------------------------------------------------------------
# posterior summaries
# ---------------------------------------------------------------------------


def posterior_summary(posterior: Mapping[str, np.ndarray]) -> List[ParamSummary]:
    """Mean, sample std and 5/25/50/75/95% quantiles (linear interpolation) per driver-parameter."""
    summaries = []
    for driver, samples in posterior.items():
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2 or len(samples) == 0:
            raise ValueError(f"no posterior samples for driver {driver}")
        std = samples.std(axis=0, ddof=1) if len(samples) > 1 else np.zeros(samples.shape[1])
        quantiles = np.quantile(samples, QUANTILE_LEVELS, axis=0, method="linear")
        for j, name in enumerate(PARAM_NAMES):
            q05, q25, q50, q75, q95 = quantiles[:, j]
            summaries.append(ParamSummary(
                driver_id=driver, parameter=name, mean=float(samples[:, j].mean()),
                std=float(std[j]), q05=q05, q25=q25, q50=q50, q75=q75, q95=q95,
            ))
    return summaries


def histogram_frame(posterior: Mapping[str, np.ndarray], bins: int = 20) -> pd.DataFrame:
    """Histogram bins per driver-parameter: driver_id, parameter, bin_lo, bin_hi, count."""
    records = []
    for driver, samples in posterior.items():
        for j, name in enumerate(PARAM_NAMES):
            counts, edges = np.histogram(np.asarray(samples)[:, j], bins=bins)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                records.append((driver, name, float(lo), float(hi), int(c)))
    return pd.DataFrame.from_records(
        records, columns=["driver_id", "parameter", "bin_lo", "bin_hi", "count"]
    )


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def score_row(
    method: Method,
    params_by_driver: Mapping[str, IdmParams],
    data: Dataset,
    prior_sigma: Optional[float] = None,
    kl_direction: str = "observed_to_predicted",
) -> TableRow:
    return TableRow(
        method=method,
        prior_sigma=prior_sigma,
        rmse=dataset_rmse(params_by_driver, data),
        avg_kl=avg_kl(params_by_driver, data, kl_direction),
    )


def build_report(
    method: Method,
    params_by_driver: Mapping[str, IdmParams],
    data: Dataset,
    *,
    prior_sigma: Optional[float] = None,
    posterior: Optional[Mapping[str, np.ndarray]] = None,
    de_config: Optional[DeConfig] = None,
    restart: Optional[RestartResult] = None,
    seed: Optional[int] = None,
    kl_direction: str = "observed_to_predicted",
    diagnostics: Optional[Dict] = None,
) -> CalibrationReport:
    """Score a parameter set and package it with the literature baseline row."""
    row = score_row(method, params_by_driver, data, prior_sigma, kl_direction)
    rows = [row]
    if method != "Literature":
        literature = literature_params_by_driver(data)
        rows.append(score_row("Literature", literature, data, None, kl_direction))
    diagnostics = dict(diagnostics or {})
    if restart is not None:
        diagnostics.update(
            tail_means=list(restart.tail_means),
            acceptance_rates=list(restart.acceptance_rates),
            retained_samples=len(restart.chain),
        )
    return CalibrationReport(
        method=method,
        prior_sigma=prior_sigma,
        de_config=de_config,
        rmse=row.rmse,
        avg_kl=row.avg_kl,
        rows=rows,
        summaries=posterior_summary(posterior) if posterior is not None else [],
        params_by_driver=dict(params_by_driver),
        seed=seed,
        schedule_log=list(restart.schedule_log) if restart is not None else [],
        converged=restart.converged if restart is not None else None,
        diagnostics=diagnostics,
    )


def _row_order(row: TableRow):
    return _METHOD_ORDER.index(row.method), row.prior_sigma if row.prior_sigma is not None else 0.0


def assemble_table(reports: Iterable[CalibrationReport]) -> List[TableRow]:
    """Comparison table: one row per (method, prior sigma), then a single literature row."""
    rows, literature = [], None
    for report in reports:
        for row in report.rows:
            if row.method == "Literature":
                literature = literature or row
            else:
                rows.append(row)
    rows.sort(key=_row_order)
    if literature is not None:
        rows.append(literature)
    return rows


def table_frame(rows: Iterable[TableRow]) -> pd.DataFrame:
    return pd.DataFrame(
        [row.model_dump() for row in rows], columns=["method", "prior_sigma", "rmse", "avg_kl"]
    )


def summary_frame(summaries: Iterable[ParamSummary]) -> pd.DataFrame:
    return pd.DataFrame([s.model_dump() for s in summaries], columns=list(ParamSummary.model_fields))
