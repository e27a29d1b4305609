"""
Probabilistic IDM: latent layout, log prior, log likelihood, log joint and its gradient.

Three formulations share one likelihood and differ in how a driver's parameters
are realized from the latent vector:

- pooled:       theta (k)                       -> same parameters for every driver
- individual:   theta (n_drivers, k)            -> each driver's own row
- hierarchical: theta_norm (n_drivers, k), mu (k), sigma_raw (k)
                non-centered: theta_d = mu + softplus(sigma_raw) * theta_norm_d
                centered:     theta_d held directly, theta_d ~ N(mu, softplus(sigma_raw))

Every instance contributes sum_t log N(a_obs[t] | idm(theta_d, state_t), sigma_i^2)
with sigma_i = max(std of a_obs in the instance, sigma_floor). Invalid realized
parameters give -inf.
"""
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.linalg import block_diag
from scipy.special import expit
from scipy.stats import norm

from config import PARAM_NAMES
from dual import Dual
from errors import InvalidRegionError
from idm import acceleration_from_columns, params_valid
from models import (
    Dataset, Formulation, IdmParams, LatentLayout, LatentState, LogDensity, ModelSpec,
)

THETA = "theta"
THETA_NORM = "theta_norm"
MU = "mu"
SIGMA_RAW = "sigma_raw"
# driver slot used by population-level entries
POPULATION = -1

StateLike = Union[LatentState, np.ndarray]


def softplus(x):
    return np.logaddexp(0.0, x)


def _hierarchical_block(spec: ModelSpec) -> str:
    return THETA if spec.parameterization == "centered" else THETA_NORM


def build_layout(spec: ModelSpec) -> LatentLayout:
    if spec.formulation is Formulation.POOLED:
        keys = [(THETA, POPULATION, name) for name in PARAM_NAMES]
    elif spec.formulation is Formulation.INDIVIDUAL:
        keys = [(THETA, d, name) for d in range(spec.n_drivers) for name in PARAM_NAMES]
    else:
        block = _hierarchical_block(spec)
        keys = [(block, d, name) for d in range(spec.n_drivers) for name in PARAM_NAMES]
        keys += [(MU, POPULATION, name) for name in PARAM_NAMES]
        keys += [(SIGMA_RAW, POPULATION, name) for name in PARAM_NAMES]
    return LatentLayout(keys=tuple(keys))


def latent_dim(spec: ModelSpec) -> int:
    if spec.formulation is Formulation.POOLED:
        return spec.k
    if spec.formulation is Formulation.INDIVIDUAL:
        return spec.n_drivers * spec.k
    return (spec.n_drivers + 2) * spec.k


def unflatten(spec: ModelSpec, theta: np.ndarray) -> Dict[str, np.ndarray]:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (latent_dim(spec),):
        raise ValueError(f"latent vector has shape {theta.shape}, expected ({latent_dim(spec)},)")
    k, n = spec.k, spec.n_drivers
    if spec.formulation is Formulation.POOLED:
        return {THETA: theta.reshape(1, k)}
    if spec.formulation is Formulation.INDIVIDUAL:
        return {THETA: theta.reshape(n, k)}
    return {
        _hierarchical_block(spec): theta[: n * k].reshape(n, k),
        MU: theta[n * k: (n + 1) * k],
        SIGMA_RAW: theta[(n + 1) * k:],
    }


def flatten(spec: ModelSpec, parts: Dict[str, np.ndarray]) -> np.ndarray:
    if spec.formulation is not Formulation.HIERARCHICAL:
        return np.asarray(parts[THETA], dtype=float).ravel().copy()
    return np.concatenate([
        np.asarray(parts[_hierarchical_block(spec)], dtype=float).ravel(),
        np.asarray(parts[MU], dtype=float).ravel(),
        np.asarray(parts[SIGMA_RAW], dtype=float).ravel(),
    ])


def make_state(spec: ModelSpec, theta: np.ndarray) -> LatentState:
    return LatentState(theta=theta, layout=build_layout(spec))


def initial_state(spec: ModelSpec) -> LatentState:
    """Prior mean: literature values, zeros for theta_norm and sigma_raw."""
    center = spec.prior_mean.to_array()
    n, k = spec.n_drivers, spec.k
    if spec.formulation is Formulation.POOLED:
        parts = {THETA: center}
    elif spec.formulation is Formulation.INDIVIDUAL:
        parts = {THETA: np.tile(center, (n, 1))}
    else:
        block = _hierarchical_block(spec)
        driver_rows = np.tile(center, (n, 1)) if block == THETA else np.zeros((n, k))
        parts = {block: driver_rows, MU: center, SIGMA_RAW: np.zeros(k)}
    return make_state(spec, flatten(spec, parts))


def _theta_of(state: StateLike) -> np.ndarray:
    return state.theta if isinstance(state, LatentState) else np.asarray(state, dtype=float)


def realize_all(spec: ModelSpec, state: StateLike) -> np.ndarray:
    """Per-driver parameter matrix (n_drivers, k) for a latent state."""
    parts = unflatten(spec, _theta_of(state))
    if spec.formulation is Formulation.POOLED:
        return np.repeat(parts[THETA], spec.n_drivers, axis=0)
    if spec.formulation is Formulation.INDIVIDUAL:
        return parts[THETA].copy()
    if spec.parameterization == "centered":
        return parts[THETA].copy()
    return parts[MU] + softplus(parts[SIGMA_RAW]) * parts[THETA_NORM]


def realize_params(spec: ModelSpec, state: StateLike, driver: int) -> IdmParams:
    """Parameters of one driver; may violate IdmParams invariants, callers guard."""
    if not 0 <= driver < spec.n_drivers:
        raise IndexError(f"driver index {driver} out of range for {spec.n_drivers} drivers")
    return IdmParams.from_array(realize_all(spec, state)[driver])


# ---------------------------------------------------------------------------
# prior
# ---------------------------------------------------------------------------


def _log_prior_and_grad(spec: ModelSpec, theta: np.ndarray) -> Tuple[float, np.ndarray]:
    parts = unflatten(spec, theta)
    center = spec.prior_mean.to_array()
    sigma = spec.prior_sigma

    if spec.formulation is not Formulation.HIERARCHICAL:
        x = parts[THETA]
        value = norm.logpdf(x, loc=center, scale=sigma).sum()
        return float(value), flatten(spec, {THETA: -(x - center) / sigma ** 2})

    mu, raw = parts[MU], parts[SIGMA_RAW]
    value = norm.logpdf(mu, loc=center, scale=sigma).sum()
    value += norm.logpdf(raw, loc=0.0, scale=sigma).sum()
    grad_mu = -(mu - center) / sigma ** 2
    grad_raw = -raw / sigma ** 2

    if spec.parameterization == "centered":
        x = parts[THETA]
        scale = softplus(raw)
        resid = x - mu
        value += norm.logpdf(x, loc=mu, scale=scale).sum()
        grad_x = -resid / scale ** 2
        grad_mu = grad_mu + (resid / scale ** 2).sum(axis=0)
        grad_scale = (-1.0 / scale + resid ** 2 / scale ** 3).sum(axis=0)
        grad_raw = grad_raw + grad_scale * expit(raw)
        block = {THETA: grad_x}
    else:
        z = parts[THETA_NORM]
        value += norm.logpdf(z).sum()
        block = {THETA_NORM: -z}

    return float(value), flatten(spec, {**block, MU: grad_mu, SIGMA_RAW: grad_raw})


def log_prior(spec: ModelSpec, state: StateLike) -> float:
    return _log_prior_and_grad(spec, _theta_of(state))[0]


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------


class PreparedData:
    """Row-level arrays of a dataset, precomputed once per (spec, dataset) pair."""

    def __init__(self, spec: ModelSpec, data: Dataset):
        if data.n_drivers > spec.n_drivers:
            raise ValueError(
                f"dataset has {data.n_drivers} drivers, model spec covers {spec.n_drivers}"
            )
        st = data.stacked
        self.v, self.dv, self.s, self.a_obs = st.v, st.dv, st.s, st.a_obs
        self.row_driver = st.row_driver
        sigma_instance = np.maximum(st.instance_std, spec.sigma_floor)
        self.sigma = sigma_instance[st.row_instance]
        self.log_norm = -np.log(self.sigma).sum() - 0.5 * len(self.sigma) * np.log(2 * np.pi)
        n_rows = len(self.v)
        self.driver_sum = sparse.csr_matrix(
            (np.ones(n_rows), (self.row_driver, np.arange(n_rows))),
            shape=(spec.n_drivers, n_rows),
        )


def _log_likelihood_and_param_grad(
    spec: ModelSpec, params: np.ndarray, prepared: PreparedData, with_grad: bool
) -> Tuple[float, Optional[np.ndarray]]:
    """Value and d/d(per-driver params) of the log likelihood; -inf when params are invalid."""
    if not np.all(params_valid(params)):
        return -np.inf, None
    rows = params[prepared.row_driver]
    if with_grad:
        pred = acceleration_from_columns(Dual.variables(rows), prepared.v, prepared.dv, prepared.s)
        mean, tangent = pred.val, pred.eps
    else:
        mean = acceleration_from_columns(rows.T, prepared.v, prepared.dv, prepared.s)
        tangent = None
    if not np.all(np.isfinite(mean)):
        return -np.inf, None

    resid = prepared.a_obs - mean
    value = -0.5 * np.sum((resid / prepared.sigma) ** 2) + prepared.log_norm
    if not with_grad:
        return float(value), None
    row_grad = (resid / prepared.sigma ** 2)[:, None] * tangent
    return float(value), np.asarray(prepared.driver_sum @ row_grad)


def _chain_to_latent(spec: ModelSpec, theta: np.ndarray, param_grad: np.ndarray) -> np.ndarray:
    parts = unflatten(spec, theta)
    if spec.formulation is Formulation.POOLED:
        return param_grad.sum(axis=0)
    if spec.formulation is Formulation.INDIVIDUAL:
        return param_grad.ravel().copy()
    zeros = np.zeros(spec.k)
    if spec.parameterization == "centered":
        return flatten(spec, {THETA: param_grad, MU: zeros, SIGMA_RAW: zeros})
    raw = parts[SIGMA_RAW]
    return flatten(spec, {
        THETA_NORM: param_grad * softplus(raw),
        MU: param_grad.sum(axis=0),
        SIGMA_RAW: (param_grad * parts[THETA_NORM]).sum(axis=0) * expit(raw),
    })


def log_likelihood(spec: ModelSpec, state: StateLike, data: Dataset) -> float:
    params = realize_all(spec, _theta_of(state))
    return _log_likelihood_and_param_grad(spec, params, PreparedData(spec, data), False)[0]


def log_joint(spec: ModelSpec, state: StateLike, data: Dataset) -> float:
    return log_prior(spec, state) + log_likelihood(spec, state, data)


def evaluate(
    spec: ModelSpec, state: StateLike, prepared: PreparedData, with_grad: bool = True
) -> LogDensity:
    theta = _theta_of(state)
    prior, prior_grad = _log_prior_and_grad(spec, theta)
    params = realize_all(spec, theta)
    lik, param_grad = _log_likelihood_and_param_grad(spec, params, prepared, with_grad)
    value = prior + lik
    if not np.isfinite(value) or not with_grad:
        return LogDensity(value=value if np.isfinite(value) else -np.inf)
    return LogDensity(value=value, gradient=prior_grad + _chain_to_latent(spec, theta, param_grad))


def _driver_fisher(spec: ModelSpec, params: np.ndarray, prepared: PreparedData) -> np.ndarray:
    """Gauss-Newton information of each driver's parameters, shape (n_drivers, k, k)."""
    pred = acceleration_from_columns(
        Dual.variables(params[prepared.row_driver]), prepared.v, prepared.dv, prepared.s
    )
    weighted = pred.eps / prepared.sigma[:, None]
    info = np.zeros((spec.n_drivers, spec.k, spec.k))
    for d in range(spec.n_drivers):
        rows = weighted[prepared.row_driver == d]
        info[d] = rows.T @ rows
    return info


def fisher_matrix(spec: ModelSpec, state: StateLike, prepared: PreparedData) -> np.ndarray:
    """Gauss-Newton curvature of the negative log joint in latent coordinates.

    Used as a fixed HMC mass. The sigma_raw block takes theta_norm at unit
    scale; at the prior mean theta_norm is zero.
    """
    theta = _theta_of(state)
    params = realize_all(spec, theta)
    if not np.all(params_valid(params)):
        raise InvalidRegionError("Fisher information requested at invalid parameters")
    info = _driver_fisher(spec, params, prepared)
    if not np.all(np.isfinite(info)):
        raise InvalidRegionError("Fisher information is not finite at this state")
    k, n = spec.k, spec.n_drivers
    prior_precision = np.eye(k) / spec.prior_sigma ** 2

    if spec.formulation is Formulation.POOLED:
        return info.sum(axis=0) + prior_precision
    if spec.formulation is Formulation.INDIVIDUAL:
        return block_diag(*(info + prior_precision))

    raw = unflatten(spec, theta)[SIGMA_RAW]
    scale, slope = softplus(raw), expit(raw)
    out = np.zeros((latent_dim(spec), latent_dim(spec)))
    mu, rw = slice(n * k, (n + 1) * k), slice((n + 1) * k, None)
    if spec.parameterization == "centered":
        tie = np.diag(1.0 / scale ** 2)
        for d in range(n):
            block = slice(d * k, (d + 1) * k)
            out[block, block] = info[d] + tie
            out[block, mu] = out[mu, block] = -tie
        out[mu, mu] = n * tie + prior_precision
        out[rw, rw] = np.diag(2.0 * n * (slope / scale) ** 2) + prior_precision
        return out

    for d in range(n):
        block = slice(d * k, (d + 1) * k)
        out[block, block] = scale[:, None] * info[d] * scale[None, :] + np.eye(k)
        out[block, mu] = scale[:, None] * info[d]
        out[mu, block] = info[d] * scale[None, :]
    out[mu, mu] = info.sum(axis=0) + prior_precision
    out[rw, rw] = slope[:, None] * info.sum(axis=0) * slope[None, :] + prior_precision
    return out


def grad_log_joint(spec: ModelSpec, state: StateLike, data: Dataset) -> np.ndarray:
    density = evaluate(spec, state, PreparedData(spec, data), with_grad=True)
    if density.gradient is None:
        raise InvalidRegionError("log joint is -inf at this state; gradient undefined")
    return density.gradient


class JointTarget:
    """Callable log-joint target for the sampler, with data prepared once."""

    def __init__(self, spec: ModelSpec, data: Dataset):
        self.spec = spec
        self.data = data
        self.prepared = PreparedData(spec, data)

    @property
    def dim(self) -> int:
        return latent_dim(self.spec)

    def __call__(self, theta: np.ndarray) -> LogDensity:
        return evaluate(self.spec, theta, self.prepared, with_grad=True)

    def fisher_matrix(self, theta: np.ndarray) -> np.ndarray:
        return fisher_matrix(self.spec, theta, self.prepared)
