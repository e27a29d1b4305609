"""
Intelligent Driver Model.

    a_next = a * [1 - (v/v0)^delta - (s*/s)^2]
    s*(v, dv) = s0 + s1 * sqrt(v/v0) + T*v + v*dv / (2*sqrt(a*b))

dv is follower minus leader speed, so a closing gap (dv > 0) widens s*.
s* is not clamped at zero.
"""
from typing import Sequence, Union

import numpy as np
from loguru import logger

import dual
from config import PARAM_NAMES
from errors import GapCollapseError, InvalidParamsError
from models import CfInstance, IdmParams, KinematicState

ArrayLike = Union[float, np.ndarray]


def _desired_gap(v, dv, v0, T, a, b, s0, s1):
    return s0 + s1 * dual.sqrt(v / v0) + T * v + v * dv / (2.0 * dual.sqrt(a * b))


def _acceleration(v, dv, s, v0, T, a, b, delta, s0, s1):
    s_star = _desired_gap(v, dv, v0, T, a, b, s0, s1)
    return a * (1.0 - (v / v0) ** delta - (s_star / s) ** 2)


def acceleration_from_columns(columns: Sequence, v, dv, s):
    """Evaluate the model with one value (or Dual) per parameter, in PARAM_NAMES order.

    Each column may be a scalar, an array aligned with the observations, or a
    ``dual.Dual``; the result has the matching type.
    """
    v0, T, a, b, delta, s0, s1 = columns
    return _acceleration(v, dv, s, v0, T, a, b, delta, s0, s1)


def params_valid(values: np.ndarray) -> np.ndarray:
    """Row-wise validity mask for an array of parameter vectors (..., 7)."""
    values = np.asarray(values, dtype=float)
    v0, T, a, b, delta, s0, s1 = np.moveaxis(values, -1, 0)
    return (
        np.all(np.isfinite(values), axis=-1)
        & (v0 > 0) & (T >= 0) & (a > 0) & (b > 0) & (delta > 0) & (s0 >= 0) & (s1 >= 0)
    )


def desired_gap(p: IdmParams, v: ArrayLike, dv: ArrayLike) -> ArrayLike:
    p.ensure_valid()
    if np.any(np.asarray(v) < 0):
        raise InvalidParamsError("speed must be non-negative")
    return _desired_gap(v, dv, p.v0, p.T, p.a, p.b, p.s0, p.s1)


def predict_accel(p: IdmParams, state: KinematicState) -> float:
    p.ensure_valid()
    state.ensure_valid()
    return float(
        _acceleration(state.v, state.dv, state.s, p.v0, p.T, p.a, p.b, p.delta, p.s0, p.s1)
    )


def predict_instance(p: IdmParams, inst: CfInstance) -> np.ndarray:
    """One-step predictions at every observed state (no rollout)."""
    p.ensure_valid()
    return np.asarray(
        _acceleration(inst.v, inst.dv, inst.s, p.v0, p.T, p.a, p.b, p.delta, p.s0, p.s1),
        dtype=float,
    )


def equilibrium_gap(p: IdmParams, v: float) -> float:
    """Steady-state gap at which a follower at constant speed v neither speeds up nor slows.

    Infinite at or above v0.
    """
    p.ensure_valid()
    if v < 0:
        raise InvalidParamsError("speed must be non-negative")
    free_road = 1.0 - (v / p.v0) ** p.delta
    if free_road <= 0:
        return float("inf")
    return float(_desired_gap(v, 0.0, p.v0, p.T, p.a, p.b, p.s0, p.s1) / np.sqrt(free_road))


def simulate_forward(
    p: IdmParams,
    leader_speed: Sequence[float],
    init: KinematicState,
    dt: float,
    driver_id: str = "sim",
    instance_id: str = "0",
) -> CfInstance:
    """Roll the follower forward behind a given leader speed profile.

    Semi-implicit Euler: the new speed (floored at 0) is used to advance the gap.
    Raises GapCollapseError at the first step whose gap is not positive.
    """
    p.ensure_valid()
    init.ensure_valid()
    if not dt > 0:
        raise InvalidParamsError(f"dt must be positive, got {dt}")
    leader = np.asarray(leader_speed, dtype=float)
    n = len(leader)
    if n < 2:
        raise InvalidParamsError("leader profile needs at least 2 samples")

    v = np.empty(n)
    dv = np.empty(n)
    s = np.empty(n)
    acc = np.empty(n)
    v[0], dv[0], s[0] = init.v, init.dv, init.s
    args = tuple(getattr(p, name) for name in PARAM_NAMES)
    for t in range(n):
        acc[t] = _acceleration(v[t], dv[t], s[t], *args)
        if t == n - 1:
            break
        v[t + 1] = max(0.0, v[t] + acc[t] * dt)
        dv[t + 1] = v[t + 1] - leader[t + 1]
        s[t + 1] = s[t] - dv[t + 1] * dt
        if s[t + 1] <= 0:
            logger.debug(f"gap collapse for {driver_id}/{instance_id} at step {t + 1}")
            raise GapCollapseError(t + 1, float(s[t + 1]))

    return CfInstance(
        driver_id=driver_id, instance_id=instance_id, dt=dt, v=v, dv=dv, s=s, a_obs=acc
    )
