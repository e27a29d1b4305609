"""
Trajectory ingestion, validation and synthetic data generation.

CSV layout (header required, rows grouped by driver/instance, time-sorted):

    driver_id,instance_id,time_s,v_mps,dv_mps,gap_m,accel_mps2

Instances with temporal gaps or physically impossible samples are rejected,
never repaired.
"""
import io
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import TypeAdapter, ValidationError

import rng as seeding
from config import CSV_COLUMNS, DEFAULT_DT, LITERATURE_VALUES, PARAM_NAMES
from errors import DataValidationError, GapCollapseError
from idm import equilibrium_gap, simulate_forward
from models import (
    CfInstance, Dataset, IdmParams, IngestSummary, InstanceStats, KinematicState,
    Rejection, SyntheticData,
)

# dt is resolved to this many decimals of a second
DT_DECIMALS = 9
DT_RTOL = 1e-6

_TRUTH_ADAPTER = TypeAdapter(Dict[str, IdmParams])
_NUMERIC = ("time_s", "v_mps", "dv_mps", "gap_m", "accel_mps2")


def _read_frame(text: str) -> pd.DataFrame:
    if not text or not text.strip():
        raise DataValidationError("empty input: a header row is required")
    try:
        frame = pd.read_csv(
            io.StringIO(text), dtype=str, keep_default_na=False, skipinitialspace=True
        )
    except pd.errors.ParserError as exc:
        raise DataValidationError(f"malformed row: {exc}") from exc
    except pd.errors.EmptyDataError as exc:
        raise DataValidationError("empty input: a header row is required") from exc

    if tuple(frame.columns) != CSV_COLUMNS:
        raise DataValidationError(
            f"expected columns {','.join(CSV_COLUMNS)}; got {','.join(map(str, frame.columns))}"
        )
    # file line of each row: header is line 1
    frame.index = pd.RangeIndex(2, len(frame) + 2)
    return frame


def _coerce_numeric(frame: pd.DataFrame) -> Tuple[pd.DataFrame, pd.Series]:
    """Convert numeric columns; returns the frame and a per-row failure mask."""
    out = frame.copy()
    bad = pd.Series(False, index=frame.index)
    for col in _NUMERIC:
        raw = frame[col]
        unparseable = pd.to_numeric(raw, errors="coerce").isna() | (raw == "")
        bad |= unparseable
        # to_numeric's fast parser can be off by an ULP; astype rounds correctly
        out[col] = raw.mask(unparseable, "nan").astype(float)
    bad |= (frame["driver_id"] == "") | (frame["instance_id"] == "")
    return out, bad


def _label(driver_id: str, instance_id: str) -> str:
    return f"instance {driver_id}/{instance_id}"


def _build_instance(driver_id: str, instance_id: str, rows: pd.DataFrame) -> CfInstance:
    label = _label(driver_id, instance_id)
    if len(rows) < 2:
        raise DataValidationError(f"series shorter than 2 in {label} (row {rows.index[0]})")

    t = rows["time_s"].to_numpy(dtype=float)
    steps = np.diff(t)
    if np.any(steps <= 0):
        line = rows.index[int(np.argmax(steps <= 0)) + 1]
        raise DataValidationError(f"time not increasing in {label} at row {line}")
    dt = round(float(steps[0]), DT_DECIMALS)
    uneven = ~np.isclose(steps, dt, rtol=DT_RTOL, atol=10.0 ** -DT_DECIMALS)
    if np.any(uneven):
        line = rows.index[int(np.argmax(uneven)) + 1]
        raise DataValidationError(f"non-uniform dt in {label} at row {line}")

    gap = rows["gap_m"].to_numpy(dtype=float)
    if np.any(gap <= 0):
        line = rows.index[int(np.argmax(gap <= 0))]
        raise DataValidationError(f"nonpositive gap in {label} at row {line}")
    speed = rows["v_mps"].to_numpy(dtype=float)
    if np.any(speed < 0):
        line = rows.index[int(np.argmax(speed < 0))]
        raise DataValidationError(f"negative speed in {label} at row {line}")

    try:
        return CfInstance(
            driver_id=driver_id,
            instance_id=instance_id,
            dt=dt,
            v=speed,
            dv=rows["dv_mps"].to_numpy(dtype=float),
            s=gap,
            a_obs=rows["accel_mps2"].to_numpy(dtype=float),
        )
    except ValidationError as exc:
        reason = exc.errors()[0]["msg"].removeprefix("Value error, ")
        raise DataValidationError(f"{reason} in {label}") from exc


def _groups(frame: pd.DataFrame):
    return frame.groupby(["driver_id", "instance_id"], sort=False)


def parse_trajectories(text: str) -> Dataset:
    """Strict parse: the first malformed row or failing instance raises DataValidationError."""
    frame = _read_frame(text)
    frame, bad = _coerce_numeric(frame)
    if bad.any():
        line = bad.index[int(np.argmax(bad.to_numpy()))]
        raise DataValidationError(f"malformed row {line}: unparseable or missing field")

    instances = [
        _build_instance(str(driver_id), str(instance_id), rows)
        for (driver_id, instance_id), rows in _groups(frame)
    ]
    dataset = Dataset.from_instances(instances)
    logger.info(
        f"Parsed {len(frame)} rows into {dataset.n_instances} instances "
        f"from {dataset.n_drivers} drivers"
    )
    return dataset


def ingest_trajectories(text: str) -> Tuple[Dataset, IngestSummary]:
    """Lenient parse: each instance is validated on its own and failures are recorded.

    File-level problems (missing header, wrong columns, column-count errors)
    still raise DataValidationError.
    """
    frame = _read_frame(text)
    frame, bad = _coerce_numeric(frame)

    kept: List[CfInstance] = []
    rejections: List[Rejection] = []
    for (driver_id, instance_id), rows in _groups(frame):
        driver_id, instance_id = str(driver_id), str(instance_id)
        try:
            if bad[rows.index].any():
                line = rows.index[int(np.argmax(bad[rows.index].to_numpy()))]
                raise DataValidationError(f"malformed row {line}")
            kept.append(_build_instance(driver_id, instance_id, rows))
        except DataValidationError as exc:
            reason = str(exc)
            logger.warning(f"Rejected {_label(driver_id, instance_id)}: {reason}")
            rejections.append(
                Rejection(driver_id=driver_id, instance_id=instance_id, reason=reason)
            )

    dataset = Dataset.from_instances(kept)
    summary = IngestSummary(
        n_rows=len(frame),
        n_kept=len(kept),
        n_rejected=len(rejections),
        n_drivers=dataset.n_drivers,
        rejections=rejections,
    )
    return dataset, summary


def serialize_trajectories(dataset: Dataset) -> str:
    """Write a dataset in the CSV layout accepted by parse_trajectories."""
    frames = [
        pd.DataFrame({
            "driver_id": inst.driver_id,
            "instance_id": inst.instance_id,
            "time_s": np.arange(inst.n) * inst.dt,
            "v_mps": inst.v,
            "dv_mps": inst.dv,
            "gap_m": inst.s,
            "accel_mps2": inst.a_obs,
        })
        for inst in dataset.instances
    ]
    if not frames:
        return ",".join(CSV_COLUMNS) + "\n"
    return pd.concat(frames, ignore_index=True).to_csv(index=False, lineterminator="\n")


def instance_stats(inst: CfInstance) -> InstanceStats:
    """Mean and sample (n-1) standard deviation of the observed acceleration."""
    return InstanceStats(
        mean_a=float(np.mean(inst.a_obs)),
        std_a=float(np.std(inst.a_obs, ddof=1)),
    )


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def draw_population(
    n_drivers: int,
    rng: np.random.Generator,
    spread: float = 0.15,
    center: Optional[IdmParams] = None,
) -> Dict[str, IdmParams]:
    """Heterogeneous per-driver parameters scattered around a centre (literature by default).

    Strictly positive parameters get log-normal scatter of scale ``spread``; s1,
    whose centre is 0, is drawn uniformly on [0, spread * s0].
    """
    center = center or IdmParams.literature()
    width = len(str(n_drivers))
    population = {}
    for d in range(n_drivers):
        values = {}
        for name in PARAM_NAMES:
            base = getattr(center, name)
            if name == "s1":
                values[name] = float(rng.uniform(0.0, spread * center.s0))
            else:
                values[name] = float(base * np.exp(rng.normal(0.0, spread)))
        population[f"d{d + 1:0{width}d}"] = IdmParams(**values)
    return population


def default_leader_profiles(
    n_profiles: int,
    n_steps: int,
    dt: float = DEFAULT_DT,
    rng: Optional[np.random.Generator] = None,
) -> List[np.ndarray]:
    """Smooth urban leader speed profiles: a cruise speed with slow oscillation."""
    rng = rng or seeding.spawn(0, seeding.SYNTH)
    t = np.arange(n_steps) * dt
    profiles = []
    for _ in range(n_profiles):
        cruise = rng.uniform(3.0, 5.5)
        amplitude = rng.uniform(0.5, 1.5)
        period = rng.uniform(15.0, 40.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        speed = cruise + amplitude * np.sin(2 * np.pi * t / period + phase)
        profiles.append(np.clip(speed, 0.0, None))
    return profiles


def braking_profile(v_start: float, decel: float, n_steps: int, dt: float = DEFAULT_DT) -> np.ndarray:
    """Leader braking at a constant rate from v_start, then standing."""
    t = np.arange(n_steps) * dt
    return np.clip(v_start - decel * t, 0.0, None)


def generate_synthetic(
    true_params: Mapping[str, IdmParams],
    leader_profiles: Sequence[np.ndarray],
    noise_std: float = 0.0,
    n_instances_per_driver: int = 1,
    dt: float = DEFAULT_DT,
    seed: int = 0,
) -> SyntheticData:
    """Simulate followers behind the given leaders and add Gaussian noise to a_obs.

    Each follower starts at the leader's speed (capped at 0.9 v0) and at the
    matching equilibrium gap. Instance j of driver d follows profile
    ``(d * n_instances_per_driver + j) % len(leader_profiles)``.
    """
    if not dt > 0:
        raise DataValidationError(f"dt must be positive, got {dt}")
    if noise_std < 0:
        raise DataValidationError(f"noise_std must be non-negative, got {noise_std}")
    if not leader_profiles:
        raise DataValidationError("at least one leader profile is required")
    if n_instances_per_driver < 1:
        raise DataValidationError("n_instances_per_driver must be >= 1")

    instances = []
    for d, (driver_id, params) in enumerate(true_params.items()):
        params.ensure_valid()
        for j in range(n_instances_per_driver):
            leader = np.asarray(
                leader_profiles[(d * n_instances_per_driver + j) % len(leader_profiles)],
                dtype=float,
            )
            v_init = min(float(leader[0]), 0.9 * params.v0)
            gap = equilibrium_gap(params, v_init)
            instance_id = f"{driver_id}-{j}"
            try:
                # standing start with s0 = 0 has no positive equilibrium gap
                if not gap > 0:
                    raise GapCollapseError(0, gap)
                init = KinematicState(v=v_init, dv=v_init - float(leader[0]), s=gap)
                inst = simulate_forward(params, leader, init, dt, driver_id, instance_id)
            except GapCollapseError:
                logger.error(f"Leader profile too aggressive for {driver_id} ({instance_id})")
                raise
            if noise_std > 0:
                noise = seeding.spawn(seed, seeding.SYNTH, d, j).normal(0.0, noise_std, inst.n)
                fields = {name: getattr(inst, name) for name in CfInstance.model_fields}
                inst = CfInstance(**{**fields, "a_obs": inst.a_obs + noise})
            instances.append(inst)

    dataset = Dataset.from_instances(instances)
    logger.info(
        f"Generated {dataset.n_instances} synthetic instances for {dataset.n_drivers} drivers"
    )
    return SyntheticData(dataset=dataset, truth=dict(true_params))


def truth_to_json(truth: Mapping[str, IdmParams]) -> str:
    return _TRUTH_ADAPTER.dump_json(dict(truth), indent=2).decode()


def truth_from_json(text: str) -> Dict[str, IdmParams]:
    return _TRUTH_ADAPTER.validate_json(text)


def literature_params_by_driver(dataset: Dataset) -> Dict[str, IdmParams]:
    lit = IdmParams(**LITERATURE_VALUES)
    return {driver: lit for driver in dataset.drivers}
