import operator
from enum import Enum
from functools import cached_property
from typing import Annotated, Any, Dict, List, Literal, NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing_extensions import TypedDict

from config import (
    DEFAULT_DE_BOUNDS, DEFAULT_PRIOR_SIGMAS, GRID_CR_RANGE, GRID_F_RANGE,
    GRID_LAMBDA_RANGE, LITERATURE_VALUES, N_PARAMS, PARAM_NAMES, SIGMA_FLOOR,
)
from errors import InvalidParamsError


def _values_equal(left: Any, right: Any) -> bool:
    if isinstance(left, np.ndarray) or isinstance(right, np.ndarray):
        return np.array_equal(np.asarray(left), np.asarray(right))
    if isinstance(left, pd.DataFrame):
        return isinstance(right, pd.DataFrame) and left.equals(right)
    return left == right


def _frozen_array(value: Any, dtype=np.float64) -> np.ndarray:
    arr = np.array(value, dtype=dtype)
    arr.setflags(write=False)
    return arr


class ArrayModel(BaseModel):
    """Base for immutable records that carry numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    def __eq__(self, other: object) -> bool:
        if type(self) is not type(other):
            return NotImplemented
        return all(
            _values_equal(getattr(self, name), getattr(other, name))
            for name in type(self).model_fields
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# idm-core
# ---------------------------------------------------------------------------


class IdmParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    v0: float = Field(description="Desired velocity (m/s).")
    T: float = Field(description="Safe time headway (s).")
    a: float = Field(description="Maximum acceleration (m/s^2).")
    b: float = Field(description="Comfortable deceleration (m/s^2).")
    delta: float = Field(description="Acceleration exponent.")
    s0: float = Field(description="Jam distance (m).")
    s1: float = Field(description="Second jam-distance term (m).")

    @classmethod
    def literature(cls) -> "IdmParams":
        return cls(**LITERATURE_VALUES)

    @classmethod
    def from_array(cls, values) -> "IdmParams":
        values = np.asarray(values, dtype=float)
        if values.shape != (N_PARAMS,):
            raise InvalidParamsError(
                f"expected {N_PARAMS} parameter values, got shape {values.shape}"
            )
        return cls(**dict(zip(PARAM_NAMES, (float(x) for x in values))))

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAM_NAMES], dtype=float)

    def violations(self) -> List[str]:
        """Names of the domain invariants this parameter set breaks."""
        failed = [n for n in PARAM_NAMES if not np.isfinite(getattr(self, n))]
        if self.v0 <= 0:
            failed.append("v0 > 0")
        if self.T < 0:
            failed.append("T >= 0")
        if self.a <= 0:
            failed.append("a > 0")
        if self.b <= 0:
            failed.append("b > 0")
        if self.delta <= 0:
            failed.append("delta > 0")
        if self.s0 < 0:
            failed.append("s0 >= 0")
        if self.s1 < 0:
            failed.append("s1 >= 0")
        return failed

    def is_valid(self) -> bool:
        return not self.violations()

    def ensure_valid(self) -> "IdmParams":
        failed = self.violations()
        if failed:
            raise InvalidParamsError(f"invalid IDM parameters, failed: {', '.join(failed)}")
        return self


class KinematicState(BaseModel):
    model_config = ConfigDict(frozen=True)

    v: float = Field(description="Follower speed (m/s).")
    dv: float = Field(description="Follower minus leader speed (m/s).")
    s: float = Field(description="Bumper-to-bumper gap (m).")

    def ensure_valid(self) -> "KinematicState":
        if not (np.isfinite(self.v) and np.isfinite(self.dv) and np.isfinite(self.s)):
            raise InvalidParamsError("kinematic state must be finite")
        if self.s <= 0:
            raise InvalidParamsError(f"gap must be positive, got s={self.s}")
        if self.v < 0:
            raise InvalidParamsError(f"speed must be non-negative, got v={self.v}")
        return self


# ---------------------------------------------------------------------------
# trajectory-data
# ---------------------------------------------------------------------------


class CfInstance(ArrayModel):
    """One car-following episode sampled at a uniform rate."""

    driver_id: str
    instance_id: str
    dt: float
    v: np.ndarray
    dv: np.ndarray
    s: np.ndarray
    a_obs: np.ndarray

    @field_validator("v", "dv", "s", "a_obs", mode="before")
    @classmethod
    def _as_array(cls, value):
        arr = _frozen_array(value)
        if arr.ndim != 1:
            raise ValueError("series must be one-dimensional")
        return arr

    @model_validator(mode="after")
    def _check_invariants(self):
        n = len(self.v)
        if not (len(self.dv) == len(self.s) == len(self.a_obs) == n):
            raise ValueError("series lengths differ")
        if n < 2:
            raise ValueError(f"series shorter than 2 (length {n})")
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt}")
        for name in ("v", "dv", "s", "a_obs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite value in {name}")
        if np.any(self.s <= 0):
            raise ValueError(f"nonpositive gap at sample {int(np.argmax(self.s <= 0))}")
        if np.any(self.v < 0):
            raise ValueError(f"negative speed at sample {int(np.argmax(self.v < 0))}")
        return self

    @property
    def n(self) -> int:
        return len(self.v)

    @property
    def key(self) -> Tuple[str, str]:
        return self.driver_id, self.instance_id


class InstanceStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean_a: float
    std_a: float = Field(ge=0)


class StackedData(NamedTuple):
    """All instances concatenated row-wise for vectorized evaluation."""

    v: np.ndarray
    dv: np.ndarray
    s: np.ndarray
    a_obs: np.ndarray
    row_driver: np.ndarray
    row_instance: np.ndarray
    offsets: np.ndarray
    lengths: np.ndarray
    instance_driver: np.ndarray
    instance_std: np.ndarray


class Dataset(ArrayModel):
    instances: Tuple[CfInstance, ...]
    drivers: Tuple[str, ...]

    @model_validator(mode="after")
    def _check_drivers(self):
        known = set(self.drivers)
        if len(known) != len(self.drivers):
            raise ValueError("driver ids must be distinct")
        for inst in self.instances:
            if inst.driver_id not in known:
                raise ValueError(f"instance {inst.key} has unknown driver {inst.driver_id!r}")
        return self

    @classmethod
    def from_instances(cls, instances) -> "Dataset":
        drivers = list(dict.fromkeys(inst.driver_id for inst in instances))
        return cls(instances=tuple(instances), drivers=tuple(drivers))

    @property
    def n_instances(self) -> int:
        return len(self.instances)

    @property
    def n_drivers(self) -> int:
        return len(self.drivers)

    @cached_property
    def driver_index(self) -> Dict[str, int]:
        return {d: i for i, d in enumerate(self.drivers)}

    def driver_instances(self, driver_id: str) -> List[CfInstance]:
        return [inst for inst in self.instances if inst.driver_id == driver_id]

    @cached_property
    def stacked(self) -> StackedData:
        lengths = np.array([inst.n for inst in self.instances], dtype=np.int64)
        offsets = np.cumsum(lengths) - lengths
        instance_driver = np.array(
            [self.driver_index[inst.driver_id] for inst in self.instances], dtype=np.int64
        )

        def cat(name):
            if not self.instances:
                return np.empty(0)
            return np.concatenate([getattr(inst, name) for inst in self.instances])

        return StackedData(
            v=cat("v"),
            dv=cat("dv"),
            s=cat("s"),
            a_obs=cat("a_obs"),
            row_driver=np.repeat(instance_driver, lengths),
            row_instance=np.repeat(np.arange(len(lengths)), lengths),
            offsets=offsets,
            lengths=lengths,
            instance_driver=instance_driver,
            instance_std=np.array(
                [np.std(inst.a_obs, ddof=1) for inst in self.instances], dtype=float
            ),
        )


class Rejection(BaseModel):
    model_config = ConfigDict(frozen=True)

    driver_id: str
    instance_id: str
    reason: str


class IngestSummary(BaseModel):
    n_rows: int
    n_kept: int
    n_rejected: int
    n_drivers: int
    rejections: List[Rejection]


class SyntheticData(ArrayModel):
    dataset: Dataset
    truth: Dict[str, IdmParams]


# ---------------------------------------------------------------------------
# prob-model
# ---------------------------------------------------------------------------


class Formulation(str, Enum):
    POOLED = "pooled"
    HIERARCHICAL = "hierarchical"
    INDIVIDUAL = "individual"


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    formulation: Formulation
    prior_sigma: float = Field(gt=0, description="Scale of every Gaussian prior.")
    prior_mean: IdmParams = Field(default_factory=IdmParams.literature)
    n_drivers: int = Field(ge=1)
    parameterization: Literal["noncentered", "centered"] = "noncentered"
    sigma_floor: float = Field(default=SIGMA_FLOOR, gt=0)

    @property
    def k(self) -> int:
        return N_PARAMS


class LatentLayout(BaseModel):
    """Bijection between (level, driver, parameter) keys and flat positions."""

    model_config = ConfigDict(frozen=True)

    keys: Tuple[Tuple[str, int, str], ...]

    @cached_property
    def index(self) -> Dict[Tuple[str, int, str], int]:
        return {key: pos for pos, key in enumerate(self.keys)}

    def __len__(self) -> int:
        return len(self.keys)


class LatentState(ArrayModel):
    theta: np.ndarray
    layout: LatentLayout

    @field_validator("theta", mode="before")
    @classmethod
    def _as_array(cls, value):
        return _frozen_array(value)

    @model_validator(mode="after")
    def _check_length(self):
        if self.theta.shape != (len(self.layout),):
            raise ValueError(
                f"theta has shape {self.theta.shape}, layout expects {len(self.layout)}"
            )
        return self

    def __getitem__(self, key: Tuple[str, int, str]) -> float:
        return float(self.theta[self.layout.index[key]])


class LogDensity(ArrayModel):
    value: float
    gradient: Optional[np.ndarray] = None

    @property
    def finite(self) -> bool:
        return bool(np.isfinite(self.value))


# ---------------------------------------------------------------------------
# hmc-sampler
# ---------------------------------------------------------------------------


class HmcConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    step_size: float = Field(default=0.01, gt=0)
    n_leapfrog: int = Field(default=20, ge=1)
    base_run_steps: int = Field(default=1500, ge=1)
    max_total_steps: int = Field(default=9000, ge=1)
    convergence_tol: float = Field(default=1e-2, gt=0)
    seed: int = Field(default=0, ge=0)
    mass: Optional[Tuple[float, ...]] = None
    preconditioner: Literal["identity", "fisher"] = Field(
        default="identity",
        description="Mass used when none is given: unit, or the Gauss-Newton Fisher "
        "information of the model at the starting state.",
    )
    min_acceptance: float = Field(
        default=0.01, gt=0, lt=1,
        description="Runs accepting a smaller share of proposals never count as converged.",
    )
    burn_in_fraction: float = Field(default=0.5, ge=0, lt=1)
    tail_fraction: float = Field(default=0.2, gt=0, le=1)

    @model_validator(mode="after")
    def _check_budget(self):
        if self.max_total_steps < self.base_run_steps:
            raise ValueError("max_total_steps must be >= base_run_steps")
        if self.mass is not None and any(not (m > 0) for m in self.mass):
            raise ValueError("mass entries must be positive")
        return self

    def mass_vector(self, dim: int) -> np.ndarray:
        if self.mass is None:
            return np.ones(dim)
        if len(self.mass) != dim:
            raise ValueError(f"mass has {len(self.mass)} entries, latent dimension is {dim}")
        return np.asarray(self.mass, dtype=float)


class Chain(ArrayModel):
    samples: np.ndarray
    log_joints: np.ndarray
    accepted: np.ndarray
    config: HmcConfig

    @model_validator(mode="after")
    def _check_lengths(self):
        if not (len(self.samples) == len(self.log_joints) == len(self.accepted)):
            raise ValueError("samples, log_joints and accepted differ in length")
        return self

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def acceptance_rate(self) -> float:
        steps = self.accepted[1:] if len(self.accepted) > 1 else self.accepted
        return float(np.mean(steps)) if len(steps) else 0.0


class RestartResult(ArrayModel):
    chain: Chain
    schedule_log: Tuple[int, ...]
    tail_means: Tuple[float, ...]
    acceptance_rates: Tuple[float, ...]
    converged: bool


# ---------------------------------------------------------------------------
# de-search
# ---------------------------------------------------------------------------


class DeConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    differential_weight: float = Field(default=0.5, ge=0)
    crossover_prob: float = Field(default=0.9, ge=0, le=1)
    lambda_: float = Field(default=0.0, ge=0, alias="lambda")
    population_size: int = Field(default=28, ge=4)
    n_generations: int = Field(default=300, ge=0)
    bounds: Tuple[Tuple[float, float], ...] = DEFAULT_DE_BOUNDS
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_bounds(self):
        for j, (lo, hi) in enumerate(self.bounds):
            if not lo < hi:
                raise ValueError(f"bounds[{j}]: lo={lo} must be < hi={hi}")
        return self

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.bounds], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.bounds], dtype=float)


class Candidate(ArrayModel):
    params: np.ndarray
    fitness: float

    @field_validator("params", mode="before")
    @classmethod
    def _as_array(cls, value):
        return _frozen_array(value)


class DeResult(ArrayModel):
    best: Candidate
    best_rmse: float
    history: Tuple[float, ...]
    population_rmse: Tuple[float, ...]
    n_evaluations: int


class TuningResult(ArrayModel):
    best: Dict[str, float]
    table: pd.DataFrame


# ---------------------------------------------------------------------------
# metrics-report
# ---------------------------------------------------------------------------

Method = Literal["Bayes-Pooled", "Bayes-Hierarchical", "Bayes-Individual", "DE", "Literature"]


class ParamSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    driver_id: str
    parameter: str
    mean: float
    std: float = Field(ge=0)
    q05: float
    q25: float
    q50: float
    q75: float
    q95: float


class TableRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: Method
    prior_sigma: Optional[float] = None
    rmse: float = Field(ge=0)
    avg_kl: float = Field(ge=0)


class CalibrationReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: Method
    prior_sigma: Optional[float] = None
    de_config: Optional[DeConfig] = None
    rmse: float = Field(ge=0)
    avg_kl: float = Field(ge=0)
    rows: List[TableRow]
    summaries: List[ParamSummary] = Field(default_factory=list)
    params_by_driver: Dict[str, IdmParams] = Field(default_factory=dict)
    seed: Optional[int] = None
    schedule_log: List[int] = Field(default_factory=list)
    converged: Optional[bool] = None
    diagnostics: Dict[str, Any] = Field(default_factory=dict)


class Provenance(BaseModel):
    command: str
    seed: int
    started_at: str
    finished_at: str
    elapsed_s: float


# ---------------------------------------------------------------------------
# cli
# ---------------------------------------------------------------------------


class ModelSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    formulation: Formulation = Formulation.HIERARCHICAL
    prior_sigma: float = Field(default=10.0, gt=0)
    parameterization: Literal["noncentered", "centered"] = "noncentered"
    prior_sigmas: Tuple[float, ...] = DEFAULT_PRIOR_SIGMAS

    @field_validator("prior_sigmas")
    @classmethod
    def _positive(cls, values):
        if not values or any(not (v > 0) for v in values):
            raise ValueError("prior_sigmas must be non-empty and positive")
        return values


class SynthSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_drivers: int = Field(default=10, ge=1)
    n_instances_per_driver: int = Field(default=3, ge=1)
    n_steps: int = Field(default=300, ge=2)
    noise_std: float = Field(default=0.1, ge=0)
    dt: float = Field(default=0.1, gt=0)
    spread: float = Field(default=0.15, ge=0)


class TuneSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Literal["grid", "bo"] = "grid"
    cr_range: Tuple[float, float, float] = GRID_CR_RANGE
    f_range: Tuple[float, float, float] = GRID_F_RANGE
    lambda_range: Tuple[float, float, float] = GRID_LAMBDA_RANGE
    budget: int = Field(default=30, ge=5)
    cr_bounds: Tuple[float, float] = (0.1, 0.9)
    f_bounds: Tuple[float, float] = (0.1, 1.9)
    lambda_bounds: Tuple[float, float] = (0.0, 0.0001)


class MetricsSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kl_direction: Literal["observed_to_predicted", "predicted_to_observed"] = (
        "observed_to_predicted"
    )
    hist_bins: int = Field(default=20, ge=1)


class HmcSection(HmcConfig):
    """Sampler settings for CLI runs: real trajectory data needs the Fisher mass."""

    preconditioner: Literal["identity", "fisher"] = "fisher"


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(ge=0)
    model: ModelSection = Field(default_factory=ModelSection)
    hmc: HmcSection = Field(default_factory=HmcSection)
    de: DeConfig = Field(default_factory=DeConfig)
    tune: TuneSection = Field(default_factory=TuneSection)
    synth: SynthSection = Field(default_factory=SynthSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)


# ---------------------------------------------------------------------------
# sweep graph state
# ---------------------------------------------------------------------------


class SweepState(TypedDict):
    data: Dataset
    formulations: List[Formulation]
    prior_sigmas: List[float]
    hmc: HmcConfig
    parameterization: str
    seed: int
    kl_direction: str
    reports: Annotated[list, operator.add]
    table: List[TableRow]


class CellState(TypedDict):
    data: Dataset
    formulation: Formulation
    prior_sigma: float
    hmc: HmcConfig
    parameterization: str
    seed: int
    cell: Tuple[int, int]
    kl_direction: str
