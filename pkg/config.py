import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

load_dotenv()

OUTPUT_DIR = os.getenv("CFCAL_OUTPUT_DIR", "./runs")
LOG_LEVEL = os.getenv("CFCAL_LOG_LEVEL", "INFO")
N_JOBS = int(os.getenv("CFCAL_N_JOBS", "1"))
SHOW_PROGRESS = os.getenv("CFCAL_PROGRESS", "true").lower() == "true"

# IDM parameter order used by every flat vector in the package
PARAM_NAMES = ("v0", "T", "a", "b", "delta", "s0", "s1")
N_PARAMS = len(PARAM_NAMES)

# Treiber defaults: prior centre, regularization anchor and baseline row
LITERATURE_VALUES = {
    "v0": 6.5,
    "T": 1.6,
    "a": 0.73,
    "b": 1.67,
    "delta": 4.0,
    "s0": 2.0,
    "s1": 0.0,
}

# m/s^2, shared by the likelihood noise scale and the KL measure
SIGMA_FLOOR = 0.01

DEFAULT_DT = 0.1

CSV_COLUMNS = (
    "driver_id", "instance_id", "time_s", "v_mps", "dv_mps", "gap_m", "accel_mps2"
)

# Search box for DE, one (lo, hi) per parameter in PARAM_NAMES order
DEFAULT_DE_BOUNDS = (
    (1.0, 40.0),
    (0.1, 5.0),
    (0.1, 5.0),
    (0.1, 5.0),
    (1.0, 10.0),
    (0.1, 10.0),
    (0.0, 5.0),
)

# Hyperparameter ranges for the grid sweep: (lo, hi, step)
GRID_CR_RANGE = (0.1, 0.9, 0.2)
GRID_F_RANGE = (0.1, 1.9, 0.2)
GRID_LAMBDA_RANGE = (0.0, 0.0001, 0.0000025)

DEFAULT_PRIOR_SIGMAS = (1.0, 10.0, 100.0)


def load_run_config(path: Optional[str]) -> Dict[str, Any]:
    """Read a TOML run config into a plain dict (empty when no path is given)."""
    if not path:
        return {}
    with Path(path).open("rb") as fh:
        return tomllib.load(fh)
