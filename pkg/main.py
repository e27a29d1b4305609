"""
Command-line entry point.

    python main.py synth --seed 7 --out runs/synth
    python main.py calibrate-bayes --data runs/synth/data.csv --seed 7 --formulation hierarchical
    python main.py report --data runs/synth/data.csv --seed 7 --with-de

Primary outputs depend only on the inputs and --seed; wall-clock times go to
provenance.json.
"""
import argparse
import json
import sys
import time
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import numpy as np
import pandas as pd
from loguru import logger
from pydantic import ValidationError

import config
import rng as seeding
from errors import (
    EXIT_CONFIG, EXIT_DATA, EXIT_NOT_CONVERGED, EXIT_OK, CalibrationError, ConfigError,
    DataValidationError,
)
from graph import run_sweep
from hmc import posterior_frame, posterior_from_frame, posterior_means
from metrics import (
    assemble_table, avg_kl, dataset_rmse, histogram_frame, summary_frame, table_frame,
)
from models import CalibrationReport, Dataset, Formulation, IdmParams, Provenance, RunConfig
from nodes import calibrate_bayes, calibrate_de, sweep_converged
from trajectory_data import (
    default_leader_profiles, draw_population, generate_synthetic, ingest_trajectories,
    parse_trajectories, serialize_trajectories, truth_from_json, truth_to_json,
)
from tuning import bayes_opt_tune, grid_search


class CliArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the config status instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

# flag dest -> (section, key) in RunConfig
_OVERRIDES = {
    "formulation": ("model", "formulation"),
    "prior_sigma": ("model", "prior_sigma"),
    "prior_sigmas": ("model", "prior_sigmas"),
    "parameterization": ("model", "parameterization"),
    "step_size": ("hmc", "step_size"),
    "n_leapfrog": ("hmc", "n_leapfrog"),
    "base_run_steps": ("hmc", "base_run_steps"),
    "max_total_steps": ("hmc", "max_total_steps"),
    "preconditioner": ("hmc", "preconditioner"),
    "differential_weight": ("de", "differential_weight"),
    "crossover_prob": ("de", "crossover_prob"),
    "lambda_": ("de", "lambda"),
    "population_size": ("de", "population_size"),
    "generations": ("de", "n_generations"),
    "method": ("tune", "method"),
    "budget": ("tune", "budget"),
    "n_drivers": ("synth", "n_drivers"),
    "instances_per_driver": ("synth", "n_instances_per_driver"),
    "n_steps": ("synth", "n_steps"),
    "noise_std": ("synth", "noise_std"),
    "kl_direction": ("metrics", "kl_direction"),
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """TOML file values overridden by any flag given on the command line."""
    try:
        raw: Dict[str, Any] = config.load_run_config(args.config)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc

    for dest, (section, key) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            raw.setdefault(section, {})[key] = value
    if args.seed is not None:
        raw["seed"] = args.seed
    if "seed" not in raw:
        raise ConfigError("a seed is required (--seed or seed in the config file)")
    for section in ("hmc", "de"):
        if args.seed is not None or "seed" not in raw.get(section, {}):
            raw.setdefault(section, {})["seed"] = raw["seed"]

    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from exc


def _load_dataset(args: argparse.Namespace) -> Dataset:
    if not args.data:
        raise ConfigError("--data is required for this command")
    try:
        text = Path(args.data).read_text()
    except OSError as exc:
        raise DataValidationError(f"cannot read {args.data}: {exc}") from exc
    return parse_trajectories(text)


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or config.OUTPUT_DIR)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_report(path: Path, report: CalibrationReport) -> None:
    path.write_text(report.model_dump_json(indent=2, by_alias=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace, run: RunConfig) -> int:
    if not args.data:
        raise ConfigError("--data is required for ingest")
    try:
        text = Path(args.data).read_text()
    except OSError as exc:
        raise DataValidationError(f"cannot read {args.data}: {exc}") from exc
    _, summary = ingest_trajectories(text)
    out = _out_dir(args)
    _write_json(out / "ingest_summary.json", summary.model_dump())
    logger.info(f"Kept {summary.n_kept} instances, rejected {summary.n_rejected}")
    if summary.n_kept == 0:
        raise DataValidationError("no instance survived validation")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, run: RunConfig) -> int:
    s = run.synth
    truth = draw_population(s.n_drivers, seeding.spawn(run.seed, seeding.SYNTH), spread=s.spread)
    leaders = default_leader_profiles(
        s.n_drivers * s.n_instances_per_driver, s.n_steps, s.dt,
        seeding.spawn(run.seed, seeding.SYNTH, 0),
    )
    synthetic = generate_synthetic(
        truth, leaders, noise_std=s.noise_std, n_instances_per_driver=s.n_instances_per_driver,
        dt=s.dt, seed=run.seed,
    )
    out = _out_dir(args)
    (out / "data.csv").write_text(serialize_trajectories(synthetic.dataset))
    (out / "truth.json").write_text(truth_to_json(synthetic.truth) + "\n")
    return EXIT_OK


def cmd_calibrate_bayes(args: argparse.Namespace, run: RunConfig) -> int:
    data = _load_dataset(args)
    outcome = calibrate_bayes(
        data, run.model.formulation, run.model.prior_sigma, run.hmc,
        run.model.parameterization, run.metrics.kl_direction,
    )
    out = _out_dir(args)
    _write_report(out / "report.json", outcome.report)
    posterior_frame(outcome.posterior).to_csv(out / "posterior.csv", index=False, lineterminator="\n")
    histogram_frame(outcome.posterior, run.metrics.hist_bins).to_csv(
        out / "histograms.csv", index=False, lineterminator="\n"
    )
    summary_frame(outcome.report.summaries).to_csv(
        out / "summary.csv", index=False, lineterminator="\n"
    )
    return EXIT_OK if outcome.restart.converged else EXIT_NOT_CONVERGED


def cmd_calibrate_de(args: argparse.Namespace, run: RunConfig) -> int:
    data = _load_dataset(args)
    report = calibrate_de(data, run.de, run.metrics.kl_direction)
    _write_report(_out_dir(args) / "de_report.json", report)
    return EXIT_OK


def cmd_tune(args: argparse.Namespace, run: RunConfig) -> int:
    data = _load_dataset(args)
    t = run.tune
    if t.method == "grid":
        result = grid_search(
            data, t.cr_range, t.f_range, t.lambda_range, run.de,
            n_jobs=args.n_jobs or config.N_JOBS,
        )
    else:
        result = bayes_opt_tune(
            data,
            {"CR": t.cr_bounds, "F": t.f_bounds, "lambda": t.lambda_bounds},
            budget=t.budget, de_base_config=run.de, seed=run.seed,
        )
    out = _out_dir(args)
    result.table.to_csv(out / "tuning.csv", index=False, lineterminator="\n")
    _write_json(out / "incumbent.json", result.best)
    return EXIT_OK


def load_params_source(source: str, data: Dataset) -> Dict[str, IdmParams]:
    """Parameters from a posterior CSV, a report or truth JSON, or a literal 7-vector."""
    path = Path(source)
    if path.suffix == ".csv":
        try:
            frame = pd.read_csv(path, dtype={"driver_id": str})
        except (OSError, pd.errors.ParserError) as exc:
            raise DataValidationError(f"cannot read posterior {source}: {exc}") from exc
        return posterior_means(posterior_from_frame(frame))
    if path.suffix == ".json":
        try:
            text = path.read_text()
        except OSError as exc:
            raise DataValidationError(f"cannot read report {source}: {exc}") from exc
        try:
            return dict(CalibrationReport.model_validate_json(text).params_by_driver)
        except ValidationError:
            pass
        # truth.json written by synth
        try:
            return truth_from_json(text)
        except ValidationError as exc:
            raise DataValidationError(f"{source} is neither a report nor a truth file") from exc
    try:
        values = np.array([float(v) for v in source.split(",")])
    except ValueError as exc:
        raise ConfigError(f"--params is neither a file nor a numeric vector: {source!r}") from exc
    params = IdmParams.from_array(values)
    params.ensure_valid()
    return {driver: params for driver in data.drivers}


def cmd_evaluate(args: argparse.Namespace, run: RunConfig) -> int:
    data = _load_dataset(args)
    params = load_params_source(args.params, data)
    result = {
        "source": args.params,
        "rmse": dataset_rmse(params, data),
        "avg_kl": avg_kl(params, data, run.metrics.kl_direction),
        "kl_direction": run.metrics.kl_direction,
        "n_instances": data.n_instances,
    }
    _write_json(_out_dir(args) / "evaluation.json", result)
    logger.info(f"RMSE {result['rmse']:.4f}, average KL {result['avg_kl']:.4f}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace, run: RunConfig) -> int:
    data = _load_dataset(args)
    formulations = args.formulations or [f.value for f in Formulation]
    state = run_sweep(
        data, [Formulation(f) for f in formulations], run.model.prior_sigmas, run.hmc,
        run.seed, run.model.parameterization, run.metrics.kl_direction,
    )
    reports = list(state["reports"])
    if args.with_de:
        reports.append(calibrate_de(data, run.de, run.metrics.kl_direction))

    rows = assemble_table(reports)
    out = _out_dir(args)
    table = table_frame(rows)
    table.to_csv(out / "table1.csv", index=False, lineterminator="\n")
    _write_json(out / "table1.json", [row.model_dump() for row in rows])
    report_dir = out / "reports"
    report_dir.mkdir(exist_ok=True)
    for report in reports:
        sigma = "" if report.prior_sigma is None else f"_sigma{report.prior_sigma:g}"
        _write_report(report_dir / f"{report.method}{sigma}.json", report)
    logger.info(f"Table:\n{table.to_string(index=False)}")
    return EXIT_NOT_CONVERGED if sweep_converged(reports) is False else EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "calibrate-bayes": cmd_calibrate_bayes,
    "calibrate-de": cmd_calibrate_de,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_hmc_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--parameterization", choices=["noncentered", "centered"])
    parser.add_argument("--step-size", type=float)
    parser.add_argument("--n-leapfrog", type=int)
    parser.add_argument("--base-run-steps", type=int)
    parser.add_argument("--max-total-steps", type=int)
    parser.add_argument("--preconditioner", choices=["identity", "fisher"])


def _add_de_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--F", dest="differential_weight", type=float)
    parser.add_argument("--CR", dest="crossover_prob", type=float)
    parser.add_argument("--lambda", dest="lambda_", type=float)
    parser.add_argument("--population-size", type=int)
    parser.add_argument("--generations", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="trajectory CSV")
    common.add_argument("--out", help=f"output directory (default {config.OUTPUT_DIR})")
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--log-level", default=None)
    common.add_argument("--kl-direction", choices=["observed_to_predicted", "predicted_to_observed"])

    parser = CliArgumentParser(prog="cfcal", description="Car-following model calibration")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliArgumentParser)

    sub.add_parser("ingest", parents=[common], help="validate a trajectory file")

    synth = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    synth.add_argument("--n-drivers", type=int)
    synth.add_argument("--instances-per-driver", type=int)
    synth.add_argument("--n-steps", type=int)
    synth.add_argument("--noise-std", type=float)

    bayes = sub.add_parser("calibrate-bayes", parents=[common], help="HMC calibration")
    bayes.add_argument("--formulation", choices=[f.value for f in Formulation])
    bayes.add_argument("--prior-sigma", type=float)
    _add_hmc_flags(bayes)

    de = sub.add_parser("calibrate-de", parents=[common], help="differential evolution")
    _add_de_flags(de)

    tune = sub.add_parser("tune", parents=[common], help="DE hyperparameter search")
    tune.add_argument("--method", choices=["grid", "bo"])
    tune.add_argument("--budget", type=int)
    tune.add_argument("--n-jobs", type=int)
    _add_de_flags(tune)

    evaluate = sub.add_parser("evaluate", parents=[common], help="score a parameter set")
    evaluate.add_argument("--params", required=True)

    report = sub.add_parser("report", parents=[common], help="prior-sensitivity table")
    report.add_argument("--prior-sigmas", type=float, nargs="+")
    report.add_argument(
        "--formulations", nargs="+", choices=[f.value for f in Formulation]
    )
    report.add_argument("--with-de", action="store_true")
    _add_hmc_flags(report)
    _add_de_flags(report)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logger.remove()
    logger.add(sys.stderr, level=(args.log_level or config.LOG_LEVEL).upper())

    started, clock = datetime.now(timezone.utc), time.perf_counter()
    try:
        run = resolve_config(args)
        status = COMMANDS[args.command](args, run)
    except ConfigError as exc:
        logger.error(str(exc))
        return EXIT_CONFIG
    except CalibrationError as exc:
        logger.error(str(exc))
        return EXIT_DATA

    provenance = Provenance(
        command=args.command,
        seed=run.seed,
        started_at=started.isoformat(),
        finished_at=datetime.now(timezone.utc).isoformat(),
        elapsed_s=time.perf_counter() - clock,
    )
    (_out_dir(args) / "provenance.json").write_text(provenance.model_dump_json(indent=2) + "\n")
    if status == EXIT_NOT_CONVERGED:
        logger.warning("Sampler did not converge within the step budget")
    return status


if __name__ == "__main__":
    sys.exit(main())
