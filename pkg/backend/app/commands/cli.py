"""
Command-line front end.

    python main.py mc-study --replications 200 --sigma 0.001 --seed 7 --out results/

Every subcommand writes <out>/<experiment>.csv and <out>/<experiment>.json and prints the
JSON path. Exit codes: 0 success, 1 argument error, 2 solver error, 3 file error.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Optional

import click

from backend.app.config.config import configure_logging, get_settings
from backend.app.experiments.config import resolve_config
from backend.app.experiments.reports import emit_report
from backend.app.experiments.runners import run_experiment
from backend.app.models.sensing import load_measurements
from backend.app.utils.decorators import exit_on_error
from backend.app.utils.errors import ArgumentError
from backend.app.utils.run_registry import record_run

logger = logging.getLogger(__name__)


class _ArgumentExitCode:
    """Report click usage errors with the argument-error exit code."""

    def make_context(self, info_name, args, parent=None, **extra):
        try:
            return super().make_context(info_name, args, parent=parent, **extra)
        except click.UsageError as e:
            e.exit_code = ArgumentError.exit_code
            raise


class ExperimentCommand(_ArgumentExitCode, click.Command):
    pass


class ExperimentGroup(_ArgumentExitCode, click.Group):
    command_class = ExperimentCommand

    def resolve_command(self, ctx, args):
        try:
            return super().resolve_command(ctx, args)
        except click.UsageError as e:
            e.exit_code = ArgumentError.exit_code
            raise


def experiment_options(f):
    """Flags shared by every subcommand; each overrides the config file value."""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON experiment manifest"),
        click.option("--seed", type=click.IntRange(0, 2**64 - 1), help="Master seed"),
        click.option("--out", type=click.Path(file_okay=False), help="Output directory"),
        click.option("--h", "h", type=float, help="Mesh spacing (1/h integer)"),
        click.option("--tau", type=float, help="Time step (T/tau integer)"),
        click.option("--sensors-k", type=int, help="Sensors per side (n = k^2)"),
        click.option("--sigma", type=float, help="Noise standard deviation"),
        click.option("--noise-kind", type=click.Choice(["gaussian", "uniform_bounded"]), help="Noise distribution"),
        click.option("--lambda", "lambdas", type=float, multiple=True, help="Regularization parameter (repeatable)"),
        click.option(
            "--lambda-mode",
            type=click.Choice(["rule", "rule_rho0", "fixed_point", "fixed"]),
            help="How lambda is chosen; --lambda implies 'fixed'",
        ),
        click.option("--replications", type=int, help="Monte Carlo replications R"),
        click.option("--source-preset", help="True source preset"),
        click.option("--truth", type=click.Choice(["fem", "spectral"]), help="Truth generator"),
        click.option("--solver", type=click.Choice(["auto", "cg", "dense"]), help="Tikhonov solver path"),
        click.option("--workers", type=int, help="Threads for replications and rungs"),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def data_options(f):
    f = click.option("--save-data", is_flag=True, help="Write the synthesized data to <out>/measurements.json")(f)
    f = click.option("--data", "data_path", type=click.Path(dir_okay=False), help="Invert a stored measurement file")(f)
    return f


def _overrides(params: Dict[str, Any]) -> Dict[str, Any]:
    overrides = dict(params)
    overrides.pop("config_path", None)
    overrides.pop("data_path", None)
    overrides.pop("save_data", None)
    lambdas = overrides.pop("lambdas", ())
    if lambdas:
        overrides["lambdas"] = list(lambdas)
        if overrides.get("lambda_mode") is None:
            overrides["lambda_mode"] = "fixed"
    return overrides


def _run(experiment: str, params: Dict[str, Any]) -> None:
    settings = get_settings()
    cfg = resolve_config(experiment, params.get("config_path"), _overrides(params), settings)
    data_path: Optional[str] = params.get("data_path")
    data = load_measurements(data_path) if data_path else None
    save_data = Path(cfg.out) / "measurements.json" if params.get("save_data") else None
    report = run_experiment(cfg, settings, data=data, save_data=save_data)
    csv_path, json_path = emit_report(report, cfg.out)
    record_run({"experiment": experiment, "csv": str(csv_path), "json": str(json_path), "summary": report.summary})
    click.echo(str(json_path))


@click.group(cls=ExperimentGroup)
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def cli(log_level):
    """Heat-source inversion experiments."""
    configure_logging(log_level or get_settings().log_level)


@cli.command("forward-check")
@experiment_options
@exit_on_error
def forward_check(**params):
    """Discrete terminal state against the closed-form spectral solution."""
    _run("forward_check", params)


@cli.command("invert")
@experiment_options
@data_options
@exit_on_error
def invert(**params):
    """One Tikhonov reconstruction."""
    _run("invert", params)


@cli.command("select-lambda")
@experiment_options
@data_options
@exit_on_error
def select_lambda(**params):
    """Fixed-point choice of the regularization parameter."""
    _run("select_lambda", params)


@cli.command("lambda-sweep")
@experiment_options
@exit_on_error
def lambda_sweep(**params):
    """Prediction error over a list of lambda values (default 1e-1 .. 1e-10)."""
    _run("lambda_sweep", params)


@cli.command("mc-study")
@experiment_options
@exit_on_error
def mc_study(**params):
    """Monte Carlo error distribution with QQ statistics."""
    _run("mc_study", params)


@cli.command("rate-check")
@experiment_options
@click.option("--n-ladder", type=int, multiple=True, help="Sample sizes of the ladder (repeatable)")
@click.option("--sigma-factor", "sigma_factors", type=float, multiple=True, help="Noise multipliers (repeatable)")
@exit_on_error
def rate_check(n_ladder, sigma_factors, **params):
    """Slope of the mean prediction error against lambda^(1/2) over an n-ladder."""
    params["n_ladder"] = list(n_ladder) or None
    params["sigma_factors"] = list(sigma_factors) or None
    _run("rate_check", params)


@cli.command("eig-study")
@experiment_options
@exit_on_error
def eig_study(**params):
    """Decay of the generalized eigenvalues of the forward map."""
    _run("eig_study", params)
