"""
Experiment manifests.

An ``ExperimentConfig`` is assembled from, in increasing precedence: the struct defaults,
the environment settings (output directory, workers), a JSON manifest and explicit
overrides (CLI flags or an HTTP request body).
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union, get_args

import msgspec

from backend.app.config.config import Settings, get_settings
from backend.app.config.presets import PRESETS
from backend.app.utils.errors import ArgumentError, ParseError, ReportIOError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

ExperimentName = Literal[
    "forward_check",
    "invert",
    "select_lambda",
    "lambda_sweep",
    "mc_study",
    "rate_check",
    "eig_study",
]
EXPERIMENTS = get_args(ExperimentName)

DEFAULT_SWEEP = [10.0**-k for k in range(1, 11)]

# Applied on top of the struct defaults, below settings, manifest and overrides.
EXPERIMENT_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "eig_study": {"h": 1.0 / 16.0},
    "mc_study": {"replications": 100},
    "rate_check": {"sigma": 0.01, "replications": 20},
}


class ExperimentConfig(msgspec.Struct, kw_only=True, forbid_unknown_fields=True):
    """
    Parameters of one experiment run.

    Defaults reproduce the desk-scale setup: a = 1, c = 0, g = 1, T = 1 on a 1/32 mesh with
    tau = 1/64 and 100 x 100 cell-centre sensors.
    """

    experiment: ExperimentName
    schema_version: int = SCHEMA_VERSION
    h: float = 1.0 / 32.0
    tau: float = 1.0 / 64.0
    T: float = 1.0
    sensors_k: int = 100
    sigma: float = 0.001
    noise_kind: Literal["gaussian", "uniform_bounded"] = "gaussian"
    lambdas: Optional[List[float]] = None
    lambda_mode: Literal["rule", "rule_rho0", "fixed_point", "fixed"] = "rule"
    replications: int = 1
    seed: int = 0
    source_preset: str = "two_bump"
    truth: Literal["fem", "spectral"] = "fem"
    truth_refinement: int = 2
    out: str = "results"
    n_ladder: List[int] = msgspec.field(default_factory=lambda: [2500, 10000, 40000])
    sigma_factors: List[float] = msgspec.field(default_factory=lambda: [1.0])
    d: int = 2
    solver: Literal["auto", "cg", "dense"] = "auto"
    workers: int = 1
    cg_tolerance: float = 1e-10
    lambda_tolerance: float = 1e-10
    max_lambda_iterations: int = 50
    eig_count: int = 20
    histogram_bins: int = 30

    @property
    def sweep_lambdas(self) -> List[float]:
        return list(self.lambdas) if self.lambdas else list(DEFAULT_SWEEP)

    def validate(self) -> "ExperimentConfig":
        """
        Check value ranges that the type system does not express.

        Raises:
            ArgumentError: a parameter is out of range
        """
        if self.experiment not in EXPERIMENTS:
            raise ArgumentError(f"unknown experiment {self.experiment!r}; choose from {list(EXPERIMENTS)}")
        if self.schema_version != SCHEMA_VERSION:
            raise ArgumentError(f"unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        for name in ("h", "tau", "T", "cg_tolerance", "lambda_tolerance"):
            if not getattr(self, name) > 0:
                raise ArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        if self.sigma < 0:
            raise ArgumentError(f"sigma must be nonnegative, got {self.sigma}")
        if self.sensors_k < 2:
            raise ArgumentError(f"sensors_k must be >= 2, got {self.sensors_k}")
        for name in ("replications", "workers", "truth_refinement", "d", "max_lambda_iterations", "eig_count", "histogram_bins"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.seed < 2**64:
            raise ArgumentError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.source_preset not in PRESETS:
            raise ArgumentError(f"unknown source preset {self.source_preset!r}; choose from {sorted(PRESETS)}")
        if self.lambdas is not None:
            if not self.lambdas:
                raise ArgumentError("lambda list must not be empty")
            if any(not lam > 0 for lam in self.lambdas):
                raise ArgumentError(f"all lambda values must be positive, got {self.lambdas}")
        if self.lambda_mode == "fixed" and not self.lambdas:
            raise ArgumentError("lambda_mode 'fixed' needs at least one lambda value")
        if not self.n_ladder or any(n < 4 for n in self.n_ladder):
            raise ArgumentError(f"n_ladder must hold sample sizes >= 4, got {self.n_ladder}")
        if not self.sigma_factors or any(not s > 0 for s in self.sigma_factors):
            raise ArgumentError(f"sigma_factors must be positive, got {self.sigma_factors}")
        return self


def _read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ReportIOError(f"cannot read config file {path}: {exc}") from exc
    try:
        manifest = msgspec.json.decode(raw)
    except msgspec.DecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    return manifest


def resolve_config(
    experiment: str,
    config_path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    settings: Optional[Settings] = None,
) -> ExperimentConfig:
    """
    Merge defaults, settings, a manifest file and overrides into a validated config.

    ``None`` override values are ignored. The experiment name always comes from the caller.

    Raises:
        ArgumentError: unknown experiment, unknown field, wrong field type or out-of-range value
        ParseError: the manifest is not valid JSON
        ReportIOError: the manifest cannot be read
    """
    if experiment not in EXPERIMENTS:
        raise ArgumentError(f"unknown experiment {experiment!r}; choose from {list(EXPERIMENTS)}")
    settings = settings or get_settings()
    merged: Dict[str, Any] = dict(EXPERIMENT_DEFAULTS.get(experiment, {}))
    merged.update(out=str(settings.output_dir), workers=settings.workers)
    if config_path is not None:
        merged.update(_read_manifest(config_path))
    if overrides:
        merged.update({key: value for key, value in overrides.items() if value is not None})
    merged["experiment"] = experiment
    try:
        cfg = msgspec.convert(merged, type=ExperimentConfig)
    except msgspec.ValidationError as exc:
        raise ArgumentError(f"invalid experiment configuration: {exc}") from exc
    logger.debug(f"Resolved configuration: {msgspec.json.encode(cfg).decode()}")
    return cfg.validate()
