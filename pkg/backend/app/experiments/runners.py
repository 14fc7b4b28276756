"""
Experiment runners.

Each runner is a pure function of its ``ExperimentConfig`` (master seed included) and
returns a report for :func:`backend.app.experiments.reports.emit_report`. Replications of a
Monte Carlo study and rungs of a rate ladder run on a thread pool; results are collected in
submission order so the report does not depend on scheduling.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from backend.app.config.config import Settings, get_settings
from backend.app.config.presets import SourcePreset, get_preset
from backend.app.experiments.config import ExperimentConfig
from backend.app.experiments.reports import McRecord, McReport, Report, SpectralReport, TableReport, mc_aggregates
from backend.app.experiments.statistics import histogram, loglog_slope, qq_correlation, qq_pairs, tail_fraction
from backend.app.models.fem_grid import (
    FieldVector,
    ProblemCoefficients,
    build_mesh,
    evaluate_at_points,
    l2_norm,
    project_l2,
)
from backend.app.models.inversion import (
    LambdaSelectionOptions,
    LambdaTrace,
    TikhonovSolver,
    coupled_discretization,
    error_metrics,
    lambda_rule,
    rule_exponent,
    select_lambda,
)
from backend.app.models.parabolic_forward import (
    ForwardConfig,
    forward_solve,
    spectral_mode,
    spectral_oracle,
    spectral_source,
    terminal_matrix,
)
from backend.app.models.sensing import (
    FemTruth,
    MeasurementSet,
    NoiseModel,
    SensorSet,
    SpectralTruth,
    TruthSource,
    add_noise,
    empirical_norm,
    make_uniform_sensors,
    save_measurements,
)
from backend.app.utils.decorators import log_duration
from backend.app.utils.errors import ArgumentError
from backend.app.utils.sparse_core import CgConfig, dense_generalized_eig

logger = logging.getLogger(__name__)

EIG_DOF_LIMIT = 400
# Matrix-free runs up to this size probe diag(T^T T) for the outer Jacobi preconditioner.
PROBE_DOF_LIMIT = 1024


@dataclass(frozen=True, eq=False)
class ExperimentContext:
    """Geometry, truth and noise shared by all solves of one experiment (or one rate rung)."""

    cfg: ExperimentConfig
    preset: SourcePreset
    coeff: ProblemCoefficients
    fwd: ForwardConfig
    sensors: SensorSet
    truth_samples: Optional[np.ndarray]
    f_true: FieldVector
    f_norm: float
    noise: NoiseModel
    method: str
    cg: CgConfig
    probe_diagonal: bool = False

    @property
    def n(self) -> int:
        return self.sensors.n

    def solver(self) -> TikhonovSolver:
        return TikhonovSolver(self.fwd, self.sensors, method=self.method, cg=self.cg, probe_diagonal=self.probe_diagonal)

    def measurements(self, replication: Optional[int] = None) -> MeasurementSet:
        return add_noise(self.sensors, self.truth_samples, self.noise, replication)

    def noise_level(self) -> Dict[str, Optional[float]]:
        """||S f*||_inf over the sensors and sigma relative to it."""
        if self.truth_samples is None:
            return {"truth_sup": None, "relative_noise": None}
        sup = float(np.max(np.abs(self.truth_samples)))
        return {"truth_sup": sup, "relative_noise": self.noise.sigma / sup if sup > 0 else None}


def _solver_method(cfg: ExperimentConfig, n_dof: int, settings: Settings) -> str:
    if cfg.solver != "auto":
        return cfg.solver
    return "dense" if n_dof <= settings.dense_dof_limit else "cg"


def _spectral_modes(preset: SourcePreset, coeff: ProblemCoefficients):
    pairs, weights = preset.spectral
    return tuple(spectral_mode(p, q, coeff) for p, q in pairs), tuple(weights)


def _truth_source(cfg: ExperimentConfig, preset: SourcePreset, coeff: ProblemCoefficients, h: float, tau: float) -> TruthSource:
    if cfg.truth == "spectral":
        if preset.spectral is None:
            raise ArgumentError(f"preset {preset.name!r} has no spectral expansion; use truth 'fem'")
        modes, weights = _spectral_modes(preset, coeff)
        return SpectralTruth(coeff, modes, weights)
    refinement = cfg.truth_refinement
    mesh = build_mesh(h / refinement)
    fwd = ForwardConfig.from_step(mesh, coeff, tau / refinement, step_solver="direct")
    return FemTruth(fwd, project_l2(preset.func, mesh))


def build_context(
    cfg: ExperimentConfig,
    settings: Optional[Settings] = None,
    *,
    h: Optional[float] = None,
    tau: Optional[float] = None,
    k: Optional[int] = None,
    sigma: Optional[float] = None,
    data: Optional[MeasurementSet] = None,
) -> ExperimentContext:
    """
    Assemble the forward configuration, sensors, truth samples and noise model.

    With ``data`` the sensors and (optional) truth samples come from the dataset instead of
    being synthesized.
    """
    settings = settings or get_settings()
    h = cfg.h if h is None else h
    tau = cfg.tau if tau is None else tau
    sigma = cfg.sigma if sigma is None else sigma
    preset = get_preset(cfg.source_preset)
    coeff = ProblemCoefficients(T=cfg.T)
    mesh = build_mesh(h)
    fwd = ForwardConfig.from_step(mesh, coeff, tau)

    if data is None:
        sensors = make_uniform_sensors(cfg.sensors_k if k is None else k)
        truth_samples = _truth_source(cfg, preset, coeff, h, tau).sample(sensors)
        noise = NoiseModel(kind=cfg.noise_kind, sigma=sigma, seed=cfg.seed)
    else:
        sensors = data.sensors
        truth_samples = data.truth_values
        noise = data.noise

    method = _solver_method(cfg, mesh.n_dof, settings)
    logger.info(
        f"Context: h=1/{mesh.cells_per_side}, tau={fwd.tau:.3e}, N={fwd.n_steps}, n={sensors.n}, "
        f"n_dof={mesh.n_dof}, solver={method}"
    )
    return ExperimentContext(
        cfg=cfg,
        preset=preset,
        coeff=coeff,
        fwd=fwd,
        sensors=sensors,
        truth_samples=truth_samples,
        f_true=project_l2(preset.func, mesh),
        f_norm=preset.l2_norm(),
        noise=noise,
        method=method,
        cg=CgConfig(rel_tolerance=cfg.cg_tolerance, preconditioner="jacobi" if method == "cg" else "none"),
        probe_diagonal=method == "cg" and mesh.n_dof <= PROBE_DOF_LIMIT,
    )


def _selection_options(ctx: ExperimentContext) -> LambdaSelectionOptions:
    cfg = ctx.cfg
    return LambdaSelectionOptions(
        d=cfg.d,
        tolerance=cfg.lambda_tolerance,
        max_iterations=cfg.max_lambda_iterations,
        method=ctx.method,
        cg=ctx.cg,
    )


def _rule_lambda(ctx: ExperimentContext, n: int, sigma: float, use_rho0: bool = False) -> float:
    lam = lambda_rule(sigma, n, ctx.f_norm, d=ctx.cfg.d, use_rho0=use_rho0)
    if lam == 0.0:
        raise ArgumentError("the lambda rule gives lambda = 0 for sigma = 0; pass an explicit lambda")
    return lam


def _choose_lambda(
    ctx: ExperimentContext,
    data: MeasurementSet,
    solver: TikhonovSolver,
) -> Tuple[float, Optional[LambdaTrace]]:
    mode = ctx.cfg.lambda_mode
    if mode == "fixed":
        return ctx.cfg.lambdas[0], None
    if mode == "fixed_point":
        trace = select_lambda(ctx.fwd, data, _selection_options(ctx), solver=solver)
        return trace.final_lambda, trace
    return _rule_lambda(ctx, data.n, ctx.noise.sigma, use_rho0=mode == "rule_rho0"), None


def _substream_seed(seed: int, replication: int) -> int:
    """First 64-bit word of the noise substream of one replication."""
    state = np.random.SeedSequence(seed, spawn_key=(replication,)).generate_state(1, np.uint64)
    return int(state[0])


def _maybe_save(data: MeasurementSet, save_data: Optional[Union[str, Path]]) -> None:
    if save_data is not None:
        save_measurements(data, save_data)


@log_duration
def run_forward_check(cfg: ExperimentConfig, settings: Optional[Settings] = None) -> TableReport:
    """
    Compare the discrete terminal state against the closed-form spectral solution at
    (h, tau) and (h/2, tau/4).
    """
    preset = get_preset(cfg.source_preset)
    if preset.spectral is None:
        logger.warning(f"preset {preset.name!r} has no spectral expansion; checking with sine_mode")
        preset = get_preset("sine_mode")
    coeff = ProblemCoefficients(T=cfg.T)
    modes, weights = _spectral_modes(preset, coeff)
    sensors = make_uniform_sensors(cfg.sensors_k)
    oracle = spectral_oracle(coeff, modes, weights, sensors.points)
    exact = spectral_source(modes, [mode.alpha * weight for mode, weight in zip(modes, weights)])

    rows = []
    for h, tau in ((cfg.h, cfg.tau), (cfg.h / 2.0, cfg.tau / 4.0)):
        mesh = build_mesh(h)
        fwd = ForwardConfig.from_step(mesh, coeff, tau)
        state = forward_solve(fwd, FieldVector.interpolate(mesh, preset.func))
        sampled_error = empirical_norm(evaluate_at_points(state, sensors.points) - oracle) / empirical_norm(oracle)
        l2_error = l2_norm(state - FieldVector.interpolate(mesh, exact))
        logger.info(f"forward check h=1/{mesh.cells_per_side}: sampled={sampled_error:.3e}, l2={l2_error:.3e}")
        rows.append([mesh.h, fwd.tau, mesh.n_dof, fwd.n_steps, sampled_error, l2_error])

    summary = {
        "source_preset": preset.name,
        "alpha": [mode.alpha for mode in modes],
        "sampled_relative_error": rows[0][4],
        "l2_ratio": rows[0][5] / rows[1][5] if rows[1][5] > 0 else None,
    }
    return TableReport(
        experiment="forward_check",
        columns=["h", "tau", "n_dof", "n_steps", "sampled_relative_error", "l2_error"],
        rows=rows,
        summary=summary,
    )


@log_duration
def run_invert(
    cfg: ExperimentConfig,
    settings: Optional[Settings] = None,
    data: Optional[MeasurementSet] = None,
    save_data: Optional[Union[str, Path]] = None,
) -> TableReport:
    """One Tikhonov reconstruction; rows hold the recovered nodal coefficients."""
    synthesized = data is None
    ctx = build_context(cfg, settings, data=data)
    data = ctx.measurements() if synthesized else data
    _maybe_save(data, save_data)
    solver = ctx.solver()
    lam, trace = _choose_lambda(ctx, data, solver)
    result = solver.solve(data.values, lam)

    summary = {
        "lambda": lam,
        "lambda_mode": cfg.lambda_mode,
        "n": data.n,
        "n_dof": ctx.fwd.mesh.n_dof,
        "solver": ctx.method,
        "residual_n": result.residual_n,
        "penalty": result.penalty,
        "objective": result.objective,
        "cg_iterations": result.cg_iterations,
        "lambda_iterations": None if trace is None else len(trace.iterates),
        **ctx.noise_level(),
    }
    if ctx.truth_samples is not None:
        summary["pred_err_n"] = empirical_norm(ctx.truth_samples - result.predictions)
    if synthesized:
        metrics = error_metrics(result, ctx.f_true, ctx.truth_samples)
        summary["l2_err"] = metrics.l2_err
        summary["hminus1_err"] = metrics.hminus1_err

    coordinates = ctx.fwd.mesh.dof_coordinates
    f_true = ctx.f_true.coefficients if synthesized else [None] * ctx.fwd.mesh.n_dof
    rows = [
        [dof, float(x), float(y), float(value), None if truth is None else float(truth)]
        for dof, ((x, y), value, truth) in enumerate(zip(coordinates, result.f_h.coefficients, f_true))
    ]
    return TableReport(experiment="invert", columns=["dof", "x", "y", "f_h", "f_true"], rows=rows, summary=summary)


@log_duration
def run_select_lambda(
    cfg: ExperimentConfig,
    settings: Optional[Settings] = None,
    data: Optional[MeasurementSet] = None,
    save_data: Optional[Union[str, Path]] = None,
) -> TableReport:
    """Fixed-point parameter choice; one row per iterate."""
    ctx = build_context(cfg, settings, data=data)
    data = ctx.measurements() if data is None else data
    _maybe_save(data, save_data)
    trace = select_lambda(ctx.fwd, data, _selection_options(ctx), solver=ctx.solver(), truth_samples=ctx.truth_samples)

    rows = [
        [index, it.lam, it.residual_n, it.penalty, it.pred_err_n, it.cg_iterations]
        for index, it in enumerate(trace.iterates)
    ]
    last = trace.iterates[-1]
    summary = {
        "converged": trace.converged,
        "stop_reason": trace.stop_reason.value,
        "iterations": len(trace.iterates),
        "final_lambda": trace.final_lambda,
        "residual_n": last.residual_n,
        "penalty": last.penalty,
        "solver": ctx.method,
        **ctx.noise_level(),
    }
    if last.penalty > 0 and last.residual_n > 0:
        target = last.residual_n / (math.sqrt(data.n) * last.penalty)
        summary["identity_relative_gap"] = abs(trace.final_lambda ** rule_exponent(cfg.d) - target) / target
    sigma = data.noise.sigma
    if sigma > 0:
        summary["residual_over_sigma"] = last.residual_n / sigma
        summary["rule_lambda"] = lambda_rule(sigma, data.n, ctx.f_norm, d=cfg.d)
    return TableReport(
        experiment="select_lambda",
        columns=["iteration", "lambda", "residual_n", "penalty", "pred_err_n", "cg_iterations"],
        rows=rows,
        summary=summary,
    )


@log_duration
def run_lambda_sweep(cfg: ExperimentConfig, settings: Optional[Settings] = None) -> TableReport:
    """
    One Tikhonov solve per lambda on a single dataset; the summary records the argmin of
    the prediction error next to the rule value and the fixed point of the same data.
    """
    ctx = build_context(cfg, settings)
    data = ctx.measurements()
    solver = ctx.solver()

    rows = []
    for lam in cfg.sweep_lambdas:
        result = solver.solve(data.values, lam)
        metrics = error_metrics(result, ctx.f_true, ctx.truth_samples)
        logger.info(f"sweep lambda={lam:.1e}: pred_err_n={metrics.pred_err_n:.4e}")
        rows.append([lam, metrics.pred_err_n, metrics.l2_err, metrics.hminus1_err, result.residual_n, result.penalty])

    best = min(rows, key=lambda row: row[1])
    trace = select_lambda(ctx.fwd, data, _selection_options(ctx), solver=solver)
    summary = {
        "argmin_lambda": best[0],
        "min_pred_err_n": best[1],
        "fixed_point_lambda": trace.final_lambda,
        "fixed_point_converged": trace.converged,
        "argmin_vs_fixed_point_decades": abs(math.log10(best[0] / trace.final_lambda)),
        "solver": ctx.method,
        **ctx.noise_level(),
    }
    if ctx.noise.sigma > 0:
        rule = lambda_rule(ctx.noise.sigma, data.n, ctx.f_norm, d=cfg.d)
        summary["rule_lambda"] = rule
        summary["argmin_vs_rule_decades"] = abs(math.log10(best[0] / rule))
    return TableReport(
        experiment="lambda_sweep",
        columns=["lambda", "pred_err_n", "l2_err", "hminus1_err", "residual_n", "penalty"],
        rows=rows,
        summary=summary,
    )


@log_duration
def run_mc_study(cfg: ExperimentConfig, settings: Optional[Settings] = None) -> McReport:
    """
    R replications with fresh noise on a fixed geometry; empirical error distribution,
    normal QQ pairs and histogram.

    Raises:
        ArgumentError: fewer than two replications
    """
    if cfg.replications < 2:
        raise ArgumentError(f"a Monte Carlo study needs at least 2 replications, got {cfg.replications}")
    ctx = build_context(cfg, settings)
    solver = ctx.solver()
    fixed_lambda = None
    if cfg.lambda_mode != "fixed_point":
        fixed_lambda, _ = _choose_lambda(ctx, ctx.measurements(0), solver)

    def replicate(replication: int) -> McRecord:
        data = ctx.measurements(replication)
        lam = fixed_lambda if fixed_lambda is not None else _choose_lambda(ctx, data, solver)[0]
        result = solver.solve(data.values, lam)
        metrics = error_metrics(result, ctx.f_true, ctx.truth_samples)
        return McRecord(
            replication=replication,
            seed=_substream_seed(cfg.seed, replication),
            lam=lam,
            pred_err_n=metrics.pred_err_n,
            l2_err=metrics.l2_err,
            hminus1_err=metrics.hminus1_err,
            residual_n=metrics.residual_n,
        )

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        records = list(pool.map(replicate, range(cfg.replications)))

    errors = [record.pred_err_n for record in records]
    sample, normal = qq_pairs(errors)
    edges, counts = histogram(errors, cfg.histogram_bins)
    return McReport(
        records=records,
        aggregates=mc_aggregates(records),
        qq_sample=sample.tolist(),
        qq_normal=normal.tolist(),
        qq_correlation=qq_correlation(sample, normal),
        tail_fraction=tail_fraction(errors),
        histogram_edges=edges.tolist(),
        histogram_counts=counts.tolist(),
        rho0=ctx.f_norm + ctx.noise.sigma / math.sqrt(ctx.n),
        summary={
            "replications": cfg.replications,
            "lambda_mode": cfg.lambda_mode,
            "n": ctx.n,
            "n_dof": ctx.fwd.mesh.n_dof,
            "solver": ctx.method,
            **ctx.noise_level(),
        },
    )


@log_duration
def run_rate_check(cfg: ExperimentConfig, settings: Optional[Settings] = None) -> TableReport:
    """
    For every n of the ladder (and every sigma factor): lambda from the rule, (h, tau) from
    the coupling rules, mean prediction error over R replications. The slope of
    log(mean error) against log(lambda^{1/2}) is fitted per sigma factor.
    """
    settings = settings or get_settings()
    f_norm = get_preset(cfg.source_preset).l2_norm()
    use_rho0 = cfg.lambda_mode == "rule_rho0"
    rungs = [(factor, n) for factor in cfg.sigma_factors for n in cfg.n_ladder]

    def run_rung(rung: Tuple[float, int]) -> List:
        factor, n = rung
        k = math.isqrt(n)
        if k * k != n:
            logger.warning(f"n={n} is not a square; using {k * k} sensors")
        sigma = cfg.sigma * factor
        lam = lambda_rule(sigma, k * k, f_norm, d=cfg.d, use_rho0=use_rho0)
        if lam == 0.0:
            raise ArgumentError("the rate check needs sigma > 0")
        h, tau = coupled_discretization(lam, cfg.T)
        ctx = build_context(cfg, settings, h=h, tau=tau, k=k, sigma=sigma)
        solver = ctx.solver()
        errors = []
        for replication in range(cfg.replications):
            result = solver.solve(ctx.measurements(replication).values, lam)
            errors.append(empirical_norm(ctx.truth_samples - result.predictions))
        mean = float(np.mean(errors))
        std = float(np.std(errors, ddof=1)) if len(errors) > 1 else 0.0
        logger.info(f"rung sigma={sigma:.3e} n={k * k}: lambda={lam:.3e}, mean pred_err_n={mean:.4e}")
        return [sigma, k * k, lam, math.sqrt(lam), h, tau, ctx.fwd.mesh.n_dof, mean, std]

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        rows = list(pool.map(run_rung, rungs))

    slopes = {}
    for factor in cfg.sigma_factors:
        block = [row for (f, _), row in zip(rungs, rows) if f == factor]
        slopes[repr(factor)] = loglog_slope([r[3] for r in block], [r[7] for r in block]) if len(block) >= 2 else None

    insufficient = len(cfg.n_ladder) < 2
    if insufficient:
        logger.warning("rate check ladder has a single rung; slope is undefined")
    summary = {
        "slopes": slopes,
        "slope": slopes[repr(cfg.sigma_factors[0])],
        "insufficient_ladder": insufficient,
        "replications": cfg.replications,
    }
    if len(cfg.sigma_factors) > 1:
        base = rows[: len(cfg.n_ladder)]
        # lambda follows sigma through the rule, so lambda^{1/2} scales like factor^{1/(1 + d/4)}
        exponent = 1.0 / (2.0 * rule_exponent(cfg.d))
        summary["expected_sigma_ratios"] = {
            repr(factor): (factor / cfg.sigma_factors[0]) ** exponent for factor in cfg.sigma_factors
        }
        summary["sigma_ratios"] = {
            repr(factor): [row[7] / ref[7] for row, ref in zip(rows[i * len(cfg.n_ladder) : (i + 1) * len(cfg.n_ladder)], base)]
            for i, factor in enumerate(cfg.sigma_factors)
        }
    return TableReport(
        experiment="rate_check",
        columns=["sigma", "n", "lambda", "sqrt_lambda", "h", "tau", "n_dof", "mean_pred_err_n", "std_pred_err_n"],
        rows=rows,
        summary=summary,
    )


@log_duration
def run_eig_study(cfg: ExperimentConfig, settings: Optional[Settings] = None) -> SpectralReport:
    """
    Generalized eigenvalues of M v = rho G v with G_jk = (S phi_j, S phi_k)_{L2}, the dense
    Gram matrix of the discrete forward map.

    Raises:
        ArgumentError: more than 400 degrees of freedom
    """
    mesh = build_mesh(cfg.h)
    if mesh.n_dof > EIG_DOF_LIMIT:
        raise ArgumentError(f"eig study needs n_dof <= {EIG_DOF_LIMIT}, got {mesh.n_dof} (try h=1/16)")
    coeff = ProblemCoefficients(T=cfg.T)
    fwd = ForwardConfig.from_step(mesh, coeff, cfg.tau)
    K = terminal_matrix(fwd)
    mass = mesh.mass.toarray()
    gram = K.T @ mass @ K
    gram = 0.5 * (gram + gram.T)
    rho, _ = dense_generalized_eig(mass, gram)

    count = min(cfg.eig_count, mesh.n_dof)
    ks = list(range(1, count + 1))
    eigenvalues = [float(value) for value in rho[:count]]
    slope = loglog_slope(ks[1:], eigenvalues[1:]) if count >= 3 else None
    expected = 1.0 / spectral_mode(1, 1, coeff).alpha ** 2
    return SpectralReport(
        k=ks,
        eigenvalues=eigenvalues,
        slope=slope,
        reference_slope=4.0 / cfg.d,
        summary={
            "n_dof": mesh.n_dof,
            "rho1": eigenvalues[0],
            "rho1_expected": expected,
            "rho1_relative_error": abs(eigenvalues[0] - expected) / expected,
        },
    )


RUNNERS: Dict[str, Callable[..., Report]] = {
    "forward_check": run_forward_check,
    "invert": run_invert,
    "select_lambda": run_select_lambda,
    "lambda_sweep": run_lambda_sweep,
    "mc_study": run_mc_study,
    "rate_check": run_rate_check,
    "eig_study": run_eig_study,
}
DATA_EXPERIMENTS = ("invert", "select_lambda")


def run_experiment(
    cfg: ExperimentConfig,
    settings: Optional[Settings] = None,
    data: Optional[MeasurementSet] = None,
    save_data: Optional[Union[str, Path]] = None,
) -> Report:
    """
    Dispatch to the runner named by ``cfg.experiment``.

    Raises:
        ArgumentError: invalid configuration, or measurement input for an experiment that
            synthesizes its own data
    """
    cfg.validate()
    runner = RUNNERS[cfg.experiment]
    if cfg.experiment in DATA_EXPERIMENTS:
        return runner(cfg, settings, data=data, save_data=save_data)
    if data is not None or save_data is not None:
        raise ArgumentError(f"{cfg.experiment} does not read or write measurement files")
    return runner(cfg, settings)
