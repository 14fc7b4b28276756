"""
Empirical-norm Tikhonov reconstruction of the spatial source and the self-consistent
choice of the regularization parameter.

The discrete minimizer of ||S_{tau,h} f - m||_n^2 + lambda ||f||_{L2}^2 over the P1 space
solves the SPD system

    (lambda M + (1/n) T^T T) F = (1/n) T^T m,

where T maps coefficients to sensor values. Each CG application costs one forward and one
transposed parabolic solve. A dense path forms T^T T once and solves by Cholesky, for
studies that repeat many solves on the same geometry.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Literal, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.optimize

from backend.app.models.fem_grid import FieldVector, hminus1_norm, l2_norm
from backend.app.models.parabolic_forward import ForwardConfig, ObservationOperator
from backend.app.models.sensing import MeasurementSet, SensorSet, empirical_norm
from backend.app.utils.errors import ArgumentError, SolverError
from backend.app.utils.sparse_core import CgConfig, cg_solve

logger = logging.getLogger(__name__)

SolverMethod = Literal["cg", "dense"]


@dataclass(frozen=True, eq=False)
class TikhonovProblem:
    """One regularized reconstruction: geometry, data, lambda and solver settings."""

    fwd: ForwardConfig
    data: MeasurementSet
    lam: float
    cg: CgConfig = field(default_factory=CgConfig)
    method: SolverMethod = "cg"

    def __post_init__(self):
        if not self.lam > 0:
            raise ArgumentError(f"regularization parameter must be positive, got {self.lam}")
        if self.method not in ("cg", "dense"):
            raise ArgumentError(f"unknown Tikhonov method {self.method!r}")


@dataclass(frozen=True, eq=False)
class TikhonovResult:
    """
    Recovered source with its fit record.

    ``predictions`` holds (S_{tau,h} f_h)(x_i); objective = residual_n^2 + lam * penalty^2.
    """

    f_h: FieldVector
    lam: float
    residual_n: float
    penalty: float
    cg_iterations: int
    objective: float
    predictions: np.ndarray


class TikhonovSolver:
    """
    Normal-equation solver bound to one forward configuration and sensor layout.

    Args:
        fwd (ForwardConfig): Discretization of the forward problem
        sensors (SensorSet): Measurement locations
        method (str): "cg" (matrix-free) or "dense" (Gram matrix + Cholesky)
        cg (CgConfig): Outer CG settings for the matrix-free path
        probe_diagonal (bool): Probe diag(T^T T) column by column for the Jacobi
            preconditioner (small meshes only)
    """

    def __init__(
        self,
        fwd: ForwardConfig,
        sensors: SensorSet,
        method: SolverMethod = "cg",
        cg: Optional[CgConfig] = None,
        probe_diagonal: bool = False,
    ):
        if method not in ("cg", "dense"):
            raise ArgumentError(f"unknown Tikhonov method {method!r}")
        self.fwd = fwd
        self.sensors = sensors
        self.method = method
        self.cg = cg or CgConfig()
        self.operator = ObservationOperator(fwd, sensors)
        self.n = self.operator.n_sensors
        self._mass = fwd.mesh.mass
        self._terminal = None
        self._gram = None
        self._gram_diagonal = None
        self._factors = {}
        self._lock = threading.Lock()
        if method == "dense":
            self._terminal = self.operator.terminal_matrix()
            sampled = self.operator.sampling @ self._terminal
            self._gram = sampled.T @ sampled
            self._gram_diagonal = np.diag(self._gram).copy()
            logger.info(f"Dense Tikhonov path ready: n_dof={self.operator.n_dof}, n={self.n}")
        elif probe_diagonal:
            self._gram_diagonal = self._probe_gram_diagonal()

    def _probe_gram_diagonal(self) -> np.ndarray:
        diagonal = np.empty(self.operator.n_dof)
        unit = np.zeros(self.operator.n_dof)
        for j in range(self.operator.n_dof):
            unit[j] = 1.0
            column = self.operator.apply(unit)
            diagonal[j] = column @ column
            unit[j] = 0.0
        return diagonal

    def predict(self, F: np.ndarray) -> np.ndarray:
        """Sensor values of S_{tau,h} applied to coefficients F."""
        if self._terminal is not None:
            return self.operator.sampling @ (self._terminal @ F)
        return self.operator.apply(F)

    def normal_apply(self, lam: float, F: np.ndarray) -> np.ndarray:
        """(lam M + (1/n) T^T T) F."""
        if self._gram is not None:
            return lam * (self._mass @ F) + (self._gram @ F) / self.n
        return lam * (self._mass @ F) + self.operator.adjoint(self.operator.apply(F)) / self.n

    def normal_rhs(self, values: np.ndarray) -> np.ndarray:
        """(1/n) T^T m."""
        if self._terminal is not None:
            return self._terminal.T @ (self.operator.sampling.T @ values) / self.n
        return self.operator.adjoint(values) / self.n

    def _cholesky(self, lam: float):
        with self._lock:
            factor = self._factors.get(lam)
            if factor is None:
                matrix = lam * self._mass.toarray() + self._gram / self.n
                try:
                    factor = scipy.linalg.cho_factor(matrix, lower=True)
                except np.linalg.LinAlgError as exc:
                    raise SolverError(f"Cholesky factorization failed at lambda={lam:.3e}: {exc}") from exc
                if len(self._factors) >= 8:
                    self._factors.clear()
                self._factors[lam] = factor
            return factor

    def solve(self, values: np.ndarray, lam: float, cg: Optional[CgConfig] = None) -> TikhonovResult:
        """
        Tikhonov reconstruction for data ``values`` and parameter ``lam``.

        Raises:
            ArgumentError: lam <= 0 or data of the wrong length
            SolverError: the outer (or a time-step) CG solve failed, or the dense normal
                matrix is not numerically positive definite
        """
        if not lam > 0:
            raise ArgumentError(f"regularization parameter must be positive, got {lam}")
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n,):
            raise ArgumentError(f"data has shape {values.shape}, expected ({self.n},)")
        rhs = self.normal_rhs(values)
        iterations = 0
        if self.method == "dense":
            coefficients = scipy.linalg.cho_solve(self._cholesky(lam), rhs)
        else:
            cfg = cg or self.cg
            diagonal = None
            if cfg.preconditioner == "jacobi":
                diagonal = lam * self._mass.diagonal()
                if self._gram_diagonal is not None:
                    diagonal = diagonal + self._gram_diagonal / self.n
            outcome = cg_solve(lambda F: self.normal_apply(lam, F), rhs, cfg, diagonal=diagonal)
            coefficients = outcome.x
            iterations = outcome.iterations

        f_h = FieldVector(self.fwd.mesh, coefficients)
        predictions = self.predict(coefficients)
        residual_n = empirical_norm(predictions - values)
        penalty = l2_norm(f_h)
        logger.debug(f"Tikhonov lam={lam:.3e}: residual_n={residual_n:.4e}, penalty={penalty:.4e}, cg={iterations}")
        return TikhonovResult(
            f_h=f_h,
            lam=lam,
            residual_n=residual_n,
            penalty=penalty,
            cg_iterations=iterations,
            objective=residual_n**2 + lam * penalty**2,
            predictions=predictions,
        )


def tikhonov_solve(p: TikhonovProblem) -> TikhonovResult:
    """Solve one :class:`TikhonovProblem`."""
    solver = TikhonovSolver(p.fwd, p.data.sensors, method=p.method, cg=p.cg)
    return solver.solve(p.data.values, p.lam)


@dataclass(frozen=True)
class ErrorMetrics:
    pred_err_n: float
    l2_err: float
    hminus1_err: float
    residual_n: float


def error_metrics(r: TikhonovResult, f_true: FieldVector, truth_samples: np.ndarray) -> ErrorMetrics:
    """
    Prediction error ||S f* - S_{tau,h} f_h||_n and source errors in L2 and H^{-1}.

    Raises:
        ArgumentError: ``f_true`` is on another mesh or the truth samples have the wrong length
    """
    if not r.f_h.mesh.same_grid(f_true.mesh):
        raise ArgumentError("true source must be given on the inversion mesh")
    truth_samples = np.asarray(truth_samples, dtype=np.float64)
    if truth_samples.shape != r.predictions.shape:
        raise ArgumentError(f"truth samples have shape {truth_samples.shape}, expected {r.predictions.shape}")
    difference = r.f_h - f_true
    return ErrorMetrics(
        pred_err_n=empirical_norm(truth_samples - r.predictions),
        l2_err=l2_norm(difference),
        hminus1_err=hminus1_norm(difference),
        residual_n=r.residual_n,
    )


def rule_exponent(d: int) -> float:
    """Exponent 1/2 + d/8 of the parameter rule."""
    if d < 1:
        raise ArgumentError(f"dimension must be >= 1, got {d}")
    return 0.5 + d / 8.0


def lambda_rule(sigma: float, n: int, f_norm: float, d: int = 2, use_rho0: bool = False) -> float:
    """
    lambda^{1/2 + d/8} = sigma n^{-1/2} / ||f*||.

    With ``use_rho0`` the norm is replaced by rho_0 = ||f*|| + sigma n^{-1/2}. sigma = 0
    returns 0, which callers must reject before solving.

    Raises:
        ArgumentError: f_norm <= 0, sigma < 0 or n < 1
    """
    if not f_norm > 0:
        raise ArgumentError(f"source norm must be positive, got {f_norm}")
    if sigma < 0 or n < 1:
        raise ArgumentError(f"need sigma >= 0 and n >= 1, got sigma={sigma}, n={n}")
    if sigma == 0:
        logger.warning("lambda rule with sigma = 0 gives lambda = 0")
        return 0.0
    scale = sigma / math.sqrt(n)
    norm = f_norm + scale if use_rho0 else f_norm
    return (scale / norm) ** (1.0 / rule_exponent(d))


def initial_lambda(n: int, d: int = 2) -> float:
    """Starting value n^{-4/(d+4)} of the fixed-point iteration."""
    if n < 1:
        raise ArgumentError(f"n must be >= 1, got {n}")
    return float(n) ** (-4.0 / (d + 4))


class StopReason(str, Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class LambdaIterate:
    lam: float
    residual_n: float
    penalty: float
    pred_err_n: Optional[float] = None
    cg_iterations: int = 0


@dataclass(frozen=True, eq=False)
class LambdaTrace:
    """
    History of the fixed-point iteration.

    ``final_lambda`` is the last updated parameter; when converged it satisfies
    final_lambda^{1/2+d/8} = n^{-1/2} residual_n / penalty of the last iterate.
    """

    iterates: List[LambdaIterate]
    converged: bool
    stop_reason: StopReason
    final_lambda: float
    result: Optional[TikhonovResult] = None


@dataclass(frozen=True)
class LambdaSelectionOptions:
    d: int = 2
    initial: Optional[float] = None
    tolerance: float = 1e-10
    max_iterations: int = 50
    method: SolverMethod = "cg"
    cg: CgConfig = field(default_factory=CgConfig)

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ArgumentError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not self.tolerance > 0:
            raise ArgumentError(f"tolerance must be positive, got {self.tolerance}")
        if self.initial is not None and not self.initial > 0:
            raise ArgumentError(f"initial lambda must be positive, got {self.initial}")


def select_lambda(
    fwd: ForwardConfig,
    data: MeasurementSet,
    opts: Optional[LambdaSelectionOptions] = None,
    solver: Optional[TikhonovSolver] = None,
    truth_samples: Optional[np.ndarray] = None,
) -> LambdaTrace:
    """
    Self-consistent parameter choice: solve at lambda_j, then set
    lambda_{j+1}^{1/2+d/8} = n^{-1/2} ||S_{tau,h} f_h - m||_n / ||f_h||_{L2}.

    Stops when |lambda_{j+1} - lambda_j| < tolerance, after ``max_iterations`` solves, or
    when f_h = 0 or the residual vanishes (degenerate stop, recorded in the trace).
    """
    opts = opts or LambdaSelectionOptions()
    solver = solver or TikhonovSolver(fwd, data.sensors, method=opts.method, cg=opts.cg)
    n = data.n
    exponent = rule_exponent(opts.d)
    lam = opts.initial if opts.initial is not None else initial_lambda(n, opts.d)
    iterates: List[LambdaIterate] = []
    result = None

    for _ in range(opts.max_iterations):
        result = solver.solve(data.values, lam)
        pred_err = None if truth_samples is None else empirical_norm(np.asarray(truth_samples) - result.predictions)
        iterates.append(LambdaIterate(lam, result.residual_n, result.penalty, pred_err, result.cg_iterations))
        logger.info(
            f"lambda iterate {len(iterates) - 1}: lambda={lam:.6e}, residual_n={result.residual_n:.6e}, "
            f"penalty={result.penalty:.6e}"
        )
        if not result.penalty > 0:
            logger.warning("lambda iteration stopped: recovered source vanished")
            return LambdaTrace(iterates, False, StopReason.DEGENERATE, lam, result)
        next_lam = (result.residual_n / (math.sqrt(n) * result.penalty)) ** (1.0 / exponent)
        if not next_lam > 0:
            logger.warning("lambda iteration stopped: residual vanished")
            return LambdaTrace(iterates, False, StopReason.DEGENERATE, lam, result)
        if abs(next_lam - lam) < opts.tolerance:
            return LambdaTrace(iterates, True, StopReason.CONVERGED, next_lam, result)
        lam = next_lam

    logger.warning(f"lambda iteration hit the cap of {opts.max_iterations} iterations")
    return LambdaTrace(iterates, False, StopReason.MAX_ITERATIONS, lam, result)


def coupled_discretization(lam: float, T: float = 1.0) -> Tuple[float, float]:
    """
    Mesh size and time step matched to lambda: h = O(lambda^{1/4}), tau |ln tau| = O(lambda^{1/2}).

    Returns:
        tuple: (h, tau) with 1/h an integer >= 2 and T/tau an integer
    """
    if not lam > 0:
        raise ArgumentError(f"regularization parameter must be positive, got {lam}")
    cells = max(2, math.ceil(lam ** (-0.25) - 1e-9))
    target = math.sqrt(lam)
    if target >= 1.0 / math.e:
        tau_star = 1.0 / math.e
    else:
        tau_star = scipy.optimize.brentq(lambda t: -t * math.log(t) - target, 1e-300, 1.0 / math.e)
    steps = max(1, math.ceil(T / tau_star - 1e-9))
    return 1.0 / cells, T / steps
