"""
Discrete forward operator of the heat-source problem and its exact transpose.

The source f enters u_t + L u = f(x) g(t), u(0) = 0, u = 0 on the boundary. Backward Euler
in time with P1 elements in space gives

    (M + tau A) U^i = M U^{i-1} + tau g(t^i) M F,   i = 1..N,   U^0 = 0,

and S_{tau,h} f := U^N. Sampling U^N at the sensors gives the observation map T; its
transpose runs the same recursion backwards in time.
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Literal, Sequence, Union

import numpy as np
import scipy.integrate
from scipy.sparse.linalg import splu

from backend.app.models.fem_grid import FieldVector, Mesh, ProblemCoefficients, assemble_stiffness, sampling_matrix
from backend.app.utils.errors import ArgumentError, SolverError
from backend.app.utils.sparse_core import CgConfig, SparseMatrix, as_csr, cg_solve

if TYPE_CHECKING:
    from backend.app.models.sensing import SensorSet

logger = logging.getLogger(__name__)

SensorsLike = Union["SensorSet", np.ndarray, Sequence[Sequence[float]]]


def _sensor_points(sensors: SensorsLike) -> np.ndarray:
    return np.asarray(getattr(sensors, "points", sensors), dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class ForwardConfig:
    """
    Space-time discretization of the forward problem.

    Args:
        mesh (Mesh): Spatial triangulation
        coeff (ProblemCoefficients): a, c, g and the final time T
        tau (float): Time step, tau * n_steps must equal T
        n_steps (int): Number of backward Euler steps N
        step_tolerance (float): Relative CG tolerance of every time step
        step_solver (str): "cg" (warm-started Jacobi CG) or "direct" (one sparse LU)
    """

    mesh: Mesh
    coeff: ProblemCoefficients
    tau: float
    n_steps: int
    step_tolerance: float = 1e-12
    step_solver: Literal["cg", "direct"] = "cg"

    def __post_init__(self):
        if not self.tau > 0:
            raise ArgumentError(f"time step must be positive, got {self.tau}")
        if self.n_steps < 1:
            raise ArgumentError(f"number of time steps must be >= 1, got {self.n_steps}")
        if abs(self.tau * self.n_steps - self.coeff.T) > 1e-12 * max(1.0, self.coeff.T):
            raise ArgumentError(f"tau * n_steps = {self.tau * self.n_steps} does not equal T = {self.coeff.T}")
        if self.step_solver not in ("cg", "direct"):
            raise ArgumentError(f"unknown step solver {self.step_solver!r}")

    @classmethod
    def from_step(cls, mesh: Mesh, coeff: ProblemCoefficients, tau: float, **kwargs) -> "ForwardConfig":
        """Build a configuration from the step size; T/tau must be an integer."""
        if not tau > 0:
            raise ArgumentError(f"time step must be positive, got {tau}")
        ratio = coeff.T / tau
        n_steps = int(round(ratio))
        if n_steps < 1 or abs(ratio - n_steps) > 1e-9 * max(1.0, ratio):
            raise ArgumentError(f"T/tau must be a positive integer, got {ratio}")
        return cls(mesh=mesh, coeff=coeff, tau=coeff.T / n_steps, n_steps=n_steps, **kwargs)

    @cached_property
    def stiffness(self) -> SparseMatrix:
        return assemble_stiffness(self.mesh, self.coeff)

    @cached_property
    def step_matrix(self) -> SparseMatrix:
        return as_csr(self.mesh.mass + self.tau * self.stiffness)

    @cached_property
    def signal(self) -> np.ndarray:
        """g(t^i) for i = 1..N (right endpoints)."""
        return self.coeff.signal_at(self.tau * np.arange(1, self.n_steps + 1))

    @cached_property
    def _step_cg(self) -> CgConfig:
        return CgConfig(rel_tolerance=self.step_tolerance, preconditioner="jacobi")

    @cached_property
    def _step_lu(self):
        return factor_step_matrix(self)

    def solve_step(self, rhs: np.ndarray, guess: np.ndarray) -> np.ndarray:
        """Solve (M + tau A) x = rhs, warm-started from ``guess`` when using CG."""
        if self.step_solver == "direct":
            return self._step_lu.solve(rhs)
        return cg_solve(self.step_matrix, rhs, self._step_cg, x0=guess).x


def factor_step_matrix(cfg: ForwardConfig):
    """
    Sparse LU of M + tau A.

    Raises:
        SolverError: the step matrix is numerically singular
    """
    try:
        return splu(cfg.step_matrix.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"LU factorization of the step matrix failed: {exc}") from exc


def terminal_state(cfg: ForwardConfig, F: np.ndarray) -> np.ndarray:
    """Coefficient-space forward map F -> U^N."""
    mass = cfg.mesh.mass
    load = mass @ np.asarray(F, dtype=np.float64)
    state = np.zeros(cfg.mesh.n_dof)
    if not np.any(load):
        return state
    for g_i in cfg.signal:
        state = cfg.solve_step(mass @ state + cfg.tau * g_i * load, state)
    return state


def transposed_terminal_state(cfg: ForwardConfig, Z: np.ndarray) -> np.ndarray:
    """
    Algebraic transpose of :func:`terminal_state`.

    With B = (M + tau A)^{-1}: q_N = B z, q_i = B M q_{i+1}, result = sum_i tau g_i M q_i.
    """
    mass = cfg.mesh.mass
    Z = np.asarray(Z, dtype=np.float64)
    result = np.zeros(cfg.mesh.n_dof)
    if not np.any(Z):
        return result
    rhs = Z
    adjoint = np.zeros(cfg.mesh.n_dof)
    for g_i in cfg.signal[::-1]:
        adjoint = cfg.solve_step(rhs, adjoint)
        weighted = mass @ adjoint
        result += cfg.tau * g_i * weighted
        rhs = weighted
    return result


def terminal_matrix(cfg: ForwardConfig) -> np.ndarray:
    """
    Dense terminal-state matrix K (n_dof x n_dof), computed by running the recursion
    on the identity block with one sparse LU of M + tau A.
    """
    mass = cfg.mesh.mass
    lu = factor_step_matrix(cfg)
    load = mass.toarray()
    state = np.zeros((cfg.mesh.n_dof, cfg.mesh.n_dof))
    for g_i in cfg.signal:
        state = lu.solve(mass @ state + cfg.tau * g_i * load)
    logger.debug(f"Formed dense terminal matrix of size {cfg.mesh.n_dof} over {cfg.n_steps} steps")
    return state


def forward_solve(cfg: ForwardConfig, f: FieldVector) -> FieldVector:
    """
    Terminal state S_{tau,h} f of the backward Euler / P1 scheme.

    Raises:
        ArgumentError: ``f`` lives on another mesh
        SolverError: a time-step CG solve failed
    """
    if not f.mesh.same_grid(cfg.mesh):
        raise ArgumentError("source field and forward configuration use different meshes")
    return FieldVector(cfg.mesh, terminal_state(cfg, f.coefficients))


class ObservationOperator:
    """
    Linear map T: coefficients F -> values of S_{tau,h} f at the sensors, with its transpose.

    The point-evaluation matrix P is built once; T = P K and T^T = K^T P^T where K is the
    terminal-state map.
    """

    def __init__(self, cfg: ForwardConfig, sensors: SensorsLike):
        self.cfg = cfg
        self.points = _sensor_points(sensors)
        self.sampling = sampling_matrix(cfg.mesh, self.points)

    @property
    def n_sensors(self) -> int:
        return self.points.shape[0]

    @property
    def n_dof(self) -> int:
        return self.cfg.mesh.n_dof

    def apply(self, F: np.ndarray) -> np.ndarray:
        return self.sampling @ terminal_state(self.cfg, F)

    def adjoint(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.n_sensors,):
            raise ArgumentError(f"adjoint input has shape {w.shape}, expected ({self.n_sensors},)")
        return transposed_terminal_state(self.cfg, self.sampling.T @ w)

    def terminal_matrix(self) -> np.ndarray:
        return terminal_matrix(self.cfg)


def sample_forward(cfg: ForwardConfig, f: FieldVector, sensors: SensorsLike) -> np.ndarray:
    """Noise-free observations (S_{tau,h} f)(x_i)."""
    if not f.mesh.same_grid(cfg.mesh):
        raise ArgumentError("source field and forward configuration use different meshes")
    return ObservationOperator(cfg, sensors).apply(f.coefficients)


def adjoint_sample(cfg: ForwardConfig, w: np.ndarray, sensors: SensorsLike) -> FieldVector:
    """Exact transpose of :func:`sample_forward` on coefficient vectors."""
    return FieldVector(cfg.mesh, ObservationOperator(cfg, sensors).adjoint(w))


@dataclass(frozen=True)
class SpectralMode:
    """Dirichlet eigenfunction sin(p pi x) sin(q pi y) with mu = pi^2 (p^2 + q^2)."""

    p: int
    q: int
    mu: float
    alpha: float


def spectral_alpha(mu: float, coeff: ProblemCoefficients) -> float:
    """alpha = exp(-mu T) * int_0^T exp(mu s) g(s) ds."""
    T = coeff.T
    constant = coeff.constant_signal
    if constant is not None:
        return constant * -math.expm1(-mu * T) / mu
    value, _ = scipy.integrate.quad(lambda s: math.exp(-mu * (T - s)) * coeff.signal_at(s)[0], 0.0, T, limit=200)
    return float(value)


def spectral_mode(p: int, q: int, coeff: ProblemCoefficients) -> SpectralMode:
    if p < 1 or q < 1:
        raise ArgumentError(f"mode indices must be positive, got ({p}, {q})")
    mu = math.pi**2 * (p * p + q * q)
    return SpectralMode(p=p, q=q, mu=mu, alpha=spectral_alpha(mu, coeff))


def spectral_source(modes: Sequence[SpectralMode], weights: Sequence[float]):
    """Vectorized callable for f = sum_k w_k sin(p_k pi x) sin(q_k pi y)."""
    if len(modes) != len(weights):
        raise ArgumentError("modes and weights must have the same length")

    def source(x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        total = np.zeros(np.broadcast(x, y).shape)
        for mode, weight in zip(modes, weights):
            total = total + weight * np.sin(mode.p * np.pi * x) * np.sin(mode.q * np.pi * y)
        return total

    return source


def spectral_oracle(
    coeff: ProblemCoefficients,
    modes: Sequence[SpectralMode],
    weights: Sequence[float],
    points,
) -> np.ndarray:
    """
    Exact values (S f)(points) for f = sum_k w_k sin(p_k pi x) sin(q_k pi y).

    Raises:
        ArgumentError: the coefficients are not a = 1, c = 0
    """
    if not coeff.has_unit_laplacian:
        raise ArgumentError("spectral oracle requires constant coefficients a = 1, c = 0")
    if len(modes) != len(weights):
        raise ArgumentError("modes and weights must have the same length")
    points = _sensor_points(points)
    values = np.zeros(points.shape[0])
    for mode, weight in zip(modes, weights):
        values += weight * mode.alpha * np.sin(mode.p * np.pi * points[:, 0]) * np.sin(mode.q * np.pi * points[:, 1])
    return values
