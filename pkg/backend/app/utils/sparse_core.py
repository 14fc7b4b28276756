"""
Sparse and dense linear algebra used by the finite element and inversion layers.

Matrices are stored as canonical ``scipy.sparse.csr_matrix`` objects (sorted column
indices, no duplicates). Symmetric positive-definite systems are solved with
conjugate gradients, either on an assembled matrix or on a matrix-free apply callback.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Union

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from backend.app.utils.errors import ArgumentError, SolverError

logger = logging.getLogger(__name__)

SparseMatrix = sp.csr_matrix
ApplyCallback = Callable[[np.ndarray], np.ndarray]


def as_csr(matrix) -> SparseMatrix:
    """Return ``matrix`` as a canonical CSR matrix with float64 values."""
    csr = sp.csr_matrix(matrix, dtype=np.float64)
    csr.sum_duplicates()
    csr.sort_indices()
    return csr


def symmetrize(matrix) -> SparseMatrix:
    """
    Return (A + Aᵀ)/2 in canonical CSR form.

    Floating point addition is commutative, so entry (i, j) and (j, i) of the
    result are bitwise equal.
    """
    csr = as_csr(matrix)
    return as_csr((csr + csr.T) * 0.5)


def spmv(A: SparseMatrix, x: np.ndarray) -> np.ndarray:
    """Sparse matrix-vector product with a dimension check."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != A.shape[1]:
        raise ArgumentError(f"spmv: vector of length {x.shape} does not match matrix with {A.shape[1]} columns")
    return A @ x


@dataclass(frozen=True)
class CgConfig:
    """
    Stopping rule and preconditioning for :func:`cg_solve`.

    Args:
        rel_tolerance (float): Stop once ||A x - b|| <= rel_tolerance * ||b||
        max_iterations (int | None): Iteration cap, 10 * n_rows when None
        preconditioner (str): "none" or "jacobi" (diagonal scaling)
    """

    rel_tolerance: float = 1e-10
    max_iterations: Optional[int] = None
    preconditioner: Literal["none", "jacobi"] = "none"

    def __post_init__(self):
        if not self.rel_tolerance > 0:
            raise ArgumentError(f"rel_tolerance must be positive, got {self.rel_tolerance}")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ArgumentError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.preconditioner not in ("none", "jacobi"):
            raise ArgumentError(f"unknown preconditioner {self.preconditioner!r}")

    def iteration_cap(self, n_rows: int) -> int:
        return self.max_iterations if self.max_iterations is not None else max(1, 10 * n_rows)


@dataclass(frozen=True)
class CgResult:
    """Solution of a CG solve together with its convergence record."""

    x: np.ndarray
    iterations: int
    residual_norm: float


def _as_operator(A: Union[SparseMatrix, np.ndarray, ApplyCallback, LinearOperator], n: int) -> LinearOperator:
    if isinstance(A, LinearOperator):
        return A
    if sp.issparse(A) or isinstance(A, np.ndarray):
        if A.shape != (n, n):
            raise ArgumentError(f"cg_solve: matrix shape {A.shape} does not match right-hand side of length {n}")
        return LinearOperator((n, n), matvec=lambda v: A @ v, dtype=np.float64)
    if callable(A):
        return LinearOperator((n, n), matvec=lambda v: np.asarray(A(np.ravel(v)), dtype=np.float64), dtype=np.float64)
    raise ArgumentError(f"cg_solve: unsupported operator type {type(A).__name__}")


def cg_solve(
    A,
    b: np.ndarray,
    cfg: Optional[CgConfig] = None,
    x0: Optional[np.ndarray] = None,
    diagonal: Optional[np.ndarray] = None,
) -> CgResult:
    """
    Solve A x = b for symmetric positive-definite A by conjugate gradients.

    Args:
        A: Assembled sparse/dense matrix or an apply callback ``v -> A v``
        b (np.ndarray): Right-hand side
        cfg (CgConfig): Tolerance, iteration cap and preconditioner choice
        x0 (np.ndarray): Optional warm start
        diagonal (np.ndarray): Diagonal of A for the Jacobi preconditioner; taken from
            the matrix when A is assembled, required for matrix-free Jacobi

    Returns:
        CgResult: solution, iteration count and final residual norm

    Raises:
        ArgumentError: non-finite data or mismatched shapes
        SolverError: the tolerance was not reached within the iteration cap
    """
    cfg = cfg or CgConfig()
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise ArgumentError("cg_solve: right-hand side must be a vector")
    if not np.all(np.isfinite(b)):
        raise ArgumentError("cg_solve: right-hand side contains non-finite values")
    n = b.shape[0]
    operator = _as_operator(A, n)

    preconditioner = None
    if cfg.preconditioner == "jacobi":
        if diagonal is None:
            if not (sp.issparse(A) or isinstance(A, np.ndarray)):
                raise ArgumentError("cg_solve: Jacobi preconditioning of a matrix-free operator needs its diagonal")
            diagonal = np.asarray(A.diagonal(), dtype=np.float64)
        if np.any(diagonal <= 0):
            raise ArgumentError("cg_solve: Jacobi preconditioner needs a positive diagonal")
        inverse_diagonal = 1.0 / diagonal
        preconditioner = LinearOperator((n, n), matvec=lambda r: inverse_diagonal * np.ravel(r), dtype=np.float64)

    iterations = 0

    def count(_xk):
        nonlocal iterations
        iterations += 1

    max_iterations = cfg.iteration_cap(n)
    x, info = cg(
        operator,
        b,
        x0=x0,
        rtol=cfg.rel_tolerance,
        atol=0.0,
        maxiter=max_iterations,
        M=preconditioner,
        callback=count,
    )
    residual = float(np.linalg.norm(b - operator.matvec(x)))
    if info < 0:
        raise ArgumentError("cg_solve: illegal input or breakdown")
    if info > 0:
        raise SolverError(
            f"CG did not reach relative tolerance {cfg.rel_tolerance:.1e} in {max_iterations} iterations",
            residual=residual,
            iterations=iterations,
        )
    logger.debug(f"CG converged in {iterations} iterations, residual {residual:.3e}")
    return CgResult(x=x, iterations=iterations, residual_norm=residual)


def dense_generalized_eig(A: np.ndarray, B: np.ndarray):
    """
    Solve the symmetric-definite pencil A v = rho B v.

    The pencil is reduced with the Cholesky factor of B and the reduced symmetric
    problem is solved by LAPACK (tridiagonal reduction followed by QR/QL sweeps).

    Args:
        A (np.ndarray): Dense symmetric matrix
        B (np.ndarray): Dense symmetric positive-definite matrix

    Returns:
        tuple: eigenvalues in ascending order and the B-orthonormal eigenvector matrix
            (one eigenvector per column)

    Raises:
        ArgumentError: shapes differ, a matrix is not symmetric, or B is not SPD
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape != B.shape:
        raise ArgumentError(f"dense_generalized_eig: incompatible shapes {A.shape} and {B.shape}")
    for name, matrix in (("A", A), ("B", B)):
        scale = max(1.0, float(np.abs(matrix).max(initial=0.0)))
        if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12 * scale):
            raise ArgumentError(f"dense_generalized_eig: {name} is not symmetric")
    try:
        scipy.linalg.cholesky(B, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ArgumentError(f"dense_generalized_eig: B is not positive definite ({exc})") from exc
    eigenvalues, eigenvectors = scipy.linalg.eigh(A, B)
    return eigenvalues, eigenvectors
