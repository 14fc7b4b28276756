"""
Linear finite elements on a structured triangulation of the unit square.

The square is divided into m x m cells (m = 1/h) and every cell is split by the diagonal
from its lower-left to its upper-right corner. Nodes are numbered row-major by y then x.
Dirichlet nodes are eliminated, so every assembled operator acts on interior degrees of
freedom only and stays symmetric positive-definite.
"""

import logging
import numbers
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp

from backend.app.utils.errors import ArgumentError
from backend.app.utils.sparse_core import CgConfig, SparseMatrix, as_csr, cg_solve, symmetrize

logger = logging.getLogger(__name__)

ScalarField = Union[float, Callable[[np.ndarray, np.ndarray], np.ndarray]]
TimeSignal = Union[float, Callable[[float], float]]

_MASS_TEMPLATE = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0

# Degree-4 symmetric rule on the reference triangle: barycentric points and weights (sum 1).
_QUAD_A1, _QUAD_B1, _QUAD_W1 = 0.445948490915965, 0.108103018168070, 0.223381589678011
_QUAD_A2, _QUAD_B2, _QUAD_W2 = 0.091576213509771, 0.816847572980459, 0.109951743655322
_QUAD_POINTS = np.array(
    [
        [_QUAD_A1, _QUAD_A1, _QUAD_B1],
        [_QUAD_A1, _QUAD_B1, _QUAD_A1],
        [_QUAD_B1, _QUAD_A1, _QUAD_A1],
        [_QUAD_A2, _QUAD_A2, _QUAD_B2],
        [_QUAD_A2, _QUAD_B2, _QUAD_A2],
        [_QUAD_B2, _QUAD_A2, _QUAD_A2],
    ]
)
_QUAD_WEIGHTS = np.array([_QUAD_W1] * 3 + [_QUAD_W2] * 3)

_NORM_SOLVE = CgConfig(rel_tolerance=1e-13, preconditioner="jacobi")


def _is_constant(value) -> bool:
    return isinstance(value, numbers.Real)


@dataclass(frozen=True)
class ProblemCoefficients:
    """
    Coefficients of the heat problem u_t + L u = f(x) g(t), L u = -div(a grad u) + c u.

    ``a`` and ``c`` are either constants or vectorized callables ``(x, y) -> values``;
    ``g`` is a constant or a callable ``t -> value``.
    """

    a: ScalarField = 1.0
    c: ScalarField = 0.0
    g: TimeSignal = 1.0
    T: float = 1.0

    def __post_init__(self):
        if not self.T > 0:
            raise ArgumentError(f"final time T must be positive, got {self.T}")
        if _is_constant(self.a) and not self.a > 0:
            raise ArgumentError(f"diffusion a must be positive, got {self.a}")
        if _is_constant(self.c) and self.c < 0:
            raise ArgumentError(f"reaction c must be nonnegative, got {self.c}")
        if _is_constant(self.g) and self.g < 0:
            raise ArgumentError(f"time signal g must be nonnegative, got {self.g}")

    @staticmethod
    def _field_values(field, x, y):
        x = np.asarray(x, dtype=np.float64)
        if _is_constant(field):
            return np.full(x.shape, float(field))
        return np.broadcast_to(np.asarray(field(x, np.asarray(y, dtype=np.float64)), dtype=np.float64), x.shape)

    def diffusion_at(self, x, y) -> np.ndarray:
        return self._field_values(self.a, x, y)

    def reaction_at(self, x, y) -> np.ndarray:
        return self._field_values(self.c, x, y)

    def signal_at(self, times) -> np.ndarray:
        """Evaluate g at the given times; negative values are rejected."""
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        if _is_constant(self.g):
            values = np.full(times.shape, float(self.g))
        else:
            values = np.array([float(self.g(t)) for t in times])
        if np.any(values < 0):
            raise ArgumentError("time signal g must be nonnegative on [0, T]")
        return values

    @property
    def has_unit_laplacian(self) -> bool:
        return _is_constant(self.a) and self.a == 1 and _is_constant(self.c) and self.c == 0

    @property
    def constant_signal(self) -> Optional[float]:
        return float(self.g) if _is_constant(self.g) else None


@dataclass(frozen=True, eq=False)
class Mesh:
    """Structured P1 triangulation of (0,1)^2; see :func:`build_mesh`."""

    h: float
    cells_per_side: int
    nodes: np.ndarray
    triangles: np.ndarray
    interior_dof_map: np.ndarray
    n_dof: int

    @cached_property
    def dof_nodes(self) -> np.ndarray:
        """Node index of every degree of freedom, in dof order."""
        return np.flatnonzero(self.interior_dof_map >= 0)

    @cached_property
    def dof_coordinates(self) -> np.ndarray:
        return self.nodes[self.dof_nodes]

    def signed_areas(self) -> np.ndarray:
        vertices = self.nodes[self.triangles]
        e1 = vertices[:, 1] - vertices[:, 0]
        e2 = vertices[:, 2] - vertices[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e2[:, 0] * e1[:, 1])

    @cached_property
    def mass(self) -> SparseMatrix:
        return assemble_mass(self)

    @cached_property
    def unit_stiffness(self) -> SparseMatrix:
        """Stiffness matrix of the plain Laplacian (a=1, c=0)."""
        return assemble_stiffness(self, ProblemCoefficients())

    @cached_property
    def h1_gram(self) -> SparseMatrix:
        return as_csr(self.unit_stiffness + self.mass)

    def same_grid(self, other: "Mesh") -> bool:
        return self is other or self.cells_per_side == other.cells_per_side


def build_mesh(h: float) -> Mesh:
    """
    Build the structured triangulation with spacing h.

    Args:
        h (float): Grid spacing; 1/h must be an integer >= 2

    Returns:
        Mesh: nodes, triangles and the interior dof map

    Raises:
        ArgumentError: 1/h is not an integer >= 2
    """
    if not h > 0:
        raise ArgumentError(f"mesh spacing must be positive, got {h}")
    inverse = 1.0 / h
    m = int(round(inverse))
    if m < 2 or abs(inverse - m) > 1e-9 * max(1.0, inverse):
        raise ArgumentError(f"1/h must be an integer >= 2, got 1/h = {inverse}")

    coords = np.arange(m + 1, dtype=np.float64) / m
    xs, ys = np.meshgrid(coords, coords)
    nodes = np.column_stack([xs.ravel(), ys.ravel()])

    ci, cj = np.meshgrid(np.arange(m), np.arange(m))
    n00 = (cj * (m + 1) + ci).ravel()
    n10 = n00 + 1
    n01 = n00 + (m + 1)
    n11 = n01 + 1
    triangles = np.empty((2 * m * m, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([n00, n10, n11])
    triangles[1::2] = np.column_stack([n00, n11, n01])

    node_i = np.arange(nodes.shape[0]) % (m + 1)
    node_j = np.arange(nodes.shape[0]) // (m + 1)
    interior = (node_i > 0) & (node_i < m) & (node_j > 0) & (node_j < m)
    dof_map = np.full(nodes.shape[0], -1, dtype=np.int64)
    dof_map[interior] = np.arange(int(interior.sum()))

    mesh = Mesh(
        h=1.0 / m,
        cells_per_side=m,
        nodes=nodes,
        triangles=triangles,
        interior_dof_map=dof_map,
        n_dof=int(interior.sum()),
    )
    logger.debug(f"Built mesh h=1/{m}: {nodes.shape[0]} nodes, {triangles.shape[0]} triangles, {mesh.n_dof} dofs")
    return mesh


def _element_geometry(mesh: Mesh):
    vertices = mesh.nodes[mesh.triangles]
    x = vertices[:, :, 0]
    y = vertices[:, :, 1]
    area = mesh.signed_areas()
    if np.any(area <= 0):
        raise ArgumentError("mesh has triangles with non-positive signed area")
    grad_x = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / (2.0 * area[:, None])
    grad_y = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / (2.0 * area[:, None])
    centroids = vertices.mean(axis=1)
    return area, np.stack([grad_x, grad_y], axis=2), centroids


def _assemble(mesh: Mesh, local: np.ndarray, include_boundary: bool) -> SparseMatrix:
    n_nodes = mesh.nodes.shape[0]
    rows = np.broadcast_to(mesh.triangles[:, :, None], local.shape)
    cols = np.broadcast_to(mesh.triangles[:, None, :], local.shape)
    full = symmetrize(sp.coo_matrix((local.ravel(), (rows.ravel(), cols.ravel())), shape=(n_nodes, n_nodes)))
    if include_boundary:
        return full
    dofs = mesh.dof_nodes
    return as_csr(full[dofs][:, dofs])


def assemble_mass(mesh: Mesh, include_boundary: bool = False) -> SparseMatrix:
    """
    Consistent P1 mass matrix.

    Args:
        mesh (Mesh): The triangulation
        include_boundary (bool): Return the full node-indexed matrix instead of the
            interior-dof block

    Returns:
        SparseMatrix: symmetric positive-definite mass matrix
    """
    area, _, _ = _element_geometry(mesh)
    local = area[:, None, None] * _MASS_TEMPLATE[None, :, :]
    return _assemble(mesh, local, include_boundary)


def assemble_stiffness(mesh: Mesh, coeff: ProblemCoefficients, include_boundary: bool = False) -> SparseMatrix:
    """
    Stiffness matrix of a(v, w) = (a grad v, grad w) + (c v, w).

    a and c are sampled once per triangle at its centroid.

    Raises:
        ArgumentError: a <= 0 or c < 0 at some centroid
    """
    area, grads, centroids = _element_geometry(mesh)
    a_values = coeff.diffusion_at(centroids[:, 0], centroids[:, 1])
    c_values = coeff.reaction_at(centroids[:, 0], centroids[:, 1])
    if np.any(a_values <= 0):
        raise ArgumentError("diffusion coefficient must be positive at every triangle centroid")
    if np.any(c_values < 0):
        raise ArgumentError("reaction coefficient must be nonnegative at every triangle centroid")
    local = (a_values * area)[:, None, None] * np.einsum("eik,ejk->eij", grads, grads)
    local = local + (c_values * area)[:, None, None] * _MASS_TEMPLATE[None, :, :]
    return _assemble(mesh, local, include_boundary)


@dataclass(frozen=True, eq=False)
class FieldVector:
    """
    Coefficients of a P1 function sum_j F_j phi_j over the interior hat functions.

    The coefficient array is copied and frozen on construction.
    """

    mesh: Mesh
    coefficients: np.ndarray

    def __post_init__(self):
        coefficients = np.array(self.coefficients, dtype=np.float64)
        if coefficients.shape != (self.mesh.n_dof,):
            raise ArgumentError(
                f"field has {coefficients.shape} coefficients, mesh has {self.mesh.n_dof} degrees of freedom"
            )
        coefficients.setflags(write=False)
        object.__setattr__(self, "coefficients", coefficients)

    @classmethod
    def zeros(cls, mesh: Mesh) -> "FieldVector":
        return cls(mesh, np.zeros(mesh.n_dof))

    @classmethod
    def basis(cls, mesh: Mesh, dof: int) -> "FieldVector":
        coefficients = np.zeros(mesh.n_dof)
        coefficients[dof] = 1.0
        return cls(mesh, coefficients)

    @classmethod
    def interpolate(cls, mesh: Mesh, func: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "FieldVector":
        """Nodal interpolant of ``func`` (boundary values are dropped)."""
        xy = mesh.dof_coordinates
        return cls(mesh, np.broadcast_to(np.asarray(func(xy[:, 0], xy[:, 1]), dtype=np.float64), (mesh.n_dof,)))

    def _other_coefficients(self, other: "FieldVector") -> np.ndarray:
        if not self.mesh.same_grid(other.mesh):
            raise ArgumentError("fields live on different meshes")
        return other.coefficients

    def __add__(self, other: "FieldVector") -> "FieldVector":
        return FieldVector(self.mesh, self.coefficients + self._other_coefficients(other))

    def __sub__(self, other: "FieldVector") -> "FieldVector":
        return FieldVector(self.mesh, self.coefficients - self._other_coefficients(other))

    def __mul__(self, scalar: float) -> "FieldVector":
        return FieldVector(self.mesh, float(scalar) * self.coefficients)

    __rmul__ = __mul__

    def __neg__(self) -> "FieldVector":
        return FieldVector(self.mesh, -self.coefficients)


def _as_points(points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1 and points.shape[0] == 2:
        points = points[None, :]
    if points.ndim != 2 or points.shape[1] != 2:
        raise ArgumentError(f"points must have shape (n, 2), got {points.shape}")
    return points


def sampling_matrix(mesh: Mesh, points) -> SparseMatrix:
    """
    Point-evaluation matrix P with (P F)_i = v(x_i) for v = sum_j F_j phi_j.

    The containing triangle is found from the cell index floor(x/h), floor(y/h) and one
    diagonal test; boundary nodes contribute nothing.

    Raises:
        ArgumentError: a point lies outside the closed unit square
    """
    points = _as_points(points)
    outside = np.flatnonzero(np.any((points < 0.0) | (points > 1.0) | ~np.isfinite(points), axis=1))
    if outside.size:
        first = outside[0]
        raise ArgumentError(f"point {first} at {tuple(points[first])} lies outside the unit square")

    m = mesh.cells_per_side
    sx = points[:, 0] * m
    sy = points[:, 1] * m
    ci = np.minimum(np.floor(sx).astype(np.int64), m - 1)
    cj = np.minimum(np.floor(sy).astype(np.int64), m - 1)
    s = sx - ci
    t = sy - cj
    n00 = cj * (m + 1) + ci
    n10 = n00 + 1
    n01 = n00 + (m + 1)
    n11 = n01 + 1

    lower = s >= t
    vertex_nodes = np.where(
        lower[:, None],
        np.column_stack([n00, n10, n11]),
        np.column_stack([n00, n11, n01]),
    )
    weights = np.where(
        lower[:, None],
        np.column_stack([1.0 - s, s - t, t]),
        np.column_stack([1.0 - t, s, t - s]),
    )
    dofs = mesh.interior_dof_map[vertex_nodes]
    rows = np.broadcast_to(np.arange(points.shape[0])[:, None], dofs.shape)
    keep = dofs >= 0
    matrix = sp.coo_matrix(
        (weights[keep], (rows[keep], dofs[keep])),
        shape=(points.shape[0], mesh.n_dof),
    )
    return as_csr(matrix)


def evaluate_at_points(v: FieldVector, points) -> np.ndarray:
    """Exact evaluation of the P1 function ``v`` at the given points."""
    return sampling_matrix(v.mesh, points) @ v.coefficients


def l2_norm(v: FieldVector) -> float:
    F = v.coefficients
    return float(np.sqrt(max(F @ (v.mesh.mass @ F), 0.0)))


def h1_norm(v: FieldVector) -> float:
    F = v.coefficients
    return float(np.sqrt(max(F @ (v.mesh.h1_gram @ F), 0.0)))


def hminus1_norm(v: FieldVector, cfg: Optional[CgConfig] = None) -> float:
    """
    Discrete dual norm sqrt((M F)^T (A0 + M)^{-1} (M F)).

    Raises:
        SolverError: the inner CG solve did not converge
    """
    load = v.mesh.mass @ v.coefficients
    if not np.any(load):
        return 0.0
    solution = cg_solve(v.mesh.h1_gram, load, cfg or _NORM_SOLVE).x
    return float(np.sqrt(max(load @ solution, 0.0)))


def project_l2(source: Union[FieldVector, Callable], mesh: Mesh, cfg: Optional[CgConfig] = None) -> FieldVector:
    """
    L2 projection onto the P1 space of ``mesh``.

    Args:
        source: A vectorized callable ``(x, y) -> values`` or a FieldVector on ``mesh`` or
            on a nested refinement of it (cells per side a multiple of the target's)
        mesh (Mesh): Target mesh
        cfg (CgConfig): Solver settings for the mass-matrix solve

    Returns:
        FieldVector: the projection on ``mesh``

    Raises:
        ArgumentError: the source mesh is not nested in the target mesh
    """
    if isinstance(source, FieldVector):
        quadrature_mesh = source.mesh
        if quadrature_mesh.cells_per_side % mesh.cells_per_side != 0:
            raise ArgumentError(
                f"cannot project from 1/h={quadrature_mesh.cells_per_side} onto non-nested 1/h={mesh.cells_per_side}"
            )
    else:
        quadrature_mesh = mesh

    vertices = quadrature_mesh.nodes[quadrature_mesh.triangles]
    area = quadrature_mesh.signed_areas()
    points = np.einsum("qk,ekd->eqd", _QUAD_POINTS, vertices).reshape(-1, 2)
    weights = (area[:, None] * _QUAD_WEIGHTS[None, :]).ravel()
    if isinstance(source, FieldVector):
        values = evaluate_at_points(source, points)
    else:
        values = np.broadcast_to(np.asarray(source(points[:, 0], points[:, 1]), dtype=np.float64), weights.shape)

    load = sampling_matrix(mesh, points).T @ (weights * values)
    if not np.any(load):
        return FieldVector.zeros(mesh)
    return FieldVector(mesh, cg_solve(mesh.mass, load, cfg or _NORM_SOLVE).x)
