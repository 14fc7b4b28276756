import numpy as np
import pytest
import scipy.linalg

from backend.app.models.fem_grid import (
    FieldVector,
    ProblemCoefficients,
    assemble_mass,
    assemble_stiffness,
    build_mesh,
    evaluate_at_points,
    h1_norm,
    hminus1_norm,
    l2_norm,
    project_l2,
    sampling_matrix,
)
from backend.app.utils.errors import ArgumentError


def sine(x, y):
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def test_build_mesh_counts():
    mesh = build_mesh(0.25)
    assert mesh.cells_per_side == 4
    assert mesh.nodes.shape == (25, 2)
    assert mesh.triangles.shape == (32, 3)
    assert mesh.n_dof == 9
    assert np.allclose(mesh.dof_coordinates[0], [0.25, 0.25])


@pytest.mark.parametrize("h", [0.0, -0.5, 0.3, 1.0])
def test_build_mesh_rejects_bad_spacing(h):
    with pytest.raises(ArgumentError):
        build_mesh(h)


def test_triangles_are_counter_clockwise():
    mesh = build_mesh(1 / 6)
    assert np.allclose(mesh.signed_areas(), 0.5 / 36)


def test_full_mass_integrates_constants():
    mesh = build_mesh(1 / 5)
    M = assemble_mass(mesh, include_boundary=True)
    assert M.sum() == pytest.approx(1.0, abs=1e-13)


def test_stiffness_annihilates_constants(unit_coeff):
    mesh = build_mesh(1 / 5)
    A = assemble_stiffness(mesh, unit_coeff, include_boundary=True)
    assert np.allclose(A @ np.ones(A.shape[0]), 0.0, atol=1e-12)


def test_assembled_matrices_are_exactly_symmetric():
    mesh = build_mesh(1 / 7)
    coeff = ProblemCoefficients(a=lambda x, y: 1.0 + x * y, c=lambda x, y: 2.0 + y)
    for matrix in (mesh.mass, assemble_stiffness(mesh, coeff)):
        assert abs(matrix - matrix.T).max() == 0.0
        assert matrix.shape == (mesh.n_dof, mesh.n_dof)


def test_stiffness_rejects_nonpositive_diffusion():
    with pytest.raises(ArgumentError):
        assemble_stiffness(build_mesh(0.25), ProblemCoefficients(a=lambda x, y: x - 0.5))


def test_norms_of_sine_mode():
    mesh = build_mesh(1 / 32)
    v = FieldVector.interpolate(mesh, sine)
    assert l2_norm(v) == pytest.approx(0.5, rel=1e-2)
    assert h1_norm(v) == pytest.approx(0.5 * np.sqrt(1 + 2 * np.pi**2), rel=2e-2)
    assert hminus1_norm(v) <= l2_norm(v)
    assert hminus1_norm(v) == pytest.approx(0.5 / np.sqrt(1 + 2 * np.pi**2), rel=2e-2)


def test_zero_field_norms():
    mesh = build_mesh(0.25)
    zero = FieldVector.zeros(mesh)
    assert l2_norm(zero) == 0.0
    assert hminus1_norm(zero) == 0.0


def test_sampling_reproduces_nodal_values():
    mesh = build_mesh(1 / 8)
    v = FieldVector.interpolate(mesh, sine)
    assert np.allclose(evaluate_at_points(v, mesh.dof_coordinates), sine(*mesh.dof_coordinates.T))


def test_sampling_is_linear_inside_a_triangle():
    mesh = build_mesh(0.5)
    centre = FieldVector.basis(mesh, 0)
    assert evaluate_at_points(centre, [[0.5, 0.5]])[0] == pytest.approx(1.0)
    assert evaluate_at_points(centre, [[0.25, 0.25]])[0] == pytest.approx(0.5)
    assert evaluate_at_points(centre, [[0.0, 0.3]])[0] == 0.0
    assert evaluate_at_points(centre, [[1.0, 1.0]])[0] == 0.0


def test_sampling_rows_are_partitions_of_unity_away_from_the_boundary():
    mesh = build_mesh(1 / 8)
    points = np.array([[0.3, 0.4], [0.51, 0.77], [0.26, 0.74]])
    P = sampling_matrix(mesh, points)
    assert np.allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0)
    assert P.nnz <= 3 * points.shape[0]


def test_sampling_rejects_points_outside_the_square():
    with pytest.raises(ArgumentError):
        sampling_matrix(build_mesh(0.25), [[0.5, 1.01]])


def test_field_vector_is_read_only_and_mesh_checked():
    a = FieldVector.basis(build_mesh(0.25), 2)
    with pytest.raises(ValueError):
        a.coefficients[0] = 1.0
    with pytest.raises(ArgumentError):
        a + FieldVector.zeros(build_mesh(0.5))
    with pytest.raises(ArgumentError):
        FieldVector(build_mesh(0.25), np.zeros(4))
    assert np.allclose((2.0 * a - a).coefficients, a.coefficients)
    assert np.allclose((-a).coefficients, -a.coefficients)


def test_projection_of_a_field_onto_its_own_mesh_is_identity():
    mesh = build_mesh(1 / 8)
    v = FieldVector.interpolate(mesh, sine)
    assert np.allclose(project_l2(v, mesh).coefficients, v.coefficients, atol=1e-10)


def test_projection_from_a_nested_mesh():
    coarse = build_mesh(1 / 8)
    fine = build_mesh(1 / 16)
    projected = project_l2(FieldVector.interpolate(fine, sine), coarse)
    assert l2_norm(projected - FieldVector.interpolate(coarse, sine)) < 0.05
    with pytest.raises(ArgumentError):
        project_l2(FieldVector.zeros(build_mesh(1 / 12)), coarse)


def test_interpolant_and_projection_converge_at_second_order():
    differences = []
    for h in (1 / 16, 1 / 32):
        mesh = build_mesh(h)
        differences.append(l2_norm(FieldVector.interpolate(mesh, sine) - project_l2(sine, mesh)))
    assert 3.0 <= differences[0] / differences[1] <= 5.0


def test_problem_coefficients_validation():
    with pytest.raises(ArgumentError):
        ProblemCoefficients(a=0.0)
    with pytest.raises(ArgumentError):
        ProblemCoefficients(c=-1.0)
    with pytest.raises(ArgumentError):
        ProblemCoefficients(T=0.0)
    with pytest.raises(ArgumentError):
        ProblemCoefficients(g=lambda t: t - 0.5).signal_at([0.0, 1.0])
    assert ProblemCoefficients().has_unit_laplacian
    assert ProblemCoefficients(g=2.0).constant_signal == 2.0


def test_single_interior_node_entries(unit_coeff):
    mesh = build_mesh(0.5)
    assert mesh.n_dof == 1
    assert mesh.mass[0, 0] == pytest.approx(0.125, abs=1e-15)
    assert assemble_stiffness(mesh, unit_coeff)[0, 0] == pytest.approx(4.0, abs=1e-14)


def test_smallest_dirichlet_eigenvalue():
    mesh = build_mesh(1 / 32)
    smallest = scipy.linalg.eigh(
        mesh.unit_stiffness.toarray(), mesh.mass.toarray(), eigvals_only=True, subset_by_index=[0, 0]
    )[0]
    assert smallest == pytest.approx(2 * np.pi**2, rel=1e-2)


def test_norm_ordering_and_poincare_on_random_fields(rng):
    mesh = build_mesh(1 / 8)
    for _ in range(100):
        v = FieldVector(mesh, rng.standard_normal(mesh.n_dof))
        l2 = l2_norm(v)
        assert hminus1_norm(v) <= l2 * (1 + 1e-10)
        assert l2 <= h1_norm(v)
        gradient_squared = h1_norm(v) ** 2 - l2**2
        assert l2**2 <= gradient_squared / (2 * np.pi**2) * (1 + 1e-10)


def test_norms_are_absolutely_homogeneous(rng):
    v = FieldVector(build_mesh(1 / 8), rng.standard_normal(49))
    for norm in (l2_norm, h1_norm, hminus1_norm):
        assert norm(-3.0 * v) == pytest.approx(3.0 * norm(v), rel=1e-9)
