import numpy as np
import pytest
from hypothesis import given, strategies as st

from physrefine.inertia import (BodyParams, DegenerateMeshError, MeshTopologyError, TriangleMesh, box_mesh,
                                icosphere, mesh_mass_properties, mesh_volume, read_obj, read_part_weights,
                                segment_parts, tetrahedron_mesh, write_obj)
from physrefine.kinematics import so3_exp


def test_unit_cube_volume():
    assert mesh_volume(box_mesh()) == 1.0


def test_regular_tetrahedron_volume():
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / (2 * np.sqrt(2))
    np.testing.assert_allclose(mesh_volume(tetrahedron_mesh(v)), np.sqrt(2) / 12, atol=1e-9)


def test_inward_cube_negative():
    assert mesh_volume(box_mesh().flipped()) == -1.0
    with pytest.raises(DegenerateMeshError):
        mesh_mass_properties(box_mesh().flipped())


def test_unit_cube_mass_properties():
    p = mesh_mass_properties(box_mesh(), density=1000.0)
    np.testing.assert_allclose(p.mass, 1000.0, rtol=1e-12)
    np.testing.assert_allclose(p.com, [0.5, 0.5, 0.5], rtol=1e-12)
    np.testing.assert_allclose(p.inertia, np.eye(3) * 1000 / 6, rtol=1e-6, atol=1e-9)


def test_box_inertia_formula():
    a, b, c = 0.3, 0.5, 0.7
    p = mesh_mass_properties(box_mesh((a, b, c), (1, -2, 0.5)), density=900.0)
    m = 900 * a * b * c
    np.testing.assert_allclose(np.diag(p.inertia), m / 12 * np.array([b**2 + c**2, a**2 + c**2, a**2 + b**2]),
                               rtol=1e-9)


def test_icosphere_inertia():
    r = 0.3
    p = mesh_mass_properties(icosphere(r, 4))
    np.testing.assert_allclose(np.diag(p.inertia), 0.4 * p.mass * r * r, rtol=0.01)
    np.testing.assert_allclose(p.com, 0, atol=1e-12)


@given(st.tuples(*[st.floats(-5, 5)] * 3))
def test_translation_invariance(c):
    base = mesh_mass_properties(box_mesh((0.2, 0.4, 0.3)))
    moved = mesh_mass_properties(box_mesh((0.2, 0.4, 0.3)).translated(c))
    np.testing.assert_allclose(moved.com, base.com + c, atol=1e-9)
    np.testing.assert_allclose(moved.inertia, base.inertia, atol=1e-9 * max(1, np.abs(c).max() ** 2))


@given(st.tuples(*[st.floats(-3, 3)] * 3))
def test_rotation_covariance(rv):
    R = so3_exp(np.array(rv))
    mesh = box_mesh((0.2, 0.5, 0.3), (0.1, -0.2, 0.05))
    base = mesh_mass_properties(mesh)
    rot = mesh_mass_properties(mesh.transformed(R))
    np.testing.assert_allclose(rot.inertia, R @ base.inertia @ R.T, atol=1e-8 * np.abs(base.inertia).max())


def test_volume_additivity():
    halves = mesh_volume(box_mesh((0.5, 1, 1))) + mesh_volume(box_mesh((0.5, 1, 1), (0.5, 0, 0)))
    np.testing.assert_allclose(halves, mesh_volume(box_mesh()), atol=1e-9)


def test_inertia_positive_and_triangle(rng):
    for _ in range(10):
        mesh = box_mesh(rng.uniform(0.05, 1, 3), rng.normal(size=3)).transformed(so3_exp(rng.normal(size=3)))
        ev = np.linalg.eigvalsh(mesh_mass_properties(mesh).inertia)
        assert ev[0] > 0 and ev[0] + ev[1] >= ev[2] * (1 - 1e-9)


def test_open_mesh_rejected():
    cube = box_mesh()
    with pytest.raises(MeshTopologyError):
        mesh_volume(TriangleMesh(cube.vertices, cube.faces[:-1]))


def test_bodyparams_validation():
    with pytest.raises(ValueError):
        BodyParams(0.0, np.zeros(3), np.eye(3))
    with pytest.raises(ValueError):
        BodyParams(1.0, np.zeros(3), np.diag([1.0, 1.0, 3.0]))


def test_segment_one_hot():
    mesh = box_mesh()
    w = np.eye(3)[[0, 1, 2, 2, 1, 0, 0, 1]]
    parts = segment_parts(mesh, w)
    for k, idx in enumerate(parts):
        np.testing.assert_array_equal(idx, np.flatnonzero(w[:, k] == 1))


def test_segment_uniform_ties_go_to_first():
    parts = segment_parts(box_mesh(), np.full((8, 4), 0.25))
    assert len(parts[0]) == 8 and all(len(p) == 0 for p in parts[1:])


def test_segment_matches_rowwise_scan(rng):
    w = rng.dirichlet(np.ones(5), size=8)
    parts = segment_parts(box_mesh(), w)
    for v in range(8):
        best = 0
        for k in range(5):
            if w[v, k] > w[v, best]:
                best = k
        assert v in parts[best]


def test_segment_shape_mismatch():
    with pytest.raises(ValueError):
        segment_parts(box_mesh(), np.ones((3, 2)) / 2)


def test_obj_and_weights_io(tmp_path):
    mesh = icosphere(0.1, 1)
    write_obj(mesh, tmp_path / "m.obj")
    back = read_obj(tmp_path / "m.obj")
    np.testing.assert_array_equal(back.faces, mesh.faces)
    np.testing.assert_allclose(back.vertices, mesh.vertices)
    np.savetxt(tmp_path / "w.csv", np.full((4, 2), 0.5), delimiter=",")
    assert read_part_weights(tmp_path / "w.csv").shape == (4, 2)
