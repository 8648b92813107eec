import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyneit.errors import GeometryError, MeshParseError, ParameterError, ValidationError
from dyneit.mesh import (
    Mesh,
    build_disk_mesh,
    interpolate,
    load_mesh,
    locate_point,
    locate_points,
    save_mesh,
    validate_mesh,
)


@pytest.mark.parametrize("target", [100, 300, 800])
def test_disk_mesh_is_valid(target):
    mesh = build_disk_mesh(target_nodes=target)
    validate_mesh(mesh)
    assert abs(mesh.n_nodes - target) <= 0.1 * target
    assert mesh.n_electrodes == 16
    assert np.all(mesh.geometry.areas > 0)
    # total area approaches pi from below (inscribed polygon)
    assert np.pi * 0.97 < mesh.geometry.areas.sum() <= np.pi


def test_electrode_coverage(small_mesh):
    lengths = small_mesh.electrode_lengths()
    assert np.allclose(lengths, lengths[0])
    assert lengths.sum() == pytest.approx(0.5 * 2 * np.pi, rel=0.02)


def test_hat_gradients_sum_to_zero(small_mesh):
    g = small_mesh.geometry.grads
    assert np.abs(g.sum(axis=1)).max() < 1e-10


def test_gradients_reproduce_linear_fields(small_mesh):
    f = 2.0 * small_mesh.nodes[:, 0] - 3.0 * small_mesh.nodes[:, 1]
    grad = np.einsum("mad,ma->md", small_mesh.geometry.grads, f[small_mesh.triangles])
    assert np.allclose(grad, [2.0, -3.0])


def test_degenerate_element_rejected(square_mesh):
    nodes = square_mesh.nodes.copy()
    nodes[2] = [0.5, 0.0]
    bad = Mesh(nodes, square_mesh.triangles, square_mesh.boundary_edges, square_mesh.electrodes,
               square_mesh.contact_impedances)
    with pytest.raises((GeometryError, ValidationError)):
        validate_mesh(bad)


def test_overlapping_electrodes_rejected(square_mesh):
    m = Mesh(square_mesh.nodes, square_mesh.triangles, square_mesh.boundary_edges,
             (np.array([[0, 1]]), np.array([[1, 0]])), np.array([1.0, 1.0]))
    with pytest.raises(ValidationError, match="overlap"):
        validate_mesh(m)


def test_electrode_off_boundary_rejected(square_mesh):
    m = Mesh(square_mesh.nodes, square_mesh.triangles, square_mesh.boundary_edges,
             (np.array([[0, 2]]),), np.array([1.0]))
    with pytest.raises(ValidationError):
        validate_mesh(m)


def test_bad_builder_arguments():
    with pytest.raises(ParameterError):
        build_disk_mesh(target_nodes=3)
    with pytest.raises(ParameterError):
        build_disk_mesh(electrode_coverage=1.5)


def test_roundtrip(tmp_path, small_mesh):
    p = tmp_path / "m.txt"
    save_mesh(small_mesh, p)
    back = load_mesh(p)
    assert back == small_mesh


def test_parse_error_reports_line(tmp_path, square_mesh):
    p = tmp_path / "m.txt"
    save_mesh(square_mesh, p)
    lines = p.read_text().splitlines()
    lines[3] = "1 0.5"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(MeshParseError, match="line 4"):
        load_mesh(p)


def test_scaled_mesh(small_mesh):
    big = small_mesh.scaled(2.0)
    assert np.allclose(big.geometry.areas, 4 * small_mesh.geometry.areas)
    assert big.edge_length() == pytest.approx(2 * small_mesh.edge_length())


def test_locate_outside_and_nodes(small_mesh):
    assert locate_point(small_mesh, [2.0, 0.0]) is None
    elems, w = locate_points(small_mesh, small_mesh.nodes)
    assert np.all(elems >= 0)
    assert np.allclose(w.sum(axis=1), 1.0)


@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_interpolation_exact_for_linear(px, py, a, b, c):
    mesh = _mesh300()
    if px * px + py * py > 0.8:
        return
    f = a + b * mesh.nodes[:, 0] + c * mesh.nodes[:, 1]
    val = interpolate(mesh, f, np.array([[px, py]]))[0]
    assert val == pytest.approx(a + b * px + c * py, abs=1e-9)


def test_interpolation_fallback(small_mesh):
    f = np.ones(small_mesh.n_nodes)
    out = interpolate(small_mesh, f, np.array([[5.0, 5.0], [0.0, 0.0]]), fallback=[7.0, 0.0])
    assert out[0] == 7.0 and out[1] == pytest.approx(1.0)
    assert np.isnan(interpolate(small_mesh, f, np.array([[5.0, 5.0]]))[0])


_CACHE = {}


def _mesh300():
    if "m" not in _CACHE:
        _CACHE["m"] = build_disk_mesh(target_nodes=300)
    return _CACHE["m"]
