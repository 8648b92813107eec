import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyneit.cem_forward import (
    PRECISION_SCALE,
    ConductivityField,
    ExcitationPattern,
    MeasurementFrame,
    assemble_system,
    cem_model,
    forward_currents,
    forward_map,
    read_frames_csv,
    reciprocity_check,
    single_electrode_patterns,
    solve_cem,
    write_frames_csv,
)
from dyneit.errors import PreconditionError, ValidationError
from dyneit.mesh import Mesh

# unit-square stiffness for unit conductivity, assembled by hand
SQUARE_STIFFNESS = np.array([
    [1.0, -0.5, 0.0, -0.5],
    [-0.5, 1.0, -0.5, 0.0],
    [0.0, -0.5, 1.0, -0.5],
    [-0.5, 0.0, -0.5, 1.0],
])


def test_hand_assembled_stiffness(square_mesh):
    A = assemble_system(square_mesh, np.ones(4), with_electrodes=False).toarray()
    assert np.allclose(A, SQUARE_STIFFNESS, atol=1e-15)


def test_stiffness_uses_element_means(square_mesh):
    x = np.array([1.0, 2.0, 3.0, 4.0])
    m1, m2 = x[[0, 1, 2]].mean(), x[[0, 2, 3]].mean()
    K1 = np.zeros((4, 4))
    K1[np.ix_([0, 1, 2], [0, 1, 2])] = 0.5 * np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    K2 = np.zeros((4, 4))
    K2[np.ix_([0, 2, 3], [0, 2, 3])] = 0.5 * np.array([[1, 0, -1], [0, 1, -1], [-1, -1, 2]])
    A = assemble_system(square_mesh, x, with_electrodes=False).toarray()
    assert np.allclose(A, m1 * K1 + m2 * K2, atol=1e-14)


def test_robin_terms(square_mesh):
    A = assemble_system(square_mesh, np.ones(4)).toarray()
    R = np.zeros((4, 4))
    edge_mass = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    R[np.ix_([0, 1], [0, 1])] += edge_mass / 0.5
    R[np.ix_([2, 3], [2, 3])] += edge_mass / 0.25
    assert np.allclose(A, SQUARE_STIFFNESS + R, atol=1e-14)


def test_constant_potential_gives_no_current(small_mesh):
    U = np.full(16, 3.0)
    sol = solve_cem(small_mesh, np.ones(small_mesh.n_nodes), ExcitationPattern(U, 0))
    assert np.allclose(sol.u, 3.0, atol=1e-10)
    assert np.abs(sol.I).max() < 1e-9


def test_single_electrode_mesh_conserves_current():
    mesh = Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]),
                np.array([[0, 1], [1, 2], [2, 0]]), (np.array([[0, 1]]),), np.array([0.1]))
    sol = solve_cem(mesh, np.ones(3), ExcitationPattern(np.array([1.0]), 0))
    assert np.allclose(sol.u, 1.0)
    assert abs(sol.I[0]) < 1e-12


@given(st.integers(0, 2**31))
def test_currents_sum_to_zero(seed):
    mesh = _mesh()
    rng = np.random.default_rng(seed)
    x = 10.0 ** rng.uniform(-2, 2, mesh.n_nodes)
    I, _ = forward_currents(mesh, x)
    assert np.all(np.abs(I.sum(axis=0)) <= 1e-9 * np.abs(I).max(axis=0))


def test_reciprocity(small_mesh, rng):
    x = 1.0 + rng.random(small_mesh.n_nodes)
    assert reciprocity_check(small_mesh, x) < 1e-10


def test_measurement_layout(small_mesh):
    x = np.ones(small_mesh.n_nodes)
    I, mask = forward_currents(small_mesh, x)
    frame = forward_map(small_mesh, x)
    assert len(frame) == 16 * 15
    # pattern-major, skipping the driven electrode
    assert frame.values[0] == pytest.approx(PRECISION_SCALE * I[1, 0])
    assert frame.values[15] == pytest.approx(PRECISION_SCALE * I[0, 1])
    assert frame.values[16] == pytest.approx(PRECISION_SCALE * I[2, 1])


def test_current_sign_convention(small_mesh):
    # I = (c . u - U |e|) / zeta: negative on the driven electrode
    I, _ = forward_currents(small_mesh, np.ones(small_mesh.n_nodes))
    assert np.all(np.diag(I) < 0)
    off = I[~np.eye(16, dtype=bool)]
    assert np.all(off > 0)


def test_higher_conductivity_draws_more_current(small_mesh):
    I1, _ = forward_currents(small_mesh, np.ones(small_mesh.n_nodes))
    I2, _ = forward_currents(small_mesh, 2 * np.ones(small_mesh.n_nodes))
    assert np.all(np.abs(np.diag(I2)) > np.abs(np.diag(I1)))


def test_below_minimum_rejected(small_mesh):
    x = np.ones(small_mesh.n_nodes)
    x[0] = 1e-9
    with pytest.raises(PreconditionError):
        forward_map(small_mesh, x)


def test_conductivity_field_checks():
    with pytest.raises(ValidationError):
        ConductivityField(np.array([1e6]))
    f = ConductivityField(np.array([1.0, 2.0]))
    assert np.asarray(f).sum() == 3.0


def test_factorization_cache_reuses(small_mesh):
    model = cem_model(small_mesh)
    x = np.ones(small_mesh.n_nodes) * 1.5
    assert model.factor(x) is model.factor(x.copy())


def test_patterns():
    pats = single_electrode_patterns(4)
    assert [p.excited for p in pats] == [0, 1, 2, 3]
    assert np.array_equal(pats[2].U, [0, 0, 1, 0])


def test_frames_csv_roundtrip(tmp_path, small_mesh):
    frames = [forward_map(small_mesh, np.ones(small_mesh.n_nodes) * s, frame=k) for k, s in enumerate((1.0, 2.0))]
    write_frames_csv(frames, tmp_path / "f.csv")
    back = read_frames_csv(tmp_path / "f.csv")
    assert [f.frame for f in back] == [0, 1]
    assert all(np.array_equal(a.values, b.values) for a, b in zip(frames, back))
    assert isinstance(back[0], MeasurementFrame)


_M = {}


def _mesh():
    if "m" not in _M:
        from dyneit.mesh import build_disk_mesh

        _M["m"] = build_disk_mesh(target_nodes=200)
    return _M["m"]
