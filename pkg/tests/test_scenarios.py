import numpy as np
import pytest

from dyneit.cem_forward import forward_currents
from dyneit.errors import ParameterError, ValidationError
from dyneit.scenarios import (
    InverseCrimeWarning,
    ScenarioConfig,
    builtin_configs,
    frame_rng,
    inclusions_at,
    load_config,
    phantom_at,
    save_config,
    simulate_frame,
    write_truth_csv,
)


def test_builtin_presets():
    cfgs = builtin_configs()
    for kind in ("Baseline", "CircularMotion", "HaltingMotion", "DisappearingInclusions"):
        assert cfgs[kind].recon_nodes == 2917 and cfgs[kind].sim_nodes == 5039
        assert cfgs[f"desk-{kind}"].recon_nodes == 800
    assert cfgs["Baseline"].frames == 400
    assert cfgs["CircularMotion"].frames == 2000


def test_baseline_endpoints():
    cfg = ScenarioConfig(kind="Baseline", frames=400)
    assert np.allclose(inclusions_at(cfg, 0)[0][0], [-0.6, 0.0])
    assert np.allclose(inclusions_at(cfg, 399)[0][0], [0.6, 0.0])
    assert inclusions_at(cfg, 10)[0][1] == pytest.approx(0.2)


def test_circular_period():
    cfg = ScenarioConfig(kind="CircularMotion", frames=2000)
    assert np.allclose(inclusions_at(cfg, 0)[0][0], [0.5, 0.0])
    assert np.allclose(inclusions_at(cfg, 500)[0][0], [0.0, 0.5], atol=1e-12)


def test_halting_motion_stops():
    cfg = ScenarioConfig(kind="HaltingMotion", frames=2000)

    def speed(k):
        return np.linalg.norm(inclusions_at(cfg, k + 1)[0][0] - inclusions_at(cfg, k)[0][0])

    assert speed(999) < 1e-4 and speed(0) < 1e-4
    assert speed(500) > 10 * speed(995)
    assert np.allclose(inclusions_at(cfg, 1000)[0][0], [-0.5, 0.0], atol=1e-12)


def test_disappearing_counts():
    cfg = builtin_configs()["desk-DisappearingInclusions"]
    assert len(inclusions_at(cfg, 100)) == 2
    assert len(inclusions_at(cfg, 700)) == 1
    assert len(inclusions_at(cfg, 1200)) == 0
    assert len(inclusions_at(cfg, 1600)) == 2
    assert inclusions_at(cfg, 100)[0][1] == pytest.approx(0.15)


def test_phantom_values(small_mesh):
    cfg = ScenarioConfig(kind="Baseline", frames=10)
    x = phantom_at(cfg, 0, small_mesh)
    assert set(np.unique(x)) <= {1.0, 1e-4}
    inside = np.linalg.norm(small_mesh.nodes - [-0.6, 0], axis=1) <= 0.2
    assert np.all(x[inside] == 1e-4) and np.all(x[~inside] == 1.0)


def test_noise_is_deterministic_and_relative(small_mesh):
    cfg = ScenarioConfig(kind="Baseline", frames=5, seed=7)
    a = simulate_frame(cfg, 2, small_mesh)
    b = simulate_frame(cfg, 2, small_mesh)
    assert np.array_equal(a.values, b.values)
    clean = simulate_frame(cfg.replace(noise_rel=0.0), 2, small_mesh)
    rel = np.abs(a.values - clean.values) / np.abs(clean.values)
    assert rel.max() < 6e-4
    assert not np.array_equal(simulate_frame(cfg, 3, small_mesh).values,
                              simulate_frame(cfg.replace(noise_rel=0.0), 3, small_mesh).values)


def test_frame_rng_independent_streams():
    a = frame_rng(1, 0).standard_normal(5)
    assert np.array_equal(a, frame_rng(1, 0).standard_normal(5))
    assert not np.array_equal(a, frame_rng(1, 1).standard_normal(5))
    assert not np.array_equal(a, frame_rng(2, 0).standard_normal(5))


def test_inverse_crime_warning(small_mesh, tiny_mesh):
    cfg = ScenarioConfig(kind="Baseline", frames=2)
    with pytest.warns(InverseCrimeWarning):
        simulate_frame(cfg, 0, small_mesh, recon_mesh=small_mesh)
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("error", InverseCrimeWarning)
        simulate_frame(cfg, 0, small_mesh, recon_mesh=tiny_mesh)


def test_config_validation_and_roundtrip(tmp_path):
    with pytest.raises(ParameterError):
        ScenarioConfig(kind="Spiral")
    with pytest.raises(ParameterError):
        ScenarioConfig(x_incl=0.0)
    with pytest.raises(ParameterError):
        inclusions_at(ScenarioConfig(frames=3), 5)
    cfg = ScenarioConfig(kind="HaltingMotion", frames=12, seed=3, name="h")
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    with pytest.raises(ValidationError):
        ScenarioConfig.from_dict({"kind": "Baseline", "speed": 2})


def test_truth_csv(tmp_path, tiny_mesh):
    cfg = ScenarioConfig(frames=4)
    write_truth_csv(cfg, tiny_mesh, range(4), tmp_path / "t.csv")
    data = np.loadtxt(tmp_path / "t.csv", delimiter=",", skiprows=1)
    assert data.shape == (4, tiny_mesh.n_nodes + 1)
    assert np.array_equal(data[2, 1:], phantom_at(cfg, 2, tiny_mesh))


def test_measurements_use_all_patterns(small_mesh):
    cfg = ScenarioConfig(frames=2, noise_rel=0.0)
    f = simulate_frame(cfg, 0, small_mesh)
    I, mask = forward_currents(small_mesh, phantom_at(cfg, 0, small_mesh))
    assert np.allclose(f.values, 200 * I.T[mask])
