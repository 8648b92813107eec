import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dyneit.mesh import Mesh, build_disk_mesh

settings.register_profile("dyneit", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("dyneit")


@pytest.fixture(scope="session")
def small_mesh():
    return build_disk_mesh(target_nodes=300)


@pytest.fixture(scope="session")
def tiny_mesh():
    return build_disk_mesh(target_nodes=120)


@pytest.fixture(scope="session")
def desk_mesh():
    return build_disk_mesh(target_nodes=800)


@pytest.fixture
def square_mesh():
    """Unit square, two right triangles, electrodes on the bottom and top edges."""
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2], [0, 2, 3]])
    bnd = np.array([[0, 1], [1, 2], [2, 3], [3, 0]])
    electrodes = (np.array([[0, 1]]), np.array([[2, 3]]))
    return Mesh(nodes, tris, bnd, electrodes, np.array([0.5, 0.25]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
