import numpy as np
import pytest

from rigsim.geometry import Camera, SurfaceMesh, build_lattice_tet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def front_camera():
    """Identity extrinsic: world == camera space, looking down +z."""
    return Camera(100.0, 100.0, 128.0, 128.0, 256, 256)


@pytest.fixture
def small_camera():
    return Camera.look_at([0.0, 0.0, 3.0], [0.0, 0.0, 0.0], [0, 1, 0], 40.0, 32, 32)


@pytest.fixture
def triangle_mesh():
    """Single triangle at z=2 facing the front camera (counter-clockwise seen from it)."""
    V = np.array([[-0.5, -0.5, 2.0], [0.5, -0.5, 2.0], [0.0, 0.5, 2.0]])
    return SurfaceMesh(V, [[0, 2, 1]], [[0.9, 0.2, 0.1]])


@pytest.fixture
def beam_tet():
    return build_lattice_tet([0.0, -0.1, -0.1], [0.4, 0.1, 0.1], (2, 1, 1))
