import numpy as np
import pytest

from irps.core import ImageStack, LightSet, NormalMap
from irps.forwardsim import SceneSpec, simulate
from irps.io import write_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def disk_mask():
    """Centred disk on an odd grid so the centre is a pixel"""
    rows, cols = np.mgrid[0:17, 0:17]
    return (rows - 8) ** 2 + (cols - 8) ** 2 < 7 ** 2


@pytest.fixture(scope="session")
def lambertian_sphere():
    """Convex Lambertian scene without shadows or highlights"""
    spec = SceneSpec(primitive="sphere", resolution=33, specular=0.0, interreflection=False,
                     lights=10, slant_min=10.0, slant_max=30.0)
    return simulate(spec)


@pytest.fixture(scope="session")
def small_bowl():
    """Concave bowl with interreflection and highlights at desk scale"""
    spec = SceneSpec(primitive="concave-bowl", resolution=24, albedo=0.8, specular=0.3,
                     interreflection=True, lights=8)
    return simulate(spec)


@pytest.fixture
def mini_stack(rng):
    """Tilted plane under four lights, single channel"""
    mask = np.zeros((8, 8), dtype=bool)
    mask[1:7, 1:7] = True
    normals = NormalMap.constant((0.2, -0.1, 1.0), mask)
    lights = LightSet.from_vectors(
        np.array([[0.3, 0.1, 1.0], [-0.4, 0.2, 1.0], [0.1, -0.5, 1.0], [0.0, 0.0, 1.0]]),
        np.array([1.0, 0.8, 1.2, 1.0]),
    )
    shading = np.maximum(np.einsum("hwk,nk->nhw", normals.normals, lights.scaled()), 0.0)
    images = 0.6 * shading[..., None] * mask[None, ..., None]
    return ImageStack(images, mask), lights, normals


@pytest.fixture
def sphere_dataset(tmp_path, lambertian_sphere):
    stack, lights, scene = lambertian_sphere
    root = tmp_path / "sphere"
    write_dataset(root, stack, lights, scene.normals)
    return root
