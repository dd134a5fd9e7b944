import numpy as np
import pytest

from gradsdf import FusionParams, Intrinsics
from gradsdf.synthetic import SphereScene, fuse_scene, look_at_pose

TEST_INTR = Intrinsics(fx=160.0, fy=160.0, cx=79.5, cy=59.5, width=160, height=120)

SPHERE_CENTER = np.array([0.05, -0.02, 0.04])
SPHERE_RADIUS = 0.3


def fibonacci_poses(center, n, radius):
    """Quasi-uniform inward-looking viewpoints on a full sphere."""
    phi = (1 + 5**0.5) / 2
    poses = []
    for k in range(n):
        zf = 1 - 2 * (k + 0.5) / n
        rho = np.sqrt(1 - zf * zf)
        az = 2 * np.pi * k / phi
        eye = center + radius * np.array([rho * np.cos(az), rho * np.sin(az), zf])
        up = (0, 0, 1) if abs(zf) < 0.9 else (0, 1, 0)
        poses.append(look_at_pose(eye, center, up))
    return poses


def single_sphere_scene(n_frames=100, noise=False, seed=3):
    poses = fibonacci_poses(SPHERE_CENTER, n_frames, 1.1)
    return SphereScene([(SPHERE_CENTER, SPHERE_RADIUS)], poses, noise, seed)


def oracle_fusion_params(voxel_size=0.02):
    """Well-conditioned fusion for analytic-oracle scenes.

    The projective per-ray distance picks up (lateral offset) x tan(incidence)
    error, so oracle fixtures restrict incidence to 30 degrees and rays to
    pixel-footprint distance from the voxel center; pipeline defaults stay at
    the standard 75 degrees / half-voxel.
    """
    return FusionParams(voxel_size=voxel_size, trunc_factor=5.0,
                        normal_angle_max=30.0, max_ray_offset=0.004)


@pytest.fixture(scope="session")
def sphere_scene():
    return single_sphere_scene()


@pytest.fixture(scope="session")
def sphere_volume(sphere_scene):
    """Noise-free single sphere fused from 100 full-sphere views at 2 cm voxels."""
    return fuse_scene(sphere_scene, TEST_INTR, oracle_fusion_params(0.02)), sphere_scene


@pytest.fixture(scope="session")
def fine_sphere_volume(sphere_scene):
    """Same sphere at 1 cm voxels (used by extraction tests)."""
    return fuse_scene(sphere_scene, TEST_INTR, oracle_fusion_params(0.01)), sphere_scene


def three_sphere_scene(n_frames=60, noise=False, seed=11):
    """Asymmetric scene: three spheres fully constrain a 6-DOF pose
    (a single sphere leaves rotations about its center unobservable)."""
    spheres = [(np.array([0.0, 0.0, 0.0]), 0.22),
               (np.array([0.45, 0.1, -0.05]), 0.16),
               (np.array([-0.15, 0.42, 0.12]), 0.13)]
    centroid = np.mean([c for c, _ in spheres], axis=0)
    poses = fibonacci_poses(centroid, n_frames, 1.4)
    return SphereScene(spheres, poses, noise, seed)


@pytest.fixture(scope="session")
def multi_sphere_volume():
    scene = three_sphere_scene()
    return fuse_scene(scene, TEST_INTR, oracle_fusion_params(0.02)), scene
