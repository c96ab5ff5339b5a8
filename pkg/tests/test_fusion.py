import numpy as np
import pytest

from qslam.errors import DataError, InvalidInputError
from qslam.fusion import (TriangleMesh, TsdfVolume, depth_map_mesh, marching_cubes, read_ply,
                          tsdf_integrate, write_ply)
from qslam.geometry import CameraIntrinsics, Pose


@pytest.fixture
def cam():
    return CameraIntrinsics(40.0, 40.0, 19.5, 19.5, 40, 40)


def plane_frame(cam, z=1.0):
    return np.full((cam.height, cam.width), z)


def voxel_index(vol, p):
    return tuple(np.round((np.asarray(p) - vol.origin) / vol.voxel_size).astype(int))


def test_plane_sign_convention(cam):
    vol = TsdfVolume((-0.1, -0.1, 0.8), 0.01, (21, 21, 31), truncation=0.05)
    tsdf_integrate(vol, plane_frame(cam), cam, Pose.identity())
    assert abs(vol.tsdf[voxel_index(vol, (0, 0, 1.0))]) < 1e-9
    assert vol.tsdf[voxel_index(vol, (0, 0, 0.95))] == pytest.approx(1.0)
    assert vol.tsdf[voxel_index(vol, (0, 0, 0.8))] == pytest.approx(1.0)  # clamped
    assert vol.tsdf[voxel_index(vol, (0, 0, 1.03))] == pytest.approx(-0.6)
    # beyond one truncation behind the surface nothing is observed
    assert vol.weight[voxel_index(vol, (0, 0, 1.1))] == 0


def test_empty_depth_leaves_volume_unchanged(cam):
    vol = TsdfVolume((-0.1, -0.1, 0.8), 0.01, (21, 21, 31))
    tsdf_integrate(vol, np.zeros((cam.height, cam.width)), cam, Pose.identity())
    assert np.all(vol.tsdf == 1.0) and np.all(vol.weight == 0.0)


def test_integrating_twice_is_a_fixed_point(cam):
    vol = TsdfVolume((-0.1, -0.1, 0.8), 0.01, (21, 21, 31))
    depth = 1.0 + 0.05 * np.random.default_rng(0).uniform(size=(cam.height, cam.width))
    tsdf_integrate(vol, depth, cam, Pose.identity())
    t1, w1 = vol.tsdf.copy(), vol.weight.copy()
    tsdf_integrate(vol, depth, cam, Pose.identity())
    np.testing.assert_allclose(vol.tsdf, t1, atol=1e-12)
    np.testing.assert_array_equal(vol.weight, 2 * w1)


def test_order_independent(cam):
    rng = np.random.default_rng(1)
    depths = [1.0 + 0.05 * rng.uniform(size=(cam.height, cam.width)) for _ in range(3)]
    vols = []
    for order in ([0, 1, 2], [2, 0, 1]):
        vol = TsdfVolume((-0.1, -0.1, 0.8), 0.01, (21, 21, 31))
        for i in order:
            tsdf_integrate(vol, depths[i], cam, Pose.identity())
        vols.append(vol)
    np.testing.assert_allclose(vols[0].tsdf, vols[1].tsdf, atol=1e-9)
    np.testing.assert_array_equal(vols[0].weight, vols[1].weight)


def test_tsdf_bounded_and_weight_monotone(cam):
    vol = TsdfVolume((-0.2, -0.2, 0.6), 0.02, (21, 21, 31))
    rng = np.random.default_rng(2)
    prev = vol.weight.copy()
    for _ in range(3):
        depth = 0.7 + rng.uniform(size=(cam.height, cam.width))
        depth[rng.uniform(size=depth.shape) < 0.2] = 0.0
        tsdf_integrate(vol, depth, cam, Pose.identity(), color=rng.uniform(size=(cam.height, cam.width, 3)))
        assert np.all(np.abs(vol.tsdf) <= 1.0)
        assert np.all(vol.weight >= prev)
        prev = vol.weight.copy()


def test_volume_validation():
    with pytest.raises(InvalidInputError):
        TsdfVolume((0, 0, 0), 0.01, (10, 10, 10), truncation=0.005)
    with pytest.raises(InvalidInputError):
        TsdfVolume((0, 0, 0), 0.0, (10, 10, 10))


def analytic_volume(sdf_fn, lo, hi, voxel=0.01):
    vol = TsdfVolume.around(lo, hi, voxel)
    vol.tsdf = np.clip(sdf_fn(vol.voxel_centers()) / vol.truncation, -1, 1)
    vol.weight[:] = 1.0
    return vol


def test_sphere_sdf_mesh_radius():
    vol = analytic_volume(lambda p: 0.5 - np.linalg.norm(p, axis=-1), (-0.5,) * 3, (0.5,) * 3)
    mesh = marching_cubes(vol)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert len(mesh) > 1000
    assert np.all(np.abs(r - 0.5) <= vol.voxel_size)


def test_plane_mesh_normal():
    n = np.array([0.2, -0.3, 1.0])
    n /= np.linalg.norm(n)
    vol = analytic_volume(lambda p: 0.1 - p @ n, (-0.3,) * 3, (0.3,) * 3)
    mesh = marching_cubes(vol)
    v = mesh.vertices
    c = v.mean(axis=0)
    normal = np.linalg.svd(v - c)[2][-1]
    angle = np.degrees(np.arccos(min(1.0, abs(normal @ n))))
    assert angle < 2.0
    assert np.max(np.abs((v - c) @ normal)) <= vol.voxel_size


def test_all_positive_volume_gives_empty_mesh():
    vol = TsdfVolume((0, 0, 0), 0.1, (5, 5, 5))
    vol.weight[:] = 1.0
    assert len(marching_cubes(vol)) == 0
    assert len(marching_cubes(TsdfVolume((0, 0, 0), 0.1, (5, 5, 5)))) == 0


def test_depth_map_mesh_plane(cam):
    depth = plane_frame(cam, 2.0)
    depth[:5] = 0.0
    mesh = depth_map_mesh(depth, cam, Pose.identity())
    np.testing.assert_allclose(mesh.vertices[:, 2], 2.0)
    assert len(mesh) == 2 * 34 * 39
    mask = np.zeros(depth.shape, dtype=int)
    mask[:, 20:] = 1
    assert len(depth_map_mesh(depth, cam, Pose.identity(), mask)) == 2 * 34 * 38


def test_mesh_validation():
    with pytest.raises(InvalidInputError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(InvalidInputError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 2]], colors=np.zeros((2, 3)))
    degenerate = TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], [[0, 1, 2], [0, 1, 3]])
    assert len(degenerate.without_degenerate()) == 1


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    mesh = TriangleMesh(rng.uniform(size=(10, 3)), rng.integers(0, 10, size=(6, 3)), rng.uniform(size=(10, 3)))
    write_ply(tmp_path / "a.ply", mesh)
    back = read_ply(tmp_path / "a.ply")
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_allclose(back.colors, mesh.colors, atol=1 / 255)
    write_ply(tmp_path / "b.ply", mesh)
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_read_ply_rejects_garbage(tmp_path):
    (tmp_path / "x.ply").write_text("hello\nend_header\n")
    with pytest.raises(DataError):
        read_ply(tmp_path / "x.ply")
    (tmp_path / "y.ply").write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"
                                    "property float y\nproperty float z\nend_header\n1 2 3\n")
    with pytest.raises(DataError):
        read_ply(tmp_path / "y.ply")
