import numpy as np
import pytest

from qslam.errors import DataError
from qslam.geometry import Pose, backproject_depth, backproject_segment, rotation_angle, transform_point
from qslam.quadric import QuadricCoefficients, evaluate_quadric
from qslam.synth import (
    NoiseModel,
    QuadricPrimitive,
    SyntheticScene,
    boundary_mask,
    default_intrinsics,
    default_scene,
    intersect,
    perturb_depth,
    perturb_pose,
    plane,
    ray_quadric_intersect,
    render_ground_truth,
    render_sequence,
    sphere,
)

BIG = ((-10, -10, -10), (10, 10, 10))


def prim(coeffs, sid=1):
    return QuadricPrimitive(coeffs, (1, 0, 0), sid, *BIG)


def test_axis_hit():
    assert ray_quadric_intersect((0, 0, -2), (0, 0, 1), prim(sphere((0, 0, 0), 1))) == pytest.approx(1.0)


def test_inside_hits_radius(rng):
    p = prim(sphere((0, 0, 0), 1))
    for _ in range(20):
        d = rng.normal(size=3)
        assert ray_quadric_intersect((0, 0, 0), d / np.linalg.norm(d), p) == pytest.approx(1.0, abs=1e-12)


def test_double_root_plane():
    p = prim(QuadricCoefficients([0, 0, 1, 0, 0, 0], [0, 0, -4], -4.0))
    assert ray_quadric_intersect((0, 0, 0), (0, 0, 1), p) == pytest.approx(2.0, abs=1e-12)


def test_miss_and_bbox():
    p = QuadricPrimitive(sphere((0, 0, 0), 1), (1, 1, 1), 1, (-1, -1, 0.5), (1, 1, 1))
    # the front cap (z < 0.5) is cut away, so the ray hits the back side at t=3
    assert ray_quadric_intersect((0, 0, -2), (0, 0, 1), p) == pytest.approx(3.0)
    assert ray_quadric_intersect((0, 5, -2), (0, 0, 1), p) is None


def test_non_unit_direction_rejected():
    with pytest.raises(ValueError):
        ray_quadric_intersect((0, 0, 0), (0, 0, 2), prim(sphere((0, 0, 0), 1)))


def test_plane_render_exact():
    k = default_intrinsics(32)
    s = SyntheticScene([QuadricPrimitive(plane((0, 0, 1), 2.0), (0.5, 0.5, 0.5), 1, (-9, -9, 1), (9, 9, 3))])
    f = render_ground_truth(s, Pose.identity(), k)
    assert np.all(f.depth == 2.0) and np.all(f.mask == 1)


def test_empty_scene():
    f = render_ground_truth(SyntheticScene([]), Pose.identity(), default_intrinsics(16))
    assert not f.depth.any() and not f.mask.any()


@pytest.fixture(scope="module")
def scene():
    return default_scene(48)


@pytest.fixture(scope="module")
def frames(scene):
    return render_sequence(scene)


def test_rendered_points_on_surfaces(scene, frames):
    for f in frames:
        for sid in f.segment_ids():
            cloud = backproject_segment(f, sid)
            world = transform_point(f.pose, cloud.points)
            coeffs = scene.by_id(sid).coeffs
            assert np.max(np.abs(evaluate_quadric(coeffs, world))) <= 1e-9


def test_sphere_segment_points_within_tolerance(scene, frames):
    center, radius = np.array([-0.45, 0.1, 2.1]), 0.3
    f = frames[0]
    world = transform_point(f.pose, backproject_segment(f, 3).points)
    assert len(world) > 0
    assert np.max(np.abs(np.linalg.norm(world - center, axis=1) - radius)) <= 1e-6


def test_occlusion_brute_force(scene, frames):
    f = frames[2]
    k = f.intrinsics
    rng = np.random.default_rng(0)
    for v, u in zip(rng.integers(0, k.height, 200), rng.integers(0, k.width, 200)):
        d = f.pose.R @ np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
        hits = [(float(intersect(f.pose.translation, d, p)), p.semantic_id) for p in scene.primitives]
        hits = [h for h in hits if np.isfinite(h[0])]
        if not hits:
            assert f.depth[v, u] == 0 and f.mask[v, u] == 0
        else:
            t, sid = min(hits)
            assert f.depth[v, u] == t and f.mask[v, u] == sid


def test_noise_free_is_identity(frames):
    assert perturb_depth(frames[0], NoiseModel()) is frames[0]


def test_depth_noise_statistics():
    f = render_ground_truth(default_scene(128), Pose.identity(), default_intrinsics(128))
    noisy = perturb_depth(f, NoiseModel(depth_sigma=0.02, seed=11))
    interior = (f.depth > 0) & ~boundary_mask(f.mask, 1)
    diff = (noisy.depth - f.depth)[interior]
    assert diff.size >= 10_000
    assert abs(np.std(diff) - 0.02) <= 0.002


def test_edge_noise_only_on_boundaries(frames):
    f = frames[0]
    noisy = perturb_depth(f, NoiseModel(edge_blur_px=2, seed=1))
    changed = noisy.depth != f.depth
    assert not changed.any()  # sigma 0 scales the edge term away as well
    noisy = perturb_depth(f, NoiseModel(depth_sigma=0.01, edge_blur_px=2, seed=1))
    err = np.abs(noisy.depth - f.depth)
    border = boundary_mask(f.mask, 2) & (f.depth > 0)
    assert err[border].mean() > 2 * err[~border & (f.depth > 0)].mean()
    assert np.all(noisy.depth[f.depth == 0] == 0)


def test_pose_noise_distribution():
    noise = NoiseModel(pose_rot_sigma=1.0, pose_trans_sigma=0.02, seed=5)
    base = Pose.identity()
    angles = np.array([np.rad2deg(rotation_angle(perturb_pose(base, noise, i).rotation)) for i in range(1000)])
    expected = np.sqrt(2 / np.pi)
    assert abs(angles.mean() - expected) <= 0.15 * expected


def test_noise_deterministic(frames):
    n = NoiseModel(depth_sigma=0.02, edge_blur_px=1, pose_rot_sigma=1, pose_trans_sigma=0.02, seed=7)
    a, b = perturb_depth(frames[1], n), perturb_depth(frames[1], n)
    assert a.depth.tobytes() == b.depth.tobytes()
    pa, pb = perturb_pose(frames[1].pose, n, 1), perturb_pose(frames[1].pose, n, 1)
    assert pa.rotation.tobytes() == pb.rotation.tobytes()
    c = perturb_depth(frames[1], NoiseModel(depth_sigma=0.02, edge_blur_px=1, seed=8))
    assert a.depth.tobytes() != c.depth.tobytes()


def test_scene_json_round_trip(scene, tmp_path):
    path = tmp_path / "scene.json"
    scene.save(path)
    back = SyntheticScene.load(path)
    assert [p.semantic_id for p in back.primitives] == [p.semantic_id for p in scene.primitives]
    assert back.intrinsics == scene.intrinsics
    np.testing.assert_allclose(back.poses[3].matrix(), scene.poses[3].matrix(), atol=1e-15)


def test_scene_json_malformed(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"primitives": [{"cq": [1,1,1,0,0,0]}]}')
    with pytest.raises(DataError):
        SyntheticScene.load(path)


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        SyntheticScene([prim(sphere((0, 0, 0), 1), 1), prim(sphere((1, 0, 0), 1), 1)])


def test_frames_see_every_primitive(scene, frames):
    seen = set()
    for f in frames:
        seen |= set(int(s) for s in f.segment_ids())
    assert seen == {p.semantic_id for p in scene.primitives}
