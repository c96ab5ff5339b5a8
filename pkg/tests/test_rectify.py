import numpy as np
import pytest

from qslam.geometry import CameraIntrinsics, Frame, Pose, backproject_depth
from qslam.quadric import GateConfig, QuadricCoefficients, evaluate_quadric, fit_quadric, refine_quadric
from qslam.rectify import (
    FIXED_XY,
    RAY,
    RectifyConfig,
    coefficient_of_determination,
    depth_polynomial,
    nearest_root,
    rectify_frame,
    solve_depth,
)
from qslam.synth import NoiseModel, curved_scene, perturb_depth, render_sequence

PLANE_Z2_SQUARED = QuadricCoefficients([0, 0, 1, 0, 0, 0], [0, 0, -4], -4.0)
UNIT_SPHERE = QuadricCoefficients([1, 1, 1, 0, 0, 0], [0, 0, 0], 1.0)
LOOSE = GateConfig(tau_eps=1e-3)


@pytest.mark.parametrize("mode", [FIXED_XY, RAY])
def test_double_root(k100, mode):
    assert solve_depth(PLANE_Z2_SQUARED, 50, 50, k100, 2.05, mode) == pytest.approx(2.0, abs=1e-12)


def test_linear_branch():
    z, ok = nearest_root(0.0, 2.0, -4.0, 1.9)
    assert z == 2.0 and ok


@pytest.mark.parametrize("mode", [FIXED_XY, RAY])
def test_unit_sphere_principal_pixel(k100, mode):
    assert solve_depth(UNIT_SPHERE, 50, 50, k100, 0.97, mode) == pytest.approx(1.0, abs=1e-12)


def test_fallbacks():
    # no real root, degenerate linear system, and a root beyond the 20% cap
    assert nearest_root(1.0, 0.0, 1.0, 1.5) == (1.5, False)
    assert nearest_root(0.0, 0.0, 1.0, 1.5) == (1.5, False)
    z, ok = nearest_root(0.0, 1.0, -3.0, 2.0)
    assert z == 2.0 and not ok
    z, ok = nearest_root(0.0, 1.0, -3.0, 2.0, max_rel_change=0.6)
    assert z == 3.0 and ok


def test_ray_mode_point_lies_on_surface(k100, rng):
    s = QuadricCoefficients([1, 1, 1, 0, 0, 0], [0, 0, -4], -3.0)  # sphere radius 1 around (0,0,2)
    for _ in range(50):
        u, v = rng.uniform(40, 60), rng.uniform(40, 60)
        A, B, C0 = depth_polynomial(s, u, v, k100, 1.1, RAY)
        z, ok = nearest_root(A, B, C0, 1.1)
        if ok:
            p = z * np.array([(u - k100.cx) / k100.fx, (v - k100.cy) / k100.fy, 1.0])
            assert abs(evaluate_quadric(s, p)) <= 1e-9


def test_r2_examples():
    assert coefficient_of_determination([1, 2, 3], [1, 2, 3]) == 1.0
    assert coefficient_of_determination([1, 2, 3], [2, 2, 2]) == 0.0
    assert coefficient_of_determination([2, 2], [2, 2]) == 1.0
    assert coefficient_of_determination([2, 2], [2, 3]) == 0.0


def test_frame_without_segments(k100):
    f = Frame(np.zeros((100, 200, 3)), np.ones((100, 200)), np.zeros((100, 200)), k100, Pose.identity())
    out = rectify_frame(f)
    assert out.fits == []
    np.testing.assert_array_equal(out.corrected_depth, f.depth)
    assert not out.correction_mask.any()


@pytest.fixture(scope="module")
def curved():
    return render_sequence(curved_scene(64))[0]


@pytest.mark.parametrize("mode", [FIXED_XY, RAY])
def test_exact_data_is_fixed_point(curved, mode):
    out = rectify_frame(curved, RectifyConfig(mode=mode))
    assert all(f.accepted and f.r2 == pytest.approx(1.0, abs=1e-9) for f in out.fits)
    assert np.max(np.abs(out.corrected_depth - curved.depth)) <= 1e-6


@pytest.mark.parametrize("mode", [FIXED_XY, RAY])
def test_noisy_correction_halves_rmse(curved, mode):
    noisy = perturb_depth(curved, NoiseModel(depth_sigma=0.02, seed=3))
    out = rectify_frame(noisy, RectifyConfig(gate=LOOSE, mode=mode))
    assert any(f.accepted for f in out.fits)
    for fit in out.fits:
        if not fit.accepted:
            continue
        m = (curved.mask == fit.segment_id) & (curved.depth > 0)
        pre = np.sqrt(np.mean((noisy.depth[m] - curved.depth[m]) ** 2))
        post = np.sqrt(np.mean((out.corrected_depth[m] - curved.depth[m]) ** 2))
        assert post <= 0.5 * pre
    valid = curved.depth > 0
    assert np.mean(np.abs(out.corrected_depth - curved.depth)[valid]) < np.mean(
        np.abs(noisy.depth - curved.depth)[valid])


def _random_segment_frame(seed=0):
    k = CameraIntrinsics(60.0, 60.0, 31.5, 31.5, 64, 64)
    rng = np.random.default_rng(seed)
    depth = np.zeros((64, 64))
    mask = np.zeros((64, 64), dtype=int)
    mask[10:40, 10:40] = 7
    depth[10:40, 10:40] = rng.uniform(1.8, 2.2, (30, 30))
    return Frame(np.zeros((64, 64, 3)), depth, mask, k, Pose.identity())


def test_random_depth_segment_rejected():
    f = _random_segment_frame()
    out = rectify_frame(f, RectifyConfig(gate=GateConfig(tau_eps=np.inf)))
    (fit,) = out.fits
    assert fit.r2 < 0.85 and not fit.accepted
    np.testing.assert_array_equal(out.corrected_depth, f.depth)


def test_fallback_safety(curved):
    noisy = perturb_depth(curved, NoiseModel(depth_sigma=0.02, edge_blur_px=1, seed=9))
    out = rectify_frame(noisy, RectifyConfig(gate=LOOSE, mode=RAY))
    fits = {f.segment_id: f for f in out.fits}
    pts = backproject_depth(out.corrected_depth, curved.intrinsics)
    changed = out.correction_mask
    np.testing.assert_array_equal(out.corrected_depth[~changed], noisy.depth[~changed])
    for sid, fit in fits.items():
        sel = changed & (curved.mask == sid)
        if sel.any():
            assert np.max(np.abs(evaluate_quadric(fit.coeffs, pts[sel]))) <= 1e-6


def test_gate_monotone(curved):
    noisy = perturb_depth(curved, NoiseModel(depth_sigma=0.02, seed=4))
    counts = []
    for tau, r2 in [(1e-2, 0.5), (1e-3, 0.85), (2.5e-4, 0.9), (1e-5, 0.99)]:
        out = rectify_frame(noisy, RectifyConfig(gate=GateConfig(tau_eps=tau, r2_min=r2)))
        counts.append(int(out.correction_mask.sum()))
    assert counts == sorted(counts, reverse=True)


def test_refine_never_worse(rng):
    pts = rng.normal(size=(400, 3)) * [0.3, 0.3, 0.0] + [0, 0, 2]
    pts[:, 2] += 0.5 * pts[:, 0] ** 2 + rng.normal(scale=0.01, size=400)
    fit = fit_quadric(pts)
    ref = refine_quadric(fit, pts)
    assert ref.refined and ref.epsilon <= fit.epsilon
    assert abs(np.linalg.norm(ref.coeffs.cq) - 1) < 1e-12


def test_unknown_mode():
    with pytest.raises(ValueError):
        RectifyConfig(mode="sideways")
