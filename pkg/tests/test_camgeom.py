import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatpose import autodiff as ad
from splatpose.autodiff import Value
from splatpose.camgeom import (Camera, CameraError, DegenerateRaysError, PoseError, RaySet,
                               axis_angle_to_matrix, cameras_to_rays, normalize_ray, pose_auc,
                               pose_error, project_points, project_points_ad, random_rotation,
                               rays_center_ad, rays_from_camera_ad, rays_to_camera,
                               rays_to_camera_ad, rays_to_camera_center, rotation_angle, rq_decompose,
                               so3_exp_ad)

K100 = np.array([[100.0, 0, 32], [0, 100, 32], [0, 0, 1]])


def random_camera(rng, size=64):
    f = rng.uniform(60, 200)
    K = np.array([[f, 0, rng.uniform(0.3, 0.7) * size], [0, f * rng.uniform(0.8, 1.2),
                  rng.uniform(0.3, 0.7) * size], [0, 0, 1]])
    return Camera(K, random_rotation(rng), rng.normal(size=3), size, size)


def test_rays_through_origin_have_zero_moment():
    rays = cameras_to_rays(Camera.identity(), [[0.0, 0.0, 1.0]])
    np.testing.assert_allclose(rays.d[0], [0, 0, 1])
    np.testing.assert_allclose(rays.m[0], 0)


def test_cameras_to_rays_hand_value():
    cam = Camera(np.eye(3), np.eye(3), [0, 0, -1.0])
    rays = cameras_to_rays(cam, [[1.0, 0.0, 1.0]])
    # c = (0, 0, 1); d = (1, 0, 1)/sqrt2; m = c x d
    np.testing.assert_allclose(rays.d[0], np.array([1, 0, 1]) / np.sqrt(2), atol=1e-15)
    np.testing.assert_allclose(rays.m[0], np.array([0, 1, 0]) / np.sqrt(2), atol=1e-15)


@pytest.mark.parametrize("lam", [0.5, 1.0, 10.0])
def test_rays_reproject_to_uv(lam):
    rng = np.random.default_rng(11)
    for _ in range(20):
        cam = random_camera(rng)
        uv = rng.uniform(0, 64, (16, 2))
        rays = cameras_to_rays(cam, uv)
        assert np.abs(np.einsum("ij,ij->i", rays.d, rays.m)).max() < 1e-9
        got, depth, valid = project_points(cam, cam.center + lam * rays.d)
        assert valid.all() and (depth > 0).all()
        np.testing.assert_allclose(got, uv, atol=1e-9)


def test_center_hand_rays():
    rays = RaySet([[0, 0, 1], [1, 0, 0]], [[0, 0, 0], [0, 1, 0]], [[0, 0], [0, 0]])
    c, res = rays_to_camera_center(rays)
    np.testing.assert_allclose(c, [0, 0, 1], atol=1e-14)
    assert res < 1e-14


def test_center_zero_moments():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(5, 3))
    c, _ = rays_to_camera_center(RaySet(d, np.zeros((5, 3)), np.zeros((5, 2))))
    np.testing.assert_allclose(c, 0, atol=1e-14)


def test_center_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(20):
        cam = random_camera(rng)
        c, _ = rays_to_camera_center(cameras_to_rays(cam, rng.uniform(0, 64, (16, 2))))
        np.testing.assert_allclose(c, -cam.R.T @ cam.t, atol=1e-8)


def test_center_parallel_rays_degenerate():
    d = np.tile([0.0, 0, 1], (4, 1))
    m = np.cross(np.random.default_rng(0).normal(size=(4, 3)), d)
    with pytest.raises(DegenerateRaysError):
        rays_to_camera_center(RaySet(d, m, np.zeros((4, 2))))


def test_rays_to_camera_round_trip_both_paths():
    rng = np.random.default_rng(9)
    cam = Camera(K100, random_rotation(rng), rng.normal(size=3))
    rays = cameras_to_rays(cam, rng.uniform(0, 64, (16, 2)))
    for est in (rays_to_camera(rays, image_size=(64, 64)), rays_to_camera(rays, known_K=K100)):
        assert np.abs(est.K - K100).max() / 100 < 1e-6
        assert rotation_angle(est.R @ cam.R.T) < 1e-6
        assert np.linalg.norm(est.t - cam.t) < 1e-6
        est.validate()
        got, _, _ = project_points(est, est.center + rays.d)
        np.testing.assert_allclose(got, rays.uv, atol=1e-6)


def test_identity_camera_recovery():
    uv = np.array([[x, y] for x in (-1.0, 0.0, 1.0) for y in (-1.0, 0.5, 1.0)])
    est = rays_to_camera(cameras_to_rays(Camera.identity(), uv))
    np.testing.assert_allclose(est.K, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(est.R, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(est.t, 0, atol=1e-9)


def test_rays_to_camera_needs_six():
    rays = cameras_to_rays(Camera(K100), [[1.0, 2], [3, 4], [5, 7]])
    with pytest.raises(CameraError):
        rays_to_camera(rays)


def test_rq_simple_cases():
    K, R = rq_decompose(np.eye(3))
    np.testing.assert_allclose(K, np.eye(3), atol=1e-15)
    np.testing.assert_allclose(R, np.eye(3), atol=1e-15)
    K, R = rq_decompose(np.diag([2.0, 2.0, 1.0]))
    np.testing.assert_allclose(K, np.diag([2.0, 2.0, 1.0]), atol=1e-15)
    np.testing.assert_allclose(R, np.eye(3), atol=1e-15)


def test_rq_compose_decompose():
    rng = np.random.default_rng(3)
    for _ in range(100):
        K0 = np.array([[rng.uniform(50, 500), rng.normal(), rng.uniform(0, 100)],
                       [0, rng.uniform(50, 500), rng.uniform(0, 100)], [0, 0, 1]])
        R0 = random_rotation(rng)
        K, R = rq_decompose(3.7 * K0 @ R0)
        np.testing.assert_allclose(K, K0, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(R, R0, atol=1e-9)


def test_rq_negative_determinant():
    rng = np.random.default_rng(4)
    M = rng.normal(size=(3, 3))
    if np.linalg.det(M) > 0:
        M = -M
    K, R = rq_decompose(M)
    s = (M @ R.T)[2, 2]
    assert s < 0 and np.linalg.det(R) == pytest.approx(1.0)
    assert np.all(np.diag(K) > 0)
    np.testing.assert_allclose(s * K @ R, M, atol=1e-12)


def test_rq_singular():
    with pytest.raises(CameraError):
        rq_decompose(np.zeros((3, 3)))


def test_project_hand_value():
    uv, depth, valid = project_points(Camera(K100), [[0, 0, 2.0]])
    np.testing.assert_allclose(uv[0], [32, 32])
    assert depth[0] == 2 and valid[0]


def test_project_camera_center_invalid():
    cam = Camera(K100, random_rotation(np.random.default_rng(0)), [0.3, -0.2, 1.0])
    uv, depth, valid = project_points(cam, cam.center[None])
    assert not valid[0]
    assert 0 <= uv[0, 0] <= 64 and 0 <= uv[0, 1] <= 64


def test_project_ad_matches_numpy_and_grads():
    rng = np.random.default_rng(2)
    cam = Camera(K100, axis_angle_to_matrix([0.1, -0.2, 0.05]), [0.1, 0.2, 0.3])
    pts = rng.normal(size=(6, 3)) * 0.3 + [0, 0, 3]
    uv, depth, valid = project_points_ad(cam, Value(pts))
    ref = project_points(cam, pts)
    np.testing.assert_allclose(uv.data, ref[0], atol=1e-12)
    assert ad.grad_check(lambda x: ad.vsum(project_points_ad(cam, x)[0] * 0.01), pts) < 1e-4


def test_normalize_ray():
    d, m = normalize_ray([0, 0, 2.0], [0, 4.0, 0])
    np.testing.assert_allclose(d, [0, 0, 1])
    np.testing.assert_allclose(m, [0, 2, 0])
    d2, m2 = normalize_ray(d, m)
    np.testing.assert_array_equal(d2, d)
    np.testing.assert_array_equal(m2, m)
    with pytest.raises(CameraError):
        normalize_ray([0, 0, 0.0], [1, 0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalize_preserves_incidence(seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=3) * rng.uniform(0.1, 10)
    m = np.cross(rng.normal(size=3), d)
    dn, mn = normalize_ray(d, m)
    assert abs(dn @ mn) < 1e-12 * max(1.0, np.linalg.norm(mn))


def test_pose_error_cases():
    rng = np.random.default_rng(1)
    gt = Camera(K100, random_rotation(rng), [0.5, 0.1, -0.2])
    e = pose_error(gt, gt)
    assert e.rot_deg == pytest.approx(0, abs=1e-6) and e.trans_deg == pytest.approx(0, abs=1e-6)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    est = Camera(K100, axis_angle_to_matrix(np.deg2rad(10) * axis) @ gt.R, gt.t)
    e = pose_error(est, gt)
    assert e.rot_deg == pytest.approx(10, abs=1e-9) and e.trans_deg == pytest.approx(0, abs=1e-6)
    assert pose_error(Camera(K100, gt.R, -gt.t), gt).trans_deg == pytest.approx(180)
    assert pose_error(Camera(K100), Camera(K100)).trans_deg == 0
    assert pose_error(Camera(K100, t=[1, 0, 0]), Camera(K100)).trans_deg == 180


def test_pose_auc_cases():
    assert pose_auc([PoseError(0, 0)] * 3) == [1.0, 1.0, 1.0]
    assert pose_auc([PoseError(2.5, 1.0)], [5])[0] == pytest.approx(0.5)
    assert pose_auc([30.0, 25.0], [5, 10, 20]) == [0.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        pose_auc([])


def test_pose_auc_matches_numeric_integral():
    rng = np.random.default_rng(0)
    errs = rng.uniform(0, 25, 40)
    ts = np.linspace(0, 20, 200001)
    acc = (errs[None, :] <= ts[:, None]).mean(1)
    numeric = np.trapezoid(acc, ts) / 20
    assert pose_auc(errs, [20])[0] == pytest.approx(numeric, abs=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 60), min_size=1, max_size=20), st.randoms())
def test_pose_auc_permutation_invariant(errs, rnd):
    shuffled = list(errs)
    rnd.shuffle(shuffled)
    assert pose_auc(errs) == pytest.approx(pose_auc(shuffled), abs=1e-12)


def test_ray_ad_paths_match_numpy():
    rng = np.random.default_rng(8)
    cam = Camera(K100, random_rotation(rng), rng.normal(size=3))
    uv = rng.uniform(0, 64, (12, 2))
    d, m = rays_from_camera_ad(cam, uv)
    ref = cameras_to_rays(cam, uv)
    np.testing.assert_allclose(d.data, ref.d, atol=1e-12)
    np.testing.assert_allclose(m.data, ref.m, atol=1e-12)
    np.testing.assert_allclose(rays_center_ad(d, m).data, cam.center, atol=1e-9)
    cv = rays_to_camera_ad(d, m, uv, K100, (64, 64))
    np.testing.assert_allclose(cv.R.data, cam.R, atol=1e-9)
    np.testing.assert_allclose(cv.t.data, cam.t, atol=1e-9)


def test_ray_solve_ad_gradients():
    rng = np.random.default_rng(12)
    cam = Camera(K100, axis_angle_to_matrix([0.1, 0.2, -0.1]), [0.2, -0.1, 0.4])
    uv = rng.uniform(0, 64, (8, 2))
    ref = cameras_to_rays(cam, uv)
    noise = rng.normal(size=(8, 6)) * 0.01
    w = rng.normal(size=(3, 3))

    def f(x):
        p = Value(ref.plucker + noise) + x
        cv = rays_to_camera_ad(p[:, :3], p[:, 3:], uv, K100, (64, 64))
        return ad.vsum(cv.R * w) + ad.vsum(cv.t * w[0])
    assert ad.grad_check(f, np.zeros((8, 6)), eps=1e-6) < 1e-4


def test_so3_exp_matches_numpy():
    w = np.array([0.3, -0.2, 0.5])
    np.testing.assert_allclose(so3_exp_ad(Value(w)).data, axis_angle_to_matrix(w), atol=1e-14)
    np.testing.assert_allclose(so3_exp_ad(Value(np.zeros(3))).data, np.eye(3))
    assert ad.grad_check(lambda x: ad.vsum(so3_exp_ad(x) * np.arange(9).reshape(3, 3)),
                         np.zeros(3), eps=1e-6) < 1e-6


def test_camera_json_round_trip(tmp_path):
    cam = random_camera(np.random.default_rng(0))
    cam.save(tmp_path / "cam.json")
    back = Camera.load(tmp_path / "cam.json")
    for a in ("K", "R", "t"):
        np.testing.assert_array_equal(getattr(back, a), getattr(cam, a))
    with pytest.raises(CameraError):
        Camera.from_dict({"K": [1, 2]})
