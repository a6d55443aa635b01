import numpy as np
import pytest

from splatpose import autodiff as ad
from splatpose.autodiff import Value
from splatpose.camgeom import Camera, axis_angle_to_matrix
from splatpose.render import (SH_C0, SH_C1, GaussianSet, RenderError, depth_map, render, render_np,
                              sh_to_color)

K16 = np.array([[20.0, 0, 8], [0, 20, 8], [0, 0, 1]])


def brute_force_render(mu, scale, opacity, rgb, cam, bg):
    """Per-pixel loop over isotropic Gaussians, written independently of the renderer."""
    W, H = cam.width, cam.height
    img = np.zeros((H, W, 3))
    f = [cam.K[0, 0], cam.K[1, 1]]
    layers = []
    for i in range(len(mu)):
        xc = cam.R @ mu[i] + cam.t
        x, y, z = xc
        J = np.array([[f[0] / z, 0, -f[0] * x / z**2], [0, f[1] / z, -f[1] * y / z**2]])
        cov = J @ cam.R @ (scale[i] ** 2 * np.eye(3)) @ cam.R.T @ J.T + 0.3 * np.eye(2)
        mean = (cam.K @ xc)[:2] / z
        layers.append((z, i, mean, np.linalg.inv(cov)))
    layers.sort(key=lambda l: (l[0], l[1]))
    for r in range(H):
        for c in range(W):
            p = np.array([c + 0.5, r + 0.5])
            T, col = 1.0, np.zeros(3)
            for z, i, mean, icov in layers:
                dlt = p - mean
                m2 = dlt @ icov @ dlt
                a = 0.0 if m2 > 9 else min(0.99, opacity[i] * np.exp(-0.5 * m2))
                col += T * a * np.asarray(rgb[i])
                T *= 1 - a
            img[r, c] = col + T * np.asarray(bg)
    return img


def test_empty_scene_is_background():
    out = render(GaussianSet.empty(), Camera(K16, width=16, height=16), bg=(0.2, 0.4, 0.6))
    np.testing.assert_array_equal(out.rgb.data, np.broadcast_to([0.2, 0.4, 0.6], (16, 16, 3)))
    np.testing.assert_array_equal(out.alpha.data, 0)
    np.testing.assert_array_equal(out.depth.data, 0)


def test_single_gaussian_closed_form():
    # principal point on the centre of pixel (8, 8) keeps the Gaussian on the optical axis
    cam = Camera(np.array([[20.0, 0, 8.5], [0, 20, 8.5], [0, 0, 1]]), width=16, height=16)
    mu = np.array([[0.0, 0.0, 2.0]])
    g = GaussianSet.from_activated(mu, 0.5, 0.8, [[0.9, 0.3, 0.1]])
    bg = np.array([0.1, 0.2, 0.3])
    out = render(g, cam, bg=bg)
    centre = out.rgb.data[8, 8]
    np.testing.assert_allclose(centre, 0.8 * np.array([0.9, 0.3, 0.1]) + 0.2 * bg, atol=1e-12)
    assert out.alpha.data[8, 8] == pytest.approx(0.8, abs=1e-12)
    # closed form everywhere: on-axis isotropic -> sigma2d^2 = (f s / z)^2 + 0.3
    s2 = (20 * 0.5 / 2) ** 2 + 0.3
    ys, xs = np.mgrid[0:16, 0:16] + 0.5
    d2 = (xs - 8.5) ** 2 + (ys - 8.5) ** 2
    m2 = d2 / s2
    a = np.where(m2 <= 9, 0.8 * np.exp(-0.5 * m2), 0.0)
    ref = a[..., None] * [0.9, 0.3, 0.1] + (1 - a[..., None]) * bg
    np.testing.assert_allclose(out.rgb.data, ref, atol=1e-5)


def test_two_gaussians_match_brute_force():
    cam = Camera(K16, axis_angle_to_matrix([0.05, -0.1, 0.02]), [0.05, -0.02, 0.1], 16, 16)
    mu = np.array([[0.1, 0.0, 2.0], [-0.1, 0.05, 2.5]])
    scale, op = [0.3, 0.4], [0.7, 0.9]
    rgb = [[1.0, 0.2, 0.1], [0.1, 0.5, 0.9]]
    g = GaussianSet.from_activated(mu, np.array(scale)[:, None], op, rgb)
    got = render_np(g, cam, bg=(0.2, 0.2, 0.2))
    ref = brute_force_render(mu, scale, op, rgb, cam, (0.2, 0.2, 0.2))
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_depth_single_and_occluded():
    cam = Camera(K16, width=16, height=16)
    g = GaussianSet.from_activated([[0.05, 0.05, 2.0]], 1.0, 0.999, [[1, 1, 1]])
    assert depth_map(g, cam).data[8, 8] == pytest.approx(2.0, abs=1e-3)
    g2 = GaussianSet.from_activated([[0.05, 0.05, 2.0], [0.05, 0.05, 2.1]], 1.0, [0.999, 0.5],
                                    [[1, 1, 1], [0, 0, 0]])
    assert depth_map(g2, cam).data[8, 8] == pytest.approx(2.0, abs=1e-3)
    np.testing.assert_array_equal(depth_map(GaussianSet.empty(), cam).data, 0)


def test_permutation_bit_identical():
    rng = np.random.default_rng(0)
    n = 12
    mu = rng.normal(size=(n, 3)) * 0.4 + [0, 0, 3]
    g = GaussianSet.from_activated(mu, rng.uniform(0.05, 0.3, (n, 3)), rng.uniform(0.2, 0.9, n),
                                   rng.uniform(0, 1, (n, 3)), rot=rng.normal(size=(n, 4)))
    perm = rng.permutation(n)
    cam = Camera(K16, width=16, height=16)
    a = render_np(g, cam)
    b = render_np(g.subset(perm), cam)
    np.testing.assert_array_equal(a, b)


def test_translation_equivariance():
    rng = np.random.default_rng(1)
    n = 6
    mu = rng.normal(size=(n, 3)) * 0.3 + [0, 0, 3]
    kw = dict(scale=rng.uniform(0.1, 0.3, (n, 3)), opacity=rng.uniform(0.3, 0.9, n),
              rgb=rng.uniform(0, 1, (n, 3)), rot=rng.normal(size=(n, 4)))
    R = axis_angle_to_matrix([0.1, 0.2, 0.0])
    cam = Camera.from_center(K16, R, [0.1, 0.0, -0.2], 16, 16)
    v = np.array([1.5, -2.0, 0.7])
    cam2 = Camera.from_center(K16, R, cam.center + v, 16, 16)
    a = render_np(GaussianSet.from_activated(mu, **kw), cam)
    b = render_np(GaussianSet.from_activated(mu + v, **kw), cam2)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_energy_bounds():
    rng = np.random.default_rng(2)
    n = 20
    mu = rng.normal(size=(n, 3)) * 0.3 + [0, 0, 2]
    g = GaussianSet.from_activated(mu, 0.3, 0.95, rng.uniform(0, 1, (n, 3)))
    out = render(g, Camera(K16, width=16, height=16))
    assert out.alpha.data.max() <= 1.0 and np.isfinite(out.rgb.data).all()
    faint = GaussianSet.from_activated(mu, 0.3, 1e-12, rng.uniform(0, 1, (n, 3)))
    np.testing.assert_allclose(render_np(faint, Camera(K16, width=16, height=16), bg=(0.3, 0.5, 0.7)),
                               np.broadcast_to([0.3, 0.5, 0.7], (16, 16, 3)), atol=1e-9)


def test_sh_degree0_and_1():
    sh = np.array([0.5, -0.5, -0.5]) / SH_C0
    for vd in ([0, 0, 1.0], [1.0, 0, 0]):
        np.testing.assert_allclose(sh_to_color(sh, vd, 0).data, [1, 0, 0], atol=1e-12)
    sh1 = np.concatenate([[0.1, 0.2, -0.1], np.zeros(9)])
    np.testing.assert_allclose(sh_to_color(sh1, [0, 0, 1.0], 1).data,
                               sh_to_color(sh1[:3], [0, 0, 1.0], 0).data)
    bands = np.array([0.1, 0.2, -0.1, 0.3, 0.1, 0.0, 0.2, -0.2, 0.4, 0.5, 0.5, 0.5])
    vd = np.array([0.0, 0.0, 1.0])
    # hand evaluation with the standard real-SH constants
    ref = 0.5 + SH_C0 * bands[0:3] - SH_C1 * vd[1] * bands[3:6] + SH_C1 * vd[2] * bands[6:9] \
        - SH_C1 * vd[0] * bands[9:12]
    np.testing.assert_allclose(sh_to_color(bands, vd, 1).data, np.clip(ref, 0, 1))
    with pytest.raises(RenderError):
        sh_to_color(np.zeros(5), vd, 1)


def _small_scene(rng, n=3, degree=0):
    mu = rng.normal(size=(n, 3)) * 0.15 + [0, 0, 2]
    g = GaussianSet.from_activated(mu, rng.uniform(0.15, 0.3, (n, 3)), rng.uniform(0.3, 0.7, n),
                                   rng.uniform(0.2, 0.8, (n, 3)), rot=rng.normal(size=(n, 4)),
                                   degree=degree)
    return g


@pytest.mark.parametrize("field", ["mu", "rot", "scale_log", "opacity_logit", "sh"])
def test_render_gradients(field):
    rng = np.random.default_rng(3)
    g = _small_scene(rng)
    cam = Camera(np.array([[10.0, 0, 4], [0, 10, 4], [0, 0, 1]]), axis_angle_to_matrix([0.02, 0.03, 0]),
                 [0.01, 0, 0], 8, 8)
    w = rng.normal(size=(8, 8, 3))

    def f(x):
        vals = {k: getattr(g, k) for k in ("mu", "rot", "scale_log", "opacity_logit", "sh")}
        vals[field] = x
        gs = GaussianSet(**vals, degree=g.degree)
        return ad.vsum(render(gs, cam, smooth_cutoff=True).rgb * w)
    assert ad.grad_check(f, getattr(g, field).data, eps=1e-6) < 1e-4


def test_render_gradients_camera():
    rng = np.random.default_rng(4)
    g = _small_scene(rng)
    cam = Camera(np.array([[10.0, 0, 4], [0, 10, 4], [0, 0, 1]]), width=8, height=8)
    w = rng.normal(size=(8, 8, 3))
    from splatpose.camgeom import perturb_camera_ad
    f = lambda x: ad.vsum(render(g, perturb_camera_ad(cam, x), smooth_cutoff=True).rgb * w)
    assert ad.grad_check(f, np.zeros(6), eps=1e-6) < 1e-4


def test_gaussian_json_round_trip(tmp_path):
    g = _small_scene(np.random.default_rng(5), n=4, degree=1)
    g.save(tmp_path / "g.json")
    back = GaussianSet.load(tmp_path / "g.json")
    for a, b in zip(g.fields, back.fields):
        np.testing.assert_array_equal(a.data, b.data)
    assert back.degree == 1


def test_non_finite_rejected():
    g = GaussianSet.from_activated([[0, 0, np.nan]], 0.1, 0.5, [[1, 1, 1]])
    with pytest.raises(RenderError):
        render(g, Camera(K16, width=16, height=16))
