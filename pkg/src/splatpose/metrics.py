"""Image and ray losses, image quality metrics and view-overlap buckets."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .camgeom import Camera, cameras_to_rays, normalize_ray, project_points
from .render import GaussianSet

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
# overlap buckets as half-open intervals; "large" is closed at 1
BUCKETS = (("small", 0.05, 0.30), ("medium", 0.30, 0.55), ("large", 0.55, 1.0))


@dataclass
class LossWeights:
    lambda_lpips_proxy: float = 0.05
    lambda_rays: float = 1.0
    lambda_3d: float = 1.0

    def __post_init__(self):
        if min(self.lambda_lpips_proxy, self.lambda_rays, self.lambda_3d) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(name: str, pred, gt) -> tuple[Value, Value]:
    pred, gt = ad.as_value(pred), ad.as_value(gt)
    if pred.shape != gt.shape:
        raise ad.ShapeError(name, pred.shape, gt.shape)
    return pred, gt


def _gauss_band(n: int, size: int, sigma: float) -> np.ndarray:
    """``(n - size + 1, n)`` matrix applying a normalised 1D Gaussian with 'valid' borders."""
    k = np.exp(-0.5 * ((np.arange(size) - (size - 1) / 2) / sigma) ** 2)
    k /= k.sum()
    out = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        out[i, i:i + size] = k
    return out


def ssim(pred, gt) -> Value:
    """Mean single-scale SSIM of ``(H, W, C)`` images (Gaussian window, valid region only).

    The window shrinks to the image when an image side is below 11 pixels.
    """
    pred, gt = _check_pair("ssim", pred, gt)
    if pred.ndim == 2:
        pred, gt = ad.reshape(pred, pred.shape + (1,)), ad.reshape(gt, gt.shape + (1,))
    H, W, _ = pred.shape
    size = min(SSIM_WINDOW, H, W)
    gr, gc = _gauss_band(H, size, SSIM_SIGMA), _gauss_band(W, size, SSIM_SIGMA).T

    def blur(x):
        x = ad.transpose(x, (2, 0, 1))
        return ad.matmul(ad.matmul(gr, x), gc)

    mx, my = blur(pred), blur(gt)
    sxx = blur(pred * pred) - mx * mx
    syy = blur(gt * gt) - my * my
    sxy = blur(pred * gt) - mx * my
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return ad.mean(num / den)


def mse(pred, gt) -> Value:
    pred, gt = _check_pair("mse", pred, gt)
    return ad.mean((pred - gt) ** 2)


def psnr(pred, gt) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1], capped at 100 dB."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ad.ShapeError("psnr", pred.shape, gt.shape)
    err = float(np.mean((pred - gt) ** 2))
    if err < 1e-10:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / err)))


def ssim_value(pred, gt) -> float:
    with ad.no_grad():
        return float(ssim(pred, gt).data)


def loss_3d(pred, gt, w: LossWeights) -> Value:
    """``MSE + lambda (1 - SSIM)``; with ``lambda = 0`` this is exactly the MSE."""
    pred, gt = _check_pair("loss_3d", pred, gt)
    out = mse(pred, gt)
    if w.lambda_lpips_proxy:
        out = out + w.lambda_lpips_proxy * (1.0 - ssim(pred, gt))
    return out


def _safe_norm(x: Value, axis: int = -1) -> Value:
    """Euclidean norm with a zero (sub)gradient at the origin."""
    n2 = ad.vsum(x * x, axis=axis)
    pos = n2.data > 0
    return ad.where(pos, ad.sqrt(ad.where(pos, n2, 1.0)), 0.0)


def gt_rays(gt_cams: Sequence[Camera], anchors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Canonical ground-truth rays ``(V, N, 3)`` through the per-view pixel anchors."""
    ds, ms = [], []
    for cam, uv in zip(gt_cams, anchors):
        r = cameras_to_rays(cam, uv)
        d, m = normalize_ray(r.d, r.m)
        ds.append(d)
        ms.append(m)
    return np.stack(ds), np.stack(ms)


def ray_distance(pd, pm, gd, gm) -> Value:
    """Per-ray 6-vector distance with the ground-truth orientation chosen per ray."""
    pd, pm = ad.as_value(pd), ad.as_value(pm)
    p = ad.concat([pd, pm], axis=-1)
    g = np.concatenate([np.asarray(gd), np.asarray(gm)], axis=-1)
    plus, minus = _safe_norm(p - g), _safe_norm(p + g)
    return ad.where(minus.data < plus.data, minus, plus)


def loss_rays(pred_d, pred_m, gt_cams: Sequence[Camera], anchors: np.ndarray) -> Value:
    """Sum over views and rays of the Plücker distance to rays of the ground-truth cameras."""
    pred_d, pred_m = ad.as_value(pred_d), ad.as_value(pred_m)
    anchors = np.asarray(anchors, dtype=np.float64)
    if len(gt_cams) != pred_d.shape[0] or anchors.shape[:2] != pred_d.shape[:2]:
        raise ad.ShapeError("loss_rays", pred_d.shape, anchors.shape, (len(gt_cams),))
    n = ad.l2norm(pred_d, axis=-1, keepdims=True)
    gd, gm = gt_rays(gt_cams, anchors)
    return ad.vsum(ray_distance(pred_d / n, pred_m / n, gd, gm))


def total_loss(l3d: Value, lrays: Value, w: LossWeights) -> Value:
    """``lambda_rays * L_rays + lambda_3d * L_3d``."""
    return w.lambda_rays * ad.as_value(lrays) + w.lambda_3d * ad.as_value(l3d)


# ---------------------------------------------------------------------------
# overlap
# ---------------------------------------------------------------------------

def visible(cam: Camera, pts: np.ndarray) -> np.ndarray:
    """Centres in front of the camera that project inside the image."""
    uv, _, valid = project_points(cam, pts)
    return valid & (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height)


def overlap_bucket(frac: float) -> str:
    for name, lo, hi in BUCKETS:
        if lo <= frac < hi or (name == "large" and frac == hi):
            return name
    return "below"


def overlap_fraction(cam_a: Camera, cam_b: Camera, g: GaussianSet) -> tuple[float, str]:
    """Share of the centres visible in ``cam_a`` that are also visible in ``cam_b``."""
    if g.n == 0:
        raise ValueError("overlap_fraction needs a non-empty GaussianSet")
    va = visible(cam_a, g.mu.data)
    if not va.any():
        return 0.0, "below"
    frac = float(np.sum(va & visible(cam_b, g.mu.data)) / np.sum(va))
    return frac, overlap_bucket(frac)
