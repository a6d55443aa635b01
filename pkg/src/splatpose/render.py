"""3D Gaussian scenes and a differentiable CPU splatting renderer.

The renderer evaluates every (Gaussian, pixel) pair densely: Gaussians are
sorted once per view by camera depth and composited front to back.  Images
up to roughly 128x128 with a few hundred Gaussians are the intended scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .camgeom import Z_NEAR, Camera, CamValues, cam_values

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
ALPHA_MAX = 0.99
DILATION = 0.3
CUTOFF_M2 = 9.0  # squared Mahalanobis radius of the 3-sigma cutoff


class RenderError(ValueError):
    pass


def sh_bands(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass
class GaussianSet:
    """Gaussians in unconstrained storage.

    ``scale_log`` and ``opacity_logit`` are activated with ``exp`` and
    ``sigmoid`` at use; ``rot`` holds ``(w, x, y, z)`` quaternions that are
    normalised at use; ``sh`` is ``(N, 3 * (degree + 1)**2)``, band-major.
    """

    mu: Value
    rot: Value
    scale_log: Value
    opacity_logit: Value
    sh: Value
    degree: int = 0

    def __post_init__(self):
        for name in ("mu", "rot", "scale_log", "opacity_logit", "sh"):
            setattr(self, name, ad.as_value(getattr(self, name)))
        n = self.mu.shape[0]
        if self.sh.ndim == 3:
            self.sh = ad.reshape(self.sh, (n, -1))
        expect = {"mu": (n, 3), "rot": (n, 4), "scale_log": (n, 3), "opacity_logit": (n,),
                  "sh": (n, 3 * sh_bands(self.degree))}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise RenderError(f"GaussianSet.{name} has shape {getattr(self, name).shape}, "
                                  f"expected {shape}")

    @property
    def n(self) -> int:
        return self.mu.shape[0]

    @property
    def fields(self) -> tuple[Value, ...]:
        return self.mu, self.rot, self.scale_log, self.opacity_logit, self.sh

    @classmethod
    def empty(cls, degree: int = 0) -> GaussianSet:
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, 3 * sh_bands(degree))), degree)

    @classmethod
    def from_activated(cls, mu, scale, opacity, rgb, rot=None, degree: int = 0) -> GaussianSet:
        """Build from centres, positive scales, opacities in (0,1) and base colours."""
        mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        n = len(mu)
        scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n, 3))
        op = np.broadcast_to(np.asarray(opacity, dtype=np.float64), (n,))
        rgb = np.broadcast_to(np.asarray(rgb, dtype=np.float64), (n, 3))
        rot = np.tile([1.0, 0, 0, 0], (n, 1)) if rot is None else np.asarray(rot, dtype=np.float64)
        sh = np.zeros((n, sh_bands(degree), 3))
        sh[:, 0] = (rgb - 0.5) / SH_C0
        return cls(mu, rot, np.log(scale), np.log(op) - np.log1p(-op), sh.reshape(n, -1), degree)

    def requires_grad_(self) -> GaussianSet:
        for v in self.fields:
            v.requires_grad = True
        return self

    def detach(self) -> GaussianSet:
        return GaussianSet(*(v.detach() for v in self.fields), degree=self.degree)

    def subset(self, idx) -> GaussianSet:
        return GaussianSet(*(v[idx] for v in self.fields), degree=self.degree)

    def to_dict(self) -> dict:
        return {"mu": self.mu.data.tolist(), "rot": self.rot.data.tolist(),
                "scale_log": self.scale_log.data.tolist(),
                "opacity_logit": self.opacity_logit.data.tolist(),
                "sh": self.sh.data.tolist(), "degree": self.degree}

    @classmethod
    def from_dict(cls, d: dict) -> GaussianSet:
        deg = int(d.get("degree", 0))
        n = len(d["mu"])
        arr = lambda k, w: np.array(d[k], dtype=np.float64).reshape(n, w) if n else np.zeros((0, w))
        return cls(arr("mu", 3), arr("rot", 4), arr("scale_log", 3),
                   np.array(d["opacity_logit"], dtype=np.float64).reshape(n),
                   arr("sh", 3 * sh_bands(deg)), deg)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> GaussianSet:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RenderOutput:
    rgb: Value    # (H, W, 3)
    depth: Value  # (H, W)
    alpha: Value  # (H, W)


def quat_to_rotmat_ad(q: Value) -> Value:
    """Rotation matrices ``(N, 3, 3)`` from unit quaternions ``(N, 4)``."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return ad.stack([ad.stack(r, axis=1) for r in rows], axis=1)


def sh_to_color(sh, view_dir, degree: int = 0) -> Value:
    """Evaluate degree-0/1 real spherical harmonics; output clamped to [0, 1].

    ``sh`` is ``(N, 3 * (degree + 1)**2)`` (or a single row), ``view_dir``
    unit vectors ``(N, 3)``.
    """
    if degree not in (0, 1):
        raise RenderError(f"unsupported SH degree {degree}")
    sh = ad.as_value(sh)
    single = sh.ndim == 1
    if single:
        sh = ad.reshape(sh, (1, -1))
    if sh.shape[-1] != 3 * sh_bands(degree):
        raise RenderError(f"expected {3 * sh_bands(degree)} SH coefficients, got {sh.shape[-1]}")
    n = sh.shape[0]
    coef = ad.reshape(sh, (n, sh_bands(degree), 3))
    c = coef[:, 0] * SH_C0 + 0.5
    if degree == 1:
        vd = ad.as_value(np.broadcast_to(view_dir, (n, 3))) if not isinstance(view_dir, Value) else view_dir
        x, y, z = (ad.reshape(vd[:, i], (n, 1)) for i in range(3))
        c = c - SH_C1 * y * coef[:, 1] + SH_C1 * z * coef[:, 2] - SH_C1 * x * coef[:, 3]
    c = ad.clamp(c, 0.0, 1.0)
    return c[0] if single else c


def _cutoff_window(m2: Value, smooth: bool) -> Value | np.ndarray:
    if not smooth:
        return (m2.data <= CUTOFF_M2).astype(m2.dtype)
    # C1 taper from 1 at m2 = 8 to 0 at m2 = 9
    s = ad.clamp(m2 - (CUTOFF_M2 - 1.0), 0.0, 1.0)
    return 1.0 - 3.0 * s * s + 2.0 * s * s * s


def render(g: GaussianSet, cam: Camera | CamValues, size: tuple[int, int] | None = None,
           bg=(0.0, 0.0, 0.0), smooth_cutoff: bool | None = None) -> RenderOutput:
    """Splat ``g`` into ``cam``; differentiable w.r.t. all Gaussian fields and camera values.

    ``smooth_cutoff`` defaults to True whenever a gradient will be recorded.
    """
    cv = cam_values(cam)
    W, H = size if size is not None else (cv.width, cv.height)
    bgv = np.broadcast_to(np.asarray(bg, dtype=np.float64), (3,))
    for v in g.fields:
        if not np.all(np.isfinite(v.data)):
            raise RenderError("non-finite Gaussian parameters")
    if smooth_cutoff is None:
        smooth_cutoff = ad.is_grad_enabled() and (
            any(v.requires_grad for v in g.fields) or any(v.requires_grad for v in cv[:3]))

    P = H * W
    empty = RenderOutput(Value(np.broadcast_to(bgv, (H, W, 3)).copy()), Value(np.zeros((H, W))),
                         Value(np.zeros((H, W))))
    if g.n == 0:
        return empty

    # camera-space centres and projected means
    xc = ad.matmul(g.mu, ad.transpose(cv.R)) + cv.t
    z = xc[:, 2]
    zd = z.data
    valid = zd > Z_NEAR
    zs = ad.where(valid, z, 1.0)
    fx, fy, cx, cy = cv.K[0, 0], cv.K[1, 1], cv.K[0, 2], cv.K[1, 2]
    X, Y = xc[:, 0], xc[:, 1]
    iz = 1.0 / zs
    u = fx * X * iz + cv.K[0, 1] * Y * iz + cx
    v = fy * Y * iz + cy

    # 3D covariance R diag(s^2) R^T and its affine projection
    q = g.rot / ad.l2norm(g.rot, axis=1, keepdims=True)
    Rg = quat_to_rotmat_ad(q)
    M = Rg * ad.reshape(ad.exp(g.scale_log), (-1, 1, 3))
    sigma = ad.matmul(M, ad.swapaxes(M, 1, 2))
    zero = Value(np.zeros(g.n))
    J = ad.stack([ad.stack([fx * iz, zero, -fx * X * iz * iz], axis=1),
                  ad.stack([zero, fy * iz, -fy * Y * iz * iz], axis=1)], axis=1)
    T = ad.matmul(J, cv.R)
    cov = ad.matmul(ad.matmul(T, sigma), ad.swapaxes(T, 1, 2)) + DILATION * np.eye(2)
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b

    # culling: behind camera, or 3-sigma footprint more than 0.5px outside the image
    ad_, bd_, cd_, dd_ = a.data, b.data, c.data, det.data
    lam = 0.5 * (ad_ + cd_) + np.sqrt(np.maximum(0.25 * (ad_ - cd_) ** 2 + bd_ * bd_, 0.0))
    r = 3.0 * np.sqrt(np.maximum(lam, 0.0))
    ud, vd = u.data, v.data
    keep = valid & (dd_ > 0) & (ud + r >= -0.5) & (ud - r <= W + 0.5) \
        & (vd + r >= -0.5) & (vd - r <= H + 0.5)
    if not keep.any():
        return empty
    order = np.argsort(np.where(keep, zd, np.inf), kind="stable")[: int(keep.sum())]

    A = (c / det)[order]
    B = (-b / det)[order]
    C = (a / det)[order]
    px = (np.arange(P) % W + 0.5)[None, :]
    py = (np.arange(P) // W + 0.5)[None, :]
    dx = px - ad.reshape(u[order], (-1, 1))
    dy = py - ad.reshape(v[order], (-1, 1))
    m2 = ad.reshape(A, (-1, 1)) * dx * dx + 2.0 * ad.reshape(B, (-1, 1)) * dx * dy \
        + ad.reshape(C, (-1, 1)) * dy * dy
    opac = ad.reshape(ad.sigmoid(g.opacity_logit[order]), (-1, 1))
    alpha = ad.clamp(opac * ad.exp(-0.5 * m2) * _cutoff_window(m2, smooth_cutoff), None, ALPHA_MAX)

    log_trans = ad.log(1.0 - alpha)
    Tk = ad.exp(ad.cumsum(log_trans, axis=0, exclusive=True))
    wgt = alpha * Tk
    t_final = ad.exp(ad.vsum(log_trans, axis=0))

    center = -ad.matmul(ad.transpose(cv.R), cv.t)
    dirs = g.mu[order] - center
    dirs = dirs / ad.l2norm(dirs, axis=1, keepdims=True)
    colors = sh_to_color(g.sh[order], dirs, g.degree)

    wT = ad.transpose(wgt)
    rgb = ad.matmul(wT, colors) + ad.reshape(t_final, (-1, 1)) * bgv
    acc = ad.vsum(wgt, axis=0)
    dnum = ad.matmul(wT, zs[order])
    has = acc.data > 1e-10
    depth = ad.where(has, dnum / ad.where(has, acc, 1.0), 0.0)
    return RenderOutput(ad.reshape(rgb, (H, W, 3)), ad.reshape(depth, (H, W)),
                        ad.reshape(acc, (H, W)))


def depth_map(g: GaussianSet, cam: Camera | CamValues, size: tuple[int, int] | None = None) -> Value:
    """Alpha-normalised expected depth; 0 where nothing was splatted."""
    return render(g, cam, size).depth


def render_np(g: GaussianSet, cam: Camera, size=None, bg=(0.0, 0.0, 0.0)) -> np.ndarray:
    with ad.no_grad():
        return render(g, cam, size, bg).rgb.data
