"""Pinhole cameras, Plücker rays and the mappings between them.

Conventions: world-to-camera ``x_C = R x_W + t``; pixel coordinates put the
centre of pixel ``(col, row)`` at ``(col + 0.5, row + 0.5)``; rays are stored
canonically with unit direction.  Functions suffixed ``_ad`` operate on
:class:`~splatpose.autodiff.Value` and are differentiable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value

Z_NEAR = 1e-4
MIN_RAYS = 6


class CameraError(ValueError):
    pass


class DegenerateRaysError(CameraError):
    pass


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices ``[v]_x`` for ``v`` of shape ``(..., 3)``."""
    v = np.asarray(v, dtype=np.float64)
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], -1),
        np.stack([v[..., 2], z, -v[..., 0]], -1),
        np.stack([-v[..., 1], v[..., 0], z], -1),
    ], -2)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    R = np.asarray(R, dtype=np.float64)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


def axis_angle_to_matrix(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w)
    if th < 1e-12:
        return np.eye(3) + skew(w)
    k = skew(w / th)
    return np.eye(3) + np.sin(th) * k + (1 - np.cos(th)) * k @ k


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return quat_to_matrix(q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


@dataclass
class Camera:
    """Pinhole camera; ``K`` has zero skew, ``(R, t)`` map world to camera."""

    K: np.ndarray
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 64
    height: int = 64

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    @classmethod
    def identity(cls, K: np.ndarray | None = None, width: int = 64, height: int = 64) -> Camera:
        return cls(np.eye(3) if K is None else K, np.eye(3), np.zeros(3), width, height)

    @classmethod
    def from_center(cls, K, R, center, width=64, height=64) -> Camera:
        R = np.asarray(R, dtype=np.float64)
        return cls(K, R, -R @ np.asarray(center, dtype=np.float64), width, height)

    def validate(self, tol: float = 1e-9) -> None:
        R, K = self.R, self.K
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(K)) or not np.all(np.isfinite(self.t)):
            raise CameraError("non-finite camera parameters")
        if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
            raise CameraError("R is not a proper rotation")
        if abs(K[1, 0]) + abs(K[2, 0]) + abs(K[2, 1]) > 0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise CameraError("K must be upper triangular with positive focal lengths")
        if abs(K[2, 2] - 1.0) > tol:
            raise CameraError("K[2, 2] must be 1")

    def relative_to(self, ref: Camera) -> Camera:
        """This camera expressed in the camera frame of ``ref``."""
        R = self.R @ ref.R.T
        return Camera(self.K, R, self.t - R @ ref.t, self.width, self.height)

    def to_dict(self) -> dict:
        return {"K": self.K.reshape(-1).tolist(), "R": self.R.reshape(-1).tolist(),
                "t": self.t.tolist(), "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> Camera:
        try:
            return cls(np.array(d["K"], float).reshape(3, 3), np.array(d["R"], float).reshape(3, 3),
                       np.array(d["t"], float), int(d["width"]), int(d["height"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise CameraError(f"malformed camera record: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> Camera:
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_intrinsics(width: int, height: int, fov_deg: float = 60.0) -> np.ndarray:
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    return np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])


# ---------------------------------------------------------------------------
# rays
# ---------------------------------------------------------------------------

@dataclass
class PlueckerRay:
    d: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        self.m = np.asarray(self.m, dtype=np.float64)


@dataclass
class RaySet:
    """``N`` Plücker rays (``d``, ``m``: ``(N, 3)``) and their image targets ``uv`` ``(N, 2)``."""

    d: np.ndarray
    m: np.ndarray
    uv: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64).reshape(-1, 3)
        self.m = np.asarray(self.m, dtype=np.float64).reshape(-1, 3)
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        if not (len(self.d) == len(self.m) == len(self.uv)):
            raise CameraError("rays and uv lengths differ")

    def __len__(self) -> int:
        return len(self.d)

    @property
    def plucker(self) -> np.ndarray:
        return np.concatenate([self.d, self.m], axis=1)

    def to_json(self) -> list[dict]:
        return [{"d": d.tolist(), "m": m.tolist(), "uv": u.tolist()}
                for d, m, u in zip(self.d, self.m, self.uv)]

    @classmethod
    def from_json(cls, items: list[dict]) -> RaySet:
        try:
            return cls([r["d"] for r in items], [r["m"] for r in items], [r["uv"] for r in items])
        except (KeyError, TypeError) as exc:
            raise CameraError(f"malformed ray record: {exc}") from exc


def normalize_ray(d: np.ndarray, m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale rays to unit direction; the moment is scaled by the same factor."""
    d = np.asarray(d, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise CameraError("zero-direction ray")
    return d / n, m / n


def _homogeneous(uv: np.ndarray) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    if uv.shape[-1] == 3:
        return uv / uv[..., 2:3]
    return np.concatenate([uv, np.ones(uv.shape[:-1] + (1,))], axis=-1)


def cameras_to_rays(cam: Camera, uv: np.ndarray) -> RaySet:
    """Rays from the camera centre through pixel points ``uv`` (``(N, 2)`` or homogeneous)."""
    u = _homogeneous(uv)
    if abs(np.linalg.det(cam.K)) < 1e-300:
        raise CameraError("singular intrinsics")
    d = (np.linalg.solve(cam.K, u.T)).T @ cam.R
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    m = np.cross(cam.center, d)
    return RaySet(d, m, u[:, :2])


def rays_to_camera_center(rays: RaySet) -> tuple[np.ndarray, float]:
    """Least-squares common point of the rays; returns ``(c, residual_rms)``."""
    if len(rays) < 2:
        raise CameraError("need at least two rays")
    # p x d = m  <=>  -[d]_x p = m
    A = -skew(rays.d).reshape(-1, 3)
    b = rays.m.reshape(-1)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[-1] < 1e-8 * s[0]:
        raise DegenerateRaysError("ray directions are (nearly) parallel")
    c = Vt.T @ ((U.T @ b) / s)
    res = A @ c - b
    return c, float(np.sqrt(np.mean(res * res)))


def _similarity_normalizer(uv: np.ndarray) -> np.ndarray:
    mu = uv.mean(axis=0)
    spread = np.sqrt(((uv - mu) ** 2).sum(axis=1).mean())
    s = np.sqrt(2.0) / max(spread, 1e-12)
    return np.array([[s, 0, -s * mu[0]], [0, s, -s * mu[1]], [0, 0, 1.0]])


def rq_decompose(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Factor ``M = s K R`` with ``K`` upper triangular, positive diagonal, ``K[2,2] = 1``.

    ``R`` is a proper rotation.  ``s`` is ``(M R^T)[2, 2]``; it is negative
    exactly when ``det(M) < 0``.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (3, 3) or not np.all(np.isfinite(M)):
        raise CameraError("rq_decompose expects a finite 3x3 matrix")
    if abs(np.linalg.det(M)) <= 1e-14 * max(np.abs(M).max(), 1e-300) ** 3:
        raise CameraError("singular matrix")
    P = np.eye(3)[::-1]
    Q, U = np.linalg.qr((P @ M).T)
    K = P @ U.T @ P
    R = P @ Q.T
    D = np.diag(np.sign(np.diag(K)))
    K, R = K @ D, D @ R
    if np.linalg.det(R) < 0:
        R = -R
        K = -K
    K = K / K[2, 2]
    K[1, 0] = K[2, 0] = K[2, 1] = 0.0
    return K, R


def rays_to_camera(rays: RaySet, known_K: np.ndarray | None = None,
                   image_size: tuple[int, int] | None = None) -> Camera:
    """Recover ``(K, R, t)`` from rays and the pixel points they target."""
    n = len(rays)
    if n < MIN_RAYS:
        raise CameraError(f"rays_to_camera needs at least {MIN_RAYS} rays, got {n}")
    c, _ = rays_to_camera_center(rays)
    d = rays.d / np.linalg.norm(rays.d, axis=1, keepdims=True)
    if known_K is not None:
        K = np.asarray(known_K, dtype=np.float64)
        v = np.linalg.solve(K, _homogeneous(rays.uv).T).T
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        U, _, Vt = np.linalg.svd(v.T @ d)
        D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
        R = U @ D @ Vt
    else:
        T = _similarity_normalizer(rays.uv)
        u = _homogeneous(rays.uv) @ T.T
        # (H d) x u = -[u]_x (I kron d^T) vec(H)
        Ad = np.einsum("ij,nk->nijk", np.eye(3), d).reshape(n, 3, 9)
        A = (-skew(u) @ Ad).reshape(-1, 9)
        _, s, Vt = np.linalg.svd(A)
        if s[-2] < 1e-10 * s[0]:
            raise DegenerateRaysError("rank-deficient projection constraints")
        M = np.linalg.solve(T, Vt[-1].reshape(3, 3))
        if np.linalg.det(M) < 0:
            M = -M
        K, R = rq_decompose(M)
        K[0, 1] = 0.0
    if image_size is None:
        image_size = (max(1, int(round(2 * K[0, 2]))), max(1, int(round(2 * K[1, 2]))))
    return Camera(K, R, -R @ c, *image_size)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project_points(cam: Camera, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pinhole projection; returns ``(uv, depth, valid)``."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    xc = pts @ cam.R.T + cam.t
    z = xc[:, 2]
    valid = z > Z_NEAR
    zs = np.where(valid, z, 1.0)
    p = xc @ cam.K.T
    uv = p[:, :2] / zs[:, None]
    uv = np.where(valid[:, None], uv, np.clip(uv, [0, 0], [cam.width, cam.height]))
    return uv, z, valid


class CamValues(NamedTuple):
    """Differentiable camera parameters."""

    K: Value
    R: Value
    t: Value
    width: int
    height: int


def cam_values(cam: Camera | CamValues, requires_grad: bool = False) -> CamValues:
    if isinstance(cam, CamValues):
        return cam
    return CamValues(Value(cam.K, requires_grad), Value(cam.R, requires_grad),
                     Value(cam.t, requires_grad), cam.width, cam.height)


def camera_from_values(cv: CamValues) -> Camera:
    return Camera(cv.K.data, cv.R.data, cv.t.data, cv.width, cv.height)


def project_points_ad(cam: Camera | CamValues, pts: Value) -> tuple[Value, Value, np.ndarray]:
    cv = cam_values(cam)
    xc = ad.matmul(pts, ad.transpose(cv.R)) + cv.t
    z = xc[:, 2]
    valid = z.data > Z_NEAR
    zs = ad.where(valid, z, 1.0)
    p = ad.matmul(xc, ad.transpose(cv.K))
    uv = p[:, :2] / ad.reshape(zs, (-1, 1))
    if not valid.all():
        uv = ad.where(valid[:, None], uv,
                      ad.clamp(uv, 0.0, float(max(cv.width, cv.height))).detach())
    return uv, z, valid


def rays_from_camera_ad(cam: Camera | CamValues, uv: np.ndarray | Value) -> tuple[Value, Value]:
    """Differentiable canonical rays ``(d, m)`` for pixel targets ``uv`` ``(N, 2)``."""
    cv = cam_values(cam)
    uv = ad.as_value(uv)
    u = ad.concat([uv, np.ones((uv.shape[0], 1))], axis=1)
    d = ad.matmul(ad.matmul(u, ad.transpose(ad.inv(cv.K))), cv.R)
    d = d / ad.l2norm(d, axis=1, keepdims=True)
    c = -ad.matmul(ad.transpose(cv.R), cv.t)
    m = ad.cross(c, d)
    return d, m


def rays_center_ad(d: Value, m: Value) -> Value:
    """Closed-form least-squares ray intersection (normal equations)."""
    dd = ad.vsum(d * d, axis=1)
    A = ad.vsum(ad.reshape(dd, (-1, 1, 1)) * np.eye(3)
                - ad.reshape(d, (-1, 3, 1)) * ad.reshape(d, (-1, 1, 3)), axis=0)
    b = ad.vsum(ad.cross(d, m), axis=0)
    return ad.matmul(ad.inv(A), b)


def rays_to_camera_ad(d: Value, m: Value, uv: np.ndarray, K: np.ndarray,
                      image_size: tuple[int, int]) -> CamValues:
    """Known-intrinsics ray solve, differentiable in ``d`` and ``m``."""
    if d.shape[0] < MIN_RAYS:
        raise CameraError(f"rays_to_camera needs at least {MIN_RAYS} rays, got {d.shape[0]}")
    c = rays_center_ad(d, m)
    v = np.linalg.solve(K, _homogeneous(np.asarray(uv)).T).T
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    dn = d / ad.l2norm(d, axis=1, keepdims=True)
    R = ad.polar_rotation(ad.matmul(ad.transpose(Value(v)), dn))
    t = -ad.matmul(R, c)
    return CamValues(Value(K), R, t, *image_size)


def so3_exp_ad(w: Value) -> Value:
    """Rodrigues map of an axis-angle 3-vector, safe at zero."""
    th2 = ad.vsum(w * w)
    small = th2.data < 1e-10
    th2s = ad.where(small, 1.0, th2)
    th = ad.sqrt(th2s)
    a = ad.where(small, 1.0 - th2 / 6.0, ad.sin(th) / th)
    b = ad.where(small, 0.5 - th2 / 24.0, (1.0 - ad.cos(th)) / th2s)
    z = Value(0.0)
    kx = ad.stack([ad.stack([z, -w[2], w[1]]), ad.stack([w[2], z, -w[0]]),
                   ad.stack([-w[1], w[0], z])])
    return np.eye(3) + a * kx + b * ad.matmul(kx, kx)


def perturb_camera_ad(cam: Camera, xi: Value) -> CamValues:
    """Apply ``xi = (axis-angle, translation)`` in the camera frame to ``cam``."""
    dR = so3_exp_ad(xi[:3])
    R = ad.matmul(dR, cam.R)
    t = ad.matmul(dR, cam.t) + xi[3:]
    return CamValues(Value(cam.K), R, t, cam.width, cam.height)


# ---------------------------------------------------------------------------
# pose metrics
# ---------------------------------------------------------------------------

@dataclass
class PoseError:
    rot_deg: float
    trans_deg: float

    @property
    def scalar(self) -> float:
        return max(self.rot_deg, self.trans_deg)


def pose_error(est: Camera, gt: Camera) -> PoseError:
    rot = np.degrees(rotation_angle(est.R @ gt.R.T))
    ne, ng = np.linalg.norm(est.t), np.linalg.norm(gt.t)
    if ng < 1e-9:
        trans = 0.0 if ne < 1e-9 else 180.0
    elif ne < 1e-9:
        trans = 180.0
    else:
        # atan2 keeps full precision for nearly parallel vectors
        trans = float(np.degrees(np.arctan2(np.linalg.norm(np.cross(est.t, gt.t)), est.t @ gt.t)))
    return PoseError(float(rot), float(trans))


AUC_NOISE_FLOOR_DEG = 1e-9


def pose_auc(errors: Sequence[PoseError | float], thresholds: Sequence[float] = (5, 10, 20)) -> list[float]:
    """Normalised area under the cumulative-accuracy curve, integrated exactly.

    Errors below ``AUC_NOISE_FLOOR_DEG`` are floating-point noise of an exact
    solve and count as zero, so a perfect estimate scores exactly 1.
    """
    if len(errors) == 0:
        raise ValueError("pose_auc needs at least one error")
    e = np.array([x.scalar if isinstance(x, PoseError) else float(x) for x in errors])
    e = np.where(e < AUC_NOISE_FLOOR_DEG, 0.0, e)
    out = []
    for tau in thresholds:
        if tau <= 0:
            raise ValueError("thresholds must be positive")
        out.append(float(np.mean(np.maximum(0.0, tau - e)) / tau))
    return out


# ---------------------------------------------------------------------------
# evaluation-time pose alignment
# ---------------------------------------------------------------------------

def align_target_pose(g, target_img: np.ndarray, init: Camera, iters: int = 100, step: float = 1e-2,
                      bg=(0.0, 0.0, 0.0)) -> Camera:
    """Refine ``init`` so the rendering of ``g`` matches ``target_img`` (MSE).

    Optimises a local 6-dof perturbation with Adam moments and returns the
    best camera seen, so the result is never worse than ``init``.
    """
    from .render import render  # local import: render depends on this module

    target = np.asarray(target_img, dtype=np.float64)
    size = (init.width, init.height)
    xi = Value(np.zeros(6), requires_grad=True)
    m, v = np.zeros(6), np.zeros(6)
    b1, b2 = 0.9, 0.999
    best_cam, best_loss = init, None
    for it in range(iters + 1):
        cv = perturb_camera_ad(init, xi)
        out = render(g, cv, size, bg)
        loss = ad.mean((out.rgb - target) ** 2)
        lv = float(loss.data)
        if not np.isfinite(lv):
            raise ad.NonFiniteError(f"non-finite alignment loss at iteration {it}")
        if best_loss is None or lv < best_loss:
            best_loss, best_cam = lv, camera_from_values(cv) if it else init
        if it == iters:
            break
        xi.grad = None
        ad.backward(loss)
        gr = xi.grad if xi.grad is not None else np.zeros(6)
        m = b1 * m + (1 - b1) * gr
        v = b2 * v + (1 - b2) * gr * gr
        mh, vh = m / (1 - b1 ** (it + 1)), v / (1 - b2 ** (it + 1))
        xi.data = xi.data - step * mh / (np.sqrt(vh) + 1e-8)
    return best_cam
