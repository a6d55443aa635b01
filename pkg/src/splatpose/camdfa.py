"""Camera-aware multi-view deformable-attention decoder.

The decoder keeps two query sets: 3D queries, one per Gaussian, and camera
queries, one set per input view.  Each layer samples image features around
the projections of the Gaussian centres (the reference points), fuses the
views, refines the camera queries against the reference view, and finally
applies residual heads to the Gaussians and to the per-view Plücker rays.
Cameras are re-solved from the rays after every layer.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .camgeom import (Camera, CameraError, CamValues, RaySet, cam_values, camera_from_values,
                      cameras_to_rays, default_intrinsics, project_points_ad, rays_from_camera_ad,
                      rays_to_camera, rays_to_camera_ad, so3_exp_ad)
from .nn import FFN, MLP, Attention, LayerNorm, Linear, Module, parameter
from .render import GaussianSet, sh_bands

log = logging.getLogger(__name__)

CAMERA_HEADS = ("refray", "pixel", "6d")


class DecoderError(ValueError):
    pass


@dataclass
class DecoderConfig:
    """Hyper-parameters of the encoder and decoder.

    ``image_size`` is ``(width, height)``.  ``camera_head`` picks how camera
    residuals are produced: ``"refray"`` (one ray per camera query),
    ``"pixel"`` (one ray per feature cell) or ``"6d"`` (one pose update per
    view).
    """

    L: int = 4
    D: int = 64
    N_3d: int = 1024
    N_cam: int = 256
    heads: int = 4
    n_sample: int = 4
    V: int = 2
    patch: int = 8
    enc_blocks: int = 2
    k_down: int = 64
    image_size: tuple[int, int] = (256, 256)
    sh_degree: int = 0
    camera_head: str = "refray"
    camdfa: bool = True
    pose_input: str = "predicted"
    intrinsics: str = "known"
    normalize_fusion: bool = False
    differentiable_solve: bool = True
    init_depth: float = 1.0
    init_scale: float = 0.08
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.validate()

    def validate(self) -> None:
        for name in ("L", "D", "N_3d", "N_cam", "heads", "n_sample", "V", "patch", "k_down"):
            if getattr(self, name) <= 0:
                raise DecoderError(f"{name} must be positive")
        if self.enc_blocks < 0:
            raise DecoderError("enc_blocks must be non-negative")
        if self.N_cam > self.N_3d:
            raise DecoderError(f"N_cam={self.N_cam} exceeds N_3d={self.N_3d}")
        if self.k_down > self.N_3d:
            raise DecoderError(f"k_down={self.k_down} exceeds N_3d={self.N_3d}")
        if self.D % self.heads:
            raise DecoderError(f"D={self.D} not divisible by heads={self.heads}")
        w, h = self.image_size
        if w % self.patch or h % self.patch:
            raise DecoderError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.camera_head not in CAMERA_HEADS:
            raise DecoderError(f"camera_head must be one of {CAMERA_HEADS}")
        if self.pose_input not in ("predicted", "gt"):
            raise DecoderError("pose_input must be 'predicted' or 'gt'")
        if self.intrinsics not in ("known", "free"):
            raise DecoderError("intrinsics must be 'known' or 'free'")

    @property
    def grid(self) -> tuple[int, int]:
        """Feature grid ``(H_f, W_f)``."""
        return self.image_size[1] // self.patch, self.image_size[0] // self.patch

    @property
    def n_cam_queries(self) -> int:
        hf, wf = self.grid
        return hf * wf if self.camera_head == "pixel" else self.N_cam

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DecoderConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DecoderError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> DecoderConfig:
        return replace(self, **kw)

    @classmethod
    def desk(cls, **kw) -> DecoderConfig:
        """Small configuration sized for 64x64 images on one CPU core."""
        base = dict(L=2, D=32, N_3d=96, N_cam=24, heads=4, n_sample=4, V=2, patch=8,
                    enc_blocks=1, k_down=32, image_size=(64, 64))
        base.update(kw)
        return cls(**base)

    @classmethod
    def miniature(cls, **kw) -> DecoderConfig:
        """The tiny configuration used by the end-to-end gradient check."""
        base = dict(L=2, D=8, N_3d=32, N_cam=8, heads=2, n_sample=2, V=2, patch=4,
                    enc_blocks=1, k_down=8, image_size=(16, 16))
        base.update(kw)
        return cls(**base)


@dataclass
class FeatureMaps:
    """Per-view feature grids ``f`` of shape ``(V, H_f, W_f, D)``."""

    f: Value
    pos: Value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.f.shape

    def view(self, i: int) -> Value:
        return self.f[i]


@dataclass
class DecoderState:
    """Queries, Gaussians, rays and cameras after one decoder layer.

    ``rays_d``/``rays_m`` are ``(V, N_c, 3)`` and pair with the pixel
    anchors ``anchors`` ``(V, N_c, 2)``.  ``cam_idx`` lists the Gaussians
    whose reference points drive the camera queries (``None`` for the
    per-pixel camera head).
    """

    q3d: Value
    qcam: Value
    G: GaussianSet
    rays_d: Value
    rays_m: Value
    cams: list[CamValues]
    anchors: np.ndarray
    cam_idx: np.ndarray | None
    fallbacks: int = 0
    refpts: list[np.ndarray] = field(default_factory=list)

    @property
    def V(self) -> int:
        return len(self.cams)

    def rays(self, i: int) -> RaySet:
        return RaySet(self.rays_d.data[i], self.rays_m.data[i], self.anchors[i])

    def cameras(self) -> list[Camera]:
        return [camera_from_values(c) for c in self.cams]

    def check(self) -> None:
        n, nc = self.q3d.shape[0], self.qcam.shape[1]
        if self.G.n != n:
            raise DecoderError(f"{self.G.n} Gaussians for {n} 3D queries")
        if self.rays_d.shape[:2] != (self.V, nc) or self.anchors.shape[:2] != (self.V, nc):
            raise DecoderError("rays and camera queries are misaligned")


# ---------------------------------------------------------------------------
# farthest point sampling
# ---------------------------------------------------------------------------

def fps(points: np.ndarray, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling with lowest-index tie breaking."""
    pts = np.asarray(points, dtype=np.float64)
    pts = pts.reshape(len(pts), -1)
    M = len(pts)
    if not 1 <= k <= M:
        raise ValueError(f"fps needs 1 <= k <= {M}, got k={k}")
    if not 0 <= seed_index < M:
        raise ValueError(f"seed_index {seed_index} out of range")
    sel = np.empty(k, dtype=np.int64)
    sel[0] = seed_index
    dist = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    dist[seed_index] = -np.inf
    for j in range(1, k):
        nxt = int(np.argmax(dist))
        sel[j] = nxt
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
        dist[sel[: j + 1]] = -np.inf
    return sel


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(V, H, W, 3)`` to ``(V, H/p * W/p, 3 p^2)`` row-major patches."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise DecoderError(f"expected (V, H, W, 3) images, got {images.shape}")
    V, H, W, _ = images.shape
    if H % patch or W % patch:
        raise DecoderError(f"image size {W}x{H} not divisible by patch size {patch}")
    x = images.reshape(V, H // patch, patch, W // patch, patch, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(V, (H // patch) * (W // patch), patch * patch * 3)


class SelfAttentionBlock(Module):
    """Pre-norm self-attention with residual, followed by an FFN."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, zero_out: bool = True):
        self.norm = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng, zero_out=zero_out)
        self.ffn = FFN(dim, rng)

    def forward(self, x, kv_index: np.ndarray | None = None) -> Value:
        h = self.norm(x)
        kv = h if kv_index is None else h[..., kv_index, :]
        return self.ffn(x + self.attn(h, kv))


class PatchEncoder(Module):
    """Linear patch embedding, learned positions and a few self-attention blocks per view."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        hf, wf = cfg.grid
        self.patch = cfg.patch
        self.grid = (hf, wf)
        self.embed = Linear(3 * cfg.patch ** 2, cfg.D, rng)
        self.pos = parameter(rng.normal(0.0, 0.02, (hf * wf, cfg.D)))
        self.blocks = [SelfAttentionBlock(cfg.D, cfg.heads, rng, zero_out=False)
                       for _ in range(cfg.enc_blocks)]

    def forward(self, images: np.ndarray) -> FeatureMaps:
        x = self.embed(patchify(images, self.patch)) + self.pos
        for blk in self.blocks:
            x = blk(x)
        V = x.shape[0]
        return FeatureMaps(ad.reshape(x, (V, *self.grid, x.shape[-1])), self.pos)


class DeformableAttention(Module):
    """Key-free multi-head deformable attention over one view's feature grid."""

    def __init__(self, dim: int, heads: int, n_sample: int, rng: np.random.Generator):
        self.heads, self.n_sample = heads, n_sample
        self.offsets = Linear(dim, heads * n_sample * 2, rng, zero=True)
        # start the samples on small rings around the reference point, one direction per head
        ang = 2 * np.pi * np.arange(heads) / heads
        ring = np.stack([np.cos(ang), np.sin(ang)], axis=-1)[:, None, :] \
            * (0.5 * np.arange(n_sample))[None, :, None]
        self.offsets.bias.data = ring.reshape(-1)
        self.logits = Linear(dim, heads * n_sample, rng, zero=True)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng, zero=True)

    def forward(self, q, ref, f, valid: np.ndarray | None = None) -> Value:
        return deformable_attention(q, ref, f, self, valid)


def deformable_attention(q, ref, f, dfa: DeformableAttention, valid: np.ndarray | None = None) -> Value:
    """Sample ``f`` around reference points and add the weighted sum to ``q``.

    Parameters
    ----------
    q : (N, D) queries.
    ref : (N, 2) reference points, ``(x, y)`` normalised to [0, 1] over the image.
    f : (H_f, W_f, D) feature grid.
    valid : optional (N,) mask; masked queries are returned unchanged.
    """
    q, ref, f = ad.as_value(q), ad.as_value(ref), ad.as_value(f)
    N, D = q.shape
    hf, wf, Df = f.shape
    if Df != D or ref.shape != (N, 2):
        raise ad.ShapeError("deformable_attention", q.shape, ref.shape, f.shape)
    if not np.all(np.isfinite(ref.data)):
        raise DecoderError("non-finite reference points")
    h, S = dfa.heads, dfa.n_sample
    # feature cell j is centred at normalised coordinate (j + 0.5) / W_f
    base = ref * np.array([wf, hf], dtype=np.float64) - 0.5
    off = ad.reshape(dfa.offsets(q), (N, h, S, 2))
    pts = ad.reshape(base, (N, 1, 1, 2)) + off
    attn = ad.softmax(ad.reshape(dfa.logits(q), (N, h, S)), axis=-1)
    vals = ad.transpose(ad.reshape(dfa.value(f), (hf, wf, h, D // h)), (2, 0, 1, 3))
    samples = ad.bilinear_sample(vals, ad.transpose(pts, (1, 0, 2, 3)))  # (h, N, S, D/h)
    mixed = ad.vsum(samples * ad.reshape(ad.transpose(attn, (1, 0, 2)), (h, N, S, 1)), axis=2)
    out = q + dfa.out(ad.reshape(ad.transpose(mixed, (1, 0, 2)), (N, D)))
    if valid is not None and not np.all(valid):
        out = ad.where(np.asarray(valid, dtype=bool)[:, None], out, q)
    return out


def camera_modulation(q3d, qcam_i, mlp: MLP) -> Value:
    """adaLN: ``LayerNorm(q3d) * (1 + scale) + shift`` with ``(scale, shift)`` from pooled camera queries."""
    q3d, qcam_i = ad.as_value(q3d), ad.as_value(qcam_i)
    D = q3d.shape[-1]
    if qcam_i.shape[-1] != D:
        raise ad.ShapeError("camera_modulation", q3d.shape, qcam_i.shape)
    ss = mlp(ad.mean(qcam_i, axis=0))
    scale, shift = ss[:D], ss[D:]
    return ad.layernorm(q3d) * (1.0 + scale) + shift


def fuse_views(q_views: Sequence[Value], mlp: MLP, normalize: bool = False) -> Value:
    """Per-query weighted sum ``sum_i sigmoid(MLP(Q_i)) * Q_i`` (unnormalised by default)."""
    if len(q_views) == 0:
        raise DecoderError("fuse_views needs at least one view")
    ws = [ad.sigmoid(mlp(q)) for q in q_views]
    total = ws[0] * q_views[0]
    for w, q in zip(ws[1:], q_views[1:]):
        total = total + w * q
    if normalize:
        wsum = ws[0]
        for w in ws[1:]:
            wsum = wsum + w
        total = total / wsum
    return total


def update_camera_queries(qcam: Sequence[Value], refpts: Sequence[Value], feats: FeatureMaps,
                          dfa: DeformableAttention, xattn: Attention,
                          valid: Sequence[np.ndarray] | None = None) -> list[Value]:
    """Refine each view's camera queries and cross-attend them to the reference view.

    View 0 is the reference.  For a non-reference view ``i`` the reference
    queries are first re-sampled in ``F_i`` at the reference view's points,
    then view ``i``'s queries attend densely to them.
    """
    V = len(qcam)
    if V < 2:
        raise DecoderError("update_camera_queries needs at least two views")
    valid = valid if valid is not None else [None] * V
    out = [dfa(qcam[0], refpts[0], feats.view(0), valid[0])]
    for i in range(1, V):
        qi = dfa(qcam[i], refpts[i], feats.view(i), valid[i])
        qref = dfa(qcam[0], refpts[0], feats.view(i), valid[0])
        out.append(qi + xattn(qi, qref))
    return out


def efficient_self_attention(q3d, centers: np.ndarray, k_down: int, block: SelfAttentionBlock) -> Value:
    """Self-attention whose keys and values come from an FPS subset of the queries, then FFN."""
    q3d = ad.as_value(q3d)
    if k_down > q3d.shape[0]:
        raise DecoderError(f"k_down={k_down} exceeds the {q3d.shape[0]} queries")
    idx = fps(centers, k_down, 0)
    return block(q3d, kv_index=idx)


def gaussian_param_width(degree: int) -> int:
    return 3 + 3 + 4 + 1 + 3 * sh_bands(degree)


def apply_gaussian_residual(g: GaussianSet, delta: Value) -> GaussianSet:
    """Add a head output ``(N, 11 + 3 bands)`` to the unconstrained Gaussian parameters."""
    w = gaussian_param_width(g.degree)
    if delta.shape != (g.n, w):
        raise ad.ShapeError("apply_gaussian_residual", delta.shape, (g.n, w))
    return GaussianSet(g.mu + delta[:, 0:3], g.rot + delta[:, 6:10], g.scale_log + delta[:, 3:6],
                       g.opacity_logit + delta[:, 10], g.sh + delta[:, 11:], g.degree)


def normalize_rays_ad(d, m) -> tuple[Value, Value]:
    """Differentiable :func:`camgeom.normalize_ray` over the last axis."""
    n = ad.l2norm(d, axis=-1, keepdims=True)
    if np.any(n.data <= 1e-12):
        raise CameraError("zero-direction ray")
    return d / n, m / n


def orthogonalize_moment(d, m) -> Value:
    """Remove the component of ``m`` along the unit direction ``d``."""
    return m - ad.vsum(d * m, axis=-1, keepdims=True) * d


def apply_ray_residual(d, m, delta) -> tuple[Value, Value]:
    """``normalize_ray(R + dR)`` followed by moment re-orthogonalisation."""
    d, m = normalize_rays_ad(d + delta[..., :3], m + delta[..., 3:])
    return d, orthogonalize_moment(d, m)


def perturb_cam_values(cv: CamValues, xi: Value) -> CamValues:
    """Left-multiply by ``exp(w)`` and add ``dt``; ``xi = (w, dt)``."""
    dR = so3_exp_ad(xi[:3])
    return CamValues(cv.K, ad.matmul(dR, cv.R), ad.matmul(dR, cv.t) + xi[3:], cv.width, cv.height)


def identity_cam(K: np.ndarray, size: tuple[int, int]) -> CamValues:
    return CamValues(Value(np.asarray(K, dtype=np.float64)), Value(np.eye(3)), Value(np.zeros(3)),
                     *size)


def reference_points(cv: CamValues, mu: Value) -> tuple[Value, np.ndarray]:
    """Projected centres normalised to [0, 1] (clamped) and the validity mask."""
    uv, _, valid = project_points_ad(cv, mu)
    rel = uv / np.array([cv.width, cv.height], dtype=np.float64)
    return ad.clamp(rel, 0.0, 1.0), valid


# ---------------------------------------------------------------------------
# the decoder
# ---------------------------------------------------------------------------

class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        D = cfg.D
        self.cfg = cfg
        if cfg.camdfa:
            self.modulation = MLP([D, D, 2 * D], rng, zero_last=True)
            self.dfa3d = DeformableAttention(D, cfg.heads, cfg.n_sample, rng)
            self.fuse = MLP([D, D, 1], rng, zero_last=True)
            self.dfa_cam = DeformableAttention(D, cfg.heads, cfg.n_sample, rng)
            self.xattn = Attention(D, cfg.heads, rng, zero_out=True)
        self.sa3d = SelfAttentionBlock(D, cfg.heads, rng)
        self.sacam = SelfAttentionBlock(D, cfg.heads, rng)
        self.head_3d = MLP([D, D, gaussian_param_width(cfg.sh_degree)], rng, zero_last=True)
        self.head_cam = MLP([D, D, 6], rng, zero_last=True)


class CaMDFA(Module):
    """Encoder plus an ``L``-layer decoder producing Gaussians and per-view cameras.

    Call :meth:`forward` with ``(V, H, W, 3)`` images and per-view
    intrinsics.  All cameras are relative to view 0, whose extrinsics stay
    at the identity.
    """

    def __init__(self, cfg: DecoderConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        D = cfg.D
        self.encoder = PatchEncoder(cfg, rng)
        self.cam_embed = parameter(rng.normal(0.0, 0.02, (cfg.n_cam_queries, D)))
        self.view_embed = parameter(rng.normal(0.0, 0.02, (2, D)))
        self.head_init = MLP([D, D, gaussian_param_width(cfg.sh_degree)], rng, zero_last=True)
        if not cfg.camdfa:
            self.pool_cam = Linear(D, D, rng)
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.L)]
        self.fallbacks = 0

    # -- stages -----------------------------------------------------------

    def encode(self, images: np.ndarray) -> FeatureMaps:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[0] < 1:
            raise DecoderError(f"expected (V, H, W, 3) images, got {images.shape}")
        if (images.shape[2], images.shape[1]) != self.cfg.image_size:
            raise DecoderError(f"expected images of size {self.cfg.image_size}, got "
                               f"{images.shape[2]}x{images.shape[1]}")
        return self.encoder(images)

    def intrinsics(self, Ks: Sequence[np.ndarray] | None, V: int) -> list[np.ndarray]:
        """Per-view intrinsics; the default pinhole guess when unknown or in free mode."""
        cfg = self.cfg
        if cfg.intrinsics == "free" or Ks is None:
            return [default_intrinsics(*cfg.image_size)] * V
        Ks = [np.asarray(K, dtype=np.float64) for K in Ks]
        if len(Ks) != V:
            raise DecoderError(f"{len(Ks)} intrinsics for {V} views")
        return Ks

    def init_queries(self, feats: FeatureMaps, Ks: Sequence[np.ndarray],
                     gt_cams: Sequence[Camera] | None = None) -> DecoderState:
        cfg = self.cfg
        V, hf, wf, D = feats.shape
        n_all = V * hf * wf
        if n_all < cfg.N_3d:
            raise DecoderError(f"{n_all} feature cells cannot seed {cfg.N_3d} 3D queries")
        q = ad.reshape(feats.f, (n_all, D))
        # source pixels: cell centres, unprojected at the initial depth under identity pose
        cols, rows = np.meshgrid(np.arange(wf), np.arange(hf))
        pix = np.stack([(cols.ravel() + 0.5) * cfg.patch, (rows.ravel() + 0.5) * cfg.patch], axis=1)
        base = []
        for K in Ks:
            ray = np.linalg.solve(K, np.concatenate([pix, np.ones((len(pix), 1))], axis=1).T).T
            base.append(ray / ray[:, 2:3] * cfg.init_depth)
        base = np.concatenate(base)
        delta = self.head_init(q)
        g_all = apply_gaussian_residual(self._base_gaussians(base), delta)
        # selection uses the parameter-free source points, so indices and ray
        # anchors stay constant under small weight changes
        if n_all > cfg.N_3d:
            keep = fps(base, cfg.N_3d, 0)
            q, g, base = q[keep], g_all.subset(keep), base[keep]
        else:
            g = g_all
        size = cfg.image_size
        cams = [identity_cam(K, size) for K in Ks]
        if cfg.pose_input == "gt":
            cams = [cam_values(c) for c in self._require_gt(gt_cams)]
        if cfg.camera_head == "pixel":
            cam_idx = None
            anchors = np.broadcast_to(pix, (V, *pix.shape)).copy()
            qcam = self._pixel_camera_queries(feats)
        else:
            cam_idx = fps(base, cfg.N_cam, 0)
            anchors = np.stack([project_points_ad(identity_cam(K, size), Value(base[cam_idx]))[0].data
                                for K in Ks])
            qcam = ad.stack([self.cam_embed + self.view_embed[min(i, 1)] for i in range(V)])
        if not cfg.camdfa:
            pooled = self.pool_cam(ad.mean(ad.reshape(feats.f, (V, hf * wf, D)), axis=1))
            qcam = qcam + ad.reshape(pooled, (V, 1, D))
        rd, rm = [], []
        for i in range(V):
            d, m = rays_from_camera_ad(cams[i], anchors[i])
            rd.append(d)
            rm.append(m)
        st = DecoderState(q, qcam, g, ad.stack(rd), ad.stack(rm), cams, anchors, cam_idx)
        st.check()
        return st

    def _base_gaussians(self, centers: np.ndarray) -> GaussianSet:
        n = len(centers)
        cfg = self.cfg
        return GaussianSet(centers, np.tile([1.0, 0, 0, 0], (n, 1)),
                           np.full((n, 3), np.log(cfg.init_scale)), np.zeros(n),
                           np.zeros((n, 3 * sh_bands(cfg.sh_degree))), cfg.sh_degree)

    def _pixel_camera_queries(self, feats: FeatureMaps) -> Value:
        V, hf, wf, D = feats.shape
        per_view = ad.reshape(feats.f, (V, hf * wf, D))
        emb = ad.stack([self.cam_embed + self.view_embed[min(i, 1)] for i in range(V)])
        return per_view + emb

    def _require_gt(self, gt_cams) -> list[Camera]:
        if gt_cams is None:
            raise DecoderError("pose_input='gt' needs ground-truth cameras for every view")
        return list(gt_cams)

    def decoder_layer(self, l: int, st: DecoderState, feats: FeatureMaps) -> DecoderState:
        cfg, layer = self.cfg, self.layers[l]
        V = st.V
        size = cfg.image_size
        # (a) reference points of every Gaussian in every view
        refs, valids = zip(*(reference_points(st.cams[i], st.G.mu) for i in range(V)))
        q3d, qcam_list = st.q3d, [st.qcam[i] for i in range(V)]
        if cfg.camdfa:
            # (b) per-view modulation and deformable attention, then fusion
            q_views = [layer.dfa3d(camera_modulation(q3d, qcam_list[i], layer.modulation), refs[i],
                                   feats.view(i), valids[i]) for i in range(V)]
            q3d = fuse_views(q_views, layer.fuse, cfg.normalize_fusion)
            # (c) camera queries at their reference points
            if cfg.camera_head == "pixel":
                cref = [Value(st.anchors[i] / np.array(size, dtype=np.float64)) for i in range(V)]
                cvalid = [None] * V
            else:
                cref = [r[st.cam_idx] for r in refs]
                cvalid = [v[st.cam_idx] for v in valids]
            if V >= 2:
                qcam_list = update_camera_queries(qcam_list, cref, feats, layer.dfa_cam,
                                                  layer.xattn, cvalid)
        # (d) spatially efficient self-attention on both query sets
        q3d = efficient_self_attention(q3d, st.G.mu.data, cfg.k_down, layer.sa3d)
        qcam = layer.sacam(ad.stack(qcam_list))
        # (e) residual heads
        G = apply_gaussian_residual(st.G, layer.head_3d(q3d))
        cams, rd, rm, fallbacks = self._update_cameras(layer, st, qcam)
        new = DecoderState(q3d, qcam, G, rd, rm, cams, st.anchors, st.cam_idx,
                           st.fallbacks + fallbacks, [r.data for r in refs])
        new.check()
        return new

    def _update_cameras(self, layer: DecoderLayer, st: DecoderState, qcam: Value):
        cfg = self.cfg
        V, size = st.V, cfg.image_size
        if cfg.pose_input == "gt":
            return st.cams, st.rays_d, st.rays_m, 0
        if cfg.camera_head == "6d":
            xi = layer.head_cam(ad.mean(qcam, axis=1))  # (V, 6)
            cams = [st.cams[0]] + [perturb_cam_values(st.cams[i], xi[i]) for i in range(1, V)]
            rd, rm = zip(*(rays_from_camera_ad(cams[i], st.anchors[i]) for i in range(V)))
            return cams, ad.stack(rd), ad.stack(rm), 0
        rd, rm = apply_ray_residual(st.rays_d, st.rays_m, layer.head_cam(qcam))
        cams, fallbacks = [self._reference_camera(st, rd, rm)], 0
        for i in range(1, V):
            try:
                cams.append(self._solve_camera(st, rd[i], rm[i], i))
            except CameraError as exc:
                fallbacks += 1
                self.fallbacks += 1
                log.warning("camera solve failed for view %d (%s); keeping previous camera", i, exc)
                cams.append(st.cams[i])
        return cams, rd, rm, fallbacks

    def _reference_camera(self, st: DecoderState, rd: Value, rm: Value) -> CamValues:
        ref = st.cams[0]
        if self.cfg.intrinsics == "free":
            try:
                with ad.no_grad():
                    K = rays_to_camera(RaySet(rd.data[0], rm.data[0], st.anchors[0]),
                                       image_size=self.cfg.image_size).K
                return identity_cam(K, self.cfg.image_size)
            except CameraError:
                return ref
        return ref

    def _solve_camera(self, st: DecoderState, d: Value, m: Value, i: int) -> CamValues:
        cfg = self.cfg
        K = st.cams[i].K.data
        if cfg.intrinsics == "known" and cfg.differentiable_solve:
            return rays_to_camera_ad(d, m, st.anchors[i], K, cfg.image_size)
        with ad.no_grad():
            cam = rays_to_camera(RaySet(d.data, m.data, st.anchors[i]),
                                 known_K=K if cfg.intrinsics == "known" else None,
                                 image_size=cfg.image_size)
        return cam_values(cam)

    def forward(self, images: np.ndarray, Ks: Sequence[np.ndarray] | None = None,
                gt_cams: Sequence[Camera] | None = None) -> list[DecoderState]:
        """Run the model; returns the state after initialisation and after every layer."""
        feats = self.encode(images)
        st = self.init_queries(feats, self.intrinsics(Ks, feats.shape[0]), gt_cams)
        states = [st]
        for l in range(self.cfg.L):
            st = self.decoder_layer(l, st, feats)
            states.append(st)
        return states


def config_diff(a: DecoderConfig, b: DecoderConfig) -> dict:
    """Fields whose values differ between two configurations."""
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def save_config(path, cfg: DecoderConfig) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1)


def load_config(path) -> DecoderConfig:
    with open(path) as fh:
        return DecoderConfig.from_dict(json.load(fh))
