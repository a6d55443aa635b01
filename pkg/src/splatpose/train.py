"""Training loop, evaluation, direct scene optimisation and ablation runs."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .camdfa import CaMDFA, DecoderConfig, DecoderState, config_diff
from .camgeom import (Camera, align_target_pose, axis_angle_to_matrix, camera_from_values, cameras_to_rays, pose_auc,
                      pose_error, rays_to_camera, rays_to_camera_ad, rotation_angle)
from .metrics import LossWeights, loss_3d, loss_rays, psnr, ssim_value, total_loss
from .nn import Adam, clip_grad_norm, load_checkpoint, load_into, save_checkpoint
from .render import GaussianSet, render, render_np
from .scenegen import Dataset, Scene

log = logging.getLogger(__name__)

CURVE_FIELDS = ("step", "loss_total", "loss_3d", "loss_rays")
ABLATIONS = {
    "refray": {},
    "6dpose": {"camera_head": "6d"},
    "pixel": {"camera_head": "pixel"},
    "nocamdfa": {"camdfa": False},
    "gtpose": {"pose_input": "gt"},
}


class TrainingError(RuntimeError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


class EvaluationError(ValueError):
    pass


@dataclass
class TrainOptions:
    steps: int = 500
    lr: float = 1e-3
    batch: int = 1
    seed: int = 0
    clip: float = 1.0
    weight_decay: float = 0.0
    ckpt_every: int = 0
    deep_supervision: bool = False
    views: int | None = None


@dataclass
class TrainResult:
    model: CaMDFA
    curve: list[tuple[int, float, float, float]]
    checkpoint: Path | None = None
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# per-scene forward pass and loss
# ---------------------------------------------------------------------------

def _background(ds: Dataset | None) -> tuple[float, float, float]:
    spec = (ds.meta or {}).get("spec", {}) if ds is not None else {}
    return tuple(spec.get("background", (0.0, 0.0, 0.0)))


def input_views(scene: Scene, views: int | None = None) -> list[int]:
    inp = list(scene.inputs)
    if views is None:
        return inp
    extra = [v for v in scene.targets]
    pool = inp + extra
    if views < 2 or views > len(pool):
        raise EvaluationError(f"scene has {len(pool)} views, cannot use {views} inputs")
    return pool[:views]


def run_model(model: CaMDFA, scene: Scene, views: int | None = None) -> tuple[list[DecoderState], list[Camera]]:
    inp = input_views(scene, views)
    if len(scene.cameras) != len(scene.images):
        raise EvaluationError("every view needs a ground-truth camera")
    rel = scene.relative_cameras()
    gt_in = [rel[i] for i in inp]
    states = model(scene.images[inp], [c.K for c in gt_in], gt_cams=gt_in)
    return states, gt_in


def scene_loss(model: CaMDFA, scene: Scene, w: LossWeights, bg=(0.0, 0.0, 0.0),
               deep_supervision: bool = False, views: int | None = None) -> tuple[Value, Value, Value]:
    """Total, image and ray losses of one scene, rendering targets with ground-truth poses."""
    states, gt_in = run_model(model, scene, views)
    inp = input_views(scene, views)
    rel = scene.relative_cameras()
    targets = [t for t in scene.targets if t not in inp] or inp
    supervised = states[1:] if deep_supervision else [states[-1]]
    l3_sum, lr_sum = Value(0.0), Value(0.0)
    for st in supervised:
        l3 = Value(0.0)
        for t in targets:
            l3 = l3 + loss_3d(render(st.G, rel[t], bg=bg).rgb, scene.images[t], w)
        l3_sum = l3_sum + l3 / len(targets)
        lr_sum = lr_sum + loss_rays(st.rays_d, st.rays_m, gt_in, st.anchors)
    l3_mean, lr_mean = l3_sum / len(supervised), lr_sum / len(supervised)
    return total_loss(l3_mean, lr_mean, w), l3_mean, lr_mean


def dataset_loss(model: CaMDFA, ds: Dataset, w: LossWeights, views: int | None = None) -> np.ndarray:
    """Mean ``(total, 3d, rays)`` loss over all scenes, without gradients."""
    with ad.no_grad():
        rows = [[float(x.data) for x in scene_loss(model, sc, w, _background(ds), views=views)]
                for sc in ds.scenes]
    return np.mean(rows, axis=0)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def write_curve(path: str | Path, curve: Sequence[Sequence[float]]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CURVE_FIELDS)
        for row in curve:
            wr.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])


def read_curve(path: str | Path) -> list[tuple[int, float, float, float]]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [(int(r["step"]), float(r["loss_total"]), float(r["loss_3d"]), float(r["loss_rays"]))
                for r in rd]


def save_model(path: str | Path, model: CaMDFA, w: LossWeights | None = None, step: int = 0) -> Path:
    extra = {"config": model.cfg.to_dict(), "step": step}
    if w is not None:
        extra["weights"] = w.to_dict()
    save_checkpoint(path, model.parameters(), extra)
    return Path(path)


def load_model(path: str | Path) -> tuple[CaMDFA, dict]:
    arrays, extra = load_checkpoint(path)
    model = CaMDFA(DecoderConfig.from_dict(extra["config"]))
    load_into(model.parameters(), arrays)
    return model, extra


def train_loop(ds: Dataset, cfg: DecoderConfig, w: LossWeights, opt: TrainOptions,
               out_dir: str | Path | None = None,
               progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Adam on the total loss with gradient clipping; deterministic for a given ``opt.seed``.

    Writes ``loss.csv`` and ``checkpoint.{bin,json}`` (plus ``checkpoint_<step>``
    every ``opt.ckpt_every`` steps) into ``out_dir`` when given.
    """
    if len(ds) == 0:
        raise TrainingError(0, "empty dataset")
    t0 = time.perf_counter()
    model = CaMDFA(cfg)
    params = model.parameters()
    adam = Adam(params, lr=opt.lr, weight_decay=opt.weight_decay)
    rng = np.random.default_rng(opt.seed)
    bg = _background(ds)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    order: list[int] = []
    curve = []
    for step in range(opt.steps):
        adam.zero_grad()
        rows = np.zeros(3)
        for _ in range(opt.batch):
            if not order:
                order = list(rng.permutation(len(ds)))
            sc = ds.scenes[order.pop(0)]
            tot, l3, lr = scene_loss(model, sc, w, bg, opt.deep_supervision, opt.views)
            vals = np.array([float(tot.data), float(l3.data), float(lr.data)])
            if not np.all(np.isfinite(vals)):
                raise TrainingError(step, f"non-finite loss {vals.tolist()}")
            (tot * (1.0 / opt.batch)).backward()
            rows += vals / opt.batch
        for p in params.values():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(step, "non-finite gradient")
        clip_grad_norm(params, opt.clip)
        adam.step()
        curve.append((step, *rows.tolist()))
        if progress is not None:
            progress(step, float(rows[0]))
        if out is not None and opt.ckpt_every and (step + 1) % opt.ckpt_every == 0:
            save_model(out / f"checkpoint_{step + 1}", model, w, step + 1)
    ckpt = None
    if out is not None:
        ckpt = save_model(out / "checkpoint", model, w, opt.steps)
        write_curve(out / "loss.csv", curve)
    return TrainResult(model, curve, ckpt, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def anchor_grid(width: int, height: int, n: int = 4) -> np.ndarray:
    """``n x n`` pixel anchors spread over the image."""
    xs = (np.arange(n) + 0.5) * width / n
    ys = (np.arange(n) + 0.5) * height / n
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """``(w, x, y, z)`` unit quaternion of a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    m = np.array([[R[0, 0] + R[1, 1] + R[2, 2], R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]],
                  [R[2, 1] - R[1, 2], R[0, 0] - R[1, 1] - R[2, 2], R[0, 1] + R[1, 0], R[0, 2] + R[2, 0]],
                  [R[0, 2] - R[2, 0], R[0, 1] + R[1, 0], R[1, 1] - R[0, 0] - R[2, 2], R[1, 2] + R[2, 1]],
                  [R[1, 0] - R[0, 1], R[0, 2] + R[2, 0], R[1, 2] + R[2, 1], R[2, 2] - R[0, 0] - R[1, 1]]])
    vals, vecs = np.linalg.eigh(m / 3.0)
    q = vecs[:, -1]
    return q if q[0] >= 0 else -q


def transform_gaussians(g: GaussianSet, R: np.ndarray, t: np.ndarray) -> GaussianSet:
    """Rigidly map world Gaussians into a camera frame ``x -> R x + t`` (degree-0 colour only)."""
    if g.degree != 0:
        raise EvaluationError("rigid transform of view-dependent colour is not supported")
    qr = rotmat_to_quat(R)
    w1, v1 = qr[0], qr[1:]
    q = g.rot.data
    w2, v2 = q[:, :1], q[:, 1:]
    rot = np.concatenate([w1 * w2 - (v2 @ v1)[:, None], w1 * v2 + w2 * v1 + np.cross(v1, v2)], axis=1)
    return GaussianSet(g.mu.data @ R.T + t, rot, g.scale_log.data, g.opacity_logit.data, g.sh.data, 0)


def _oracle_cameras(gt_in: Sequence[Camera]) -> list[Camera]:
    """Cameras re-solved from exact ground-truth rays (the network is bypassed)."""
    out = []
    for cam in gt_in:
        rays = cameras_to_rays(cam, anchor_grid(cam.width, cam.height))
        out.append(rays_to_camera(rays, known_K=cam.K, image_size=cam.size))
    return out


def evaluate(model: CaMDFA | None, ds: Dataset, align: bool = False, views: int | None = None,
             oracle: bool = False, align_iters: int = 40, align_step: float = 5e-3) -> dict:
    """Image and pose metrics per scene plus aggregates and per-overlap-bucket summaries.

    ``oracle=True`` bypasses the network: cameras are solved from
    ground-truth rays and the ground-truth Gaussians are rendered.
    """
    if model is None and not oracle:
        raise EvaluationError("a model is required unless oracle=True")
    bg = _background(ds)
    per_scene = []
    for k, sc in enumerate(ds.scenes):
        if len(sc.cameras) != len(sc.images) or any(c is None for c in sc.cameras):
            raise EvaluationError(f"scene {k}: missing ground-truth cameras")
        inp = input_views(sc, views)
        rel = sc.relative_cameras()
        gt_in = [rel[i] for i in inp]
        if oracle:
            est = _oracle_cameras(gt_in)
            ref = sc.cameras[sc.inputs[0]]
            G = transform_gaussians(sc.gaussians, ref.R, ref.t)
        else:
            with ad.no_grad():
                st = run_model(model, sc, views)[0][-1]
            est, G = st.cameras(), st.G.detach()
        errs = [pose_error(e, g) for e, g in zip(est[1:], gt_in[1:])]
        targets = [t for t in sc.targets if t not in inp] or inp
        rec = {"scene": k, "bucket": sc.bucket, "overlap": sc.overlap,
               "e_rot": [e.rot_deg for e in errs], "e_trans": [e.trans_deg for e in errs],
               "psnr": [], "ssim": []}
        if align:
            rec["psnr_A"], rec["ssim_A"] = [], []
        for t in targets:
            img = render_np(G, rel[t], bg=bg)
            rec["psnr"].append(psnr(img, sc.images[t]))
            rec["ssim"].append(ssim_value(img, sc.images[t]))
            if align:
                cam_a = align_target_pose(G, sc.images[t], rel[t], iters=align_iters, step=align_step, bg=bg)
                img_a = render_np(G, cam_a, bg=bg)
                rec["psnr_A"].append(psnr(img_a, sc.images[t]))
                rec["ssim_A"].append(ssim_value(img_a, sc.images[t]))
        per_scene.append(rec)
    report = summarize(per_scene, align)
    report["per_scene"] = per_scene
    return report


def summarize(per_scene: list[dict], align: bool = False) -> dict:
    def agg(rows: list[dict]) -> dict:
        errs = [max(r, t) for s in rows for r, t in zip(s["e_rot"], s["e_trans"])]
        out = {"count": len(rows),
               "psnr": float(np.mean([np.mean(s["psnr"]) for s in rows])),
               "ssim": float(np.mean([np.mean(s["ssim"]) for s in rows]))}
        if errs:
            out.update(zip(("auc5", "auc10", "auc20"), pose_auc(errs, (5, 10, 20))))
            out["e_rot"] = float(np.median([e for s in rows for e in s["e_rot"]]))
            out["e_trans"] = float(np.median([e for s in rows for e in s["e_trans"]]))
        if align:
            out["psnr_A"] = float(np.mean([np.mean(s["psnr_A"]) for s in rows]))
            out["ssim_A"] = float(np.mean([np.mean(s["ssim_A"]) for s in rows]))
        return out

    report = agg(per_scene)
    report["bucket"] = {}
    for name in ("small", "medium", "large", "below"):
        rows = [s for s in per_scene if s["bucket"] == name]
        if rows:
            report["bucket"][name] = agg(rows)
    return report


# ---------------------------------------------------------------------------
# direct optimisation of one scene
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    psnr: list[float]
    rot_err_deg: float
    trans_err_deg: float
    steps: int
    seconds: float
    gaussians: GaussianSet
    camera: Camera
    curve: list[float] = field(default_factory=list)


def direct_fit(scene: Scene, steps: int = 2000, lr: float = 5e-3, ray_lr: float = 2e-3,
               init_noise: float = 0.05, pose_noise_deg: float = 3.0, n_anchor: int = 4,
               seed: int = 0, bg=(0.0, 0.0, 0.0), log_every: int = 0) -> FitResult:
    """Jointly fit a GaussianSet and the second input view's RefRays to the two input images.

    Gaussians start from perturbed centres with grey colour, a common scale
    and half opacity; the rays start from a perturbed camera.  The second
    camera is re-solved from its rays (known intrinsics) at every step.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    rel = scene.relative_cameras()
    i0, i1 = scene.inputs[:2]
    c0, c1 = rel[i0], rel[i1]
    ref = scene.cameras[i0]
    gt = transform_gaussians(scene.gaussians, ref.R, ref.t)
    n = gt.n
    mu0 = gt.mu.data + rng.normal(0.0, init_noise, (n, 3))
    G = GaussianSet.from_activated(mu0, 0.1, 0.5, np.full((n, 3), 0.5)).requires_grad_()
    # perturbed starting pose for the rays
    axis = rng.normal(size=3)
    dR = axis_angle_to_matrix(axis / np.linalg.norm(axis) * np.radians(pose_noise_deg))
    start = Camera(c1.K, dR @ c1.R, c1.t + rng.normal(0.0, 0.05 * np.linalg.norm(c1.t) + 1e-3, 3),
                   c1.width, c1.height)
    anchors = anchor_grid(c1.width, c1.height, n_anchor)
    r0 = cameras_to_rays(start, anchors)
    d = Value(r0.d, requires_grad=True)
    m = Value(r0.m, requires_grad=True)
    g_opt = Adam({f"g{i}": v for i, v in enumerate(G.fields)}, lr=lr, betas=(0.9, 0.99))
    r_opt = Adam({"d": d, "m": m}, lr=ray_lr, betas=(0.9, 0.99))
    targets = [scene.images[i0], scene.images[i1]]
    curve = []
    for step in range(steps):
        cam1 = rays_to_camera_ad(d, m, anchors, c1.K, c1.size)
        loss = Value(0.0)
        for cam, img in ((c0, targets[0]), (cam1, targets[1])):
            loss = loss + ad.mean((render(G, cam, bg=bg).rgb - img) ** 2)
        lv = float(loss.data)
        if not np.isfinite(lv):
            raise TrainingError(step, "non-finite loss in direct fit")
        curve.append(lv)
        g_opt.zero_grad()
        r_opt.zero_grad()
        loss.backward()
        g_opt.step()
        r_opt.step()
        if log_every and step % log_every == 0:
            e = pose_error(camera_from_values(cam1), c1)
            log.info("fit step %d loss %.3e rot %.3f deg", step, lv, e.rot_deg)
    G = G.detach()
    cam1 = camera_from_values(rays_to_camera_ad(d.detach(), m.detach(), anchors, c1.K, c1.size))
    ps = [psnr(render_np(G, c, bg=bg), img) for c, img in ((c0, targets[0]), (cam1, targets[1]))]
    err = pose_error(cam1, c1)
    return FitResult(ps, err.rot_deg, err.trans_deg, steps, time.perf_counter() - t0, G, cam1, curve)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def run_ablation(train_ds: Dataset, eval_ds: Dataset, base: DecoderConfig, w: LossWeights,
                 opt: TrainOptions, variants: Sequence[str] = tuple(ABLATIONS),
                 out_dir: str | Path | None = None) -> dict:
    """Train and evaluate each variant with the same data, seed and step budget."""
    results = {}
    for name in variants:
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        cfg = base.replace(**ABLATIONS[name])
        sub = Path(out_dir) / name if out_dir is not None else None
        res = train_loop(train_ds, cfg, w, opt, sub)
        rep = evaluate(res.model, eval_ds)
        rep.pop("per_scene")
        results[name] = {"config_diff": {k: list(v) for k, v in config_diff(base, cfg).items()},
                         "final_loss": res.curve[-1][1] if res.curve else None,
                         "seconds": res.seconds, "report": rep}
    if "refray" in results and "6dpose" in results:
        a, b = results["refray"]["report"].get("auc20"), results["6dpose"]["report"].get("auc20")
        results["refray_vs_6d"] = {"refray_auc20": a, "6d_auc20": b, "holds": bool(a >= b)}
    return results
