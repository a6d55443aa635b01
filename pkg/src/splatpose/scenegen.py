"""Synthetic multi-view scenes and their on-disk dataset layout.

A dataset directory holds::

    meta.json
    scene_<k>/gaussians.json
    scene_<k>/cam_<v>.json
    scene_<k>/view_<v>.ppm

Cameras and Gaussians are JSON with shortest round-trip float repr, so they
reload bit-exactly.  Views are 8-bit PPM, quantised to within 1/255.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camgeom import Camera, axis_angle_to_matrix, default_intrinsics
from .imageio import ImageFormatError, read_ppm, write_ppm
from .metrics import BUCKETS, overlap_fraction
from .render import GaussianSet, render_np

FORMAT_VERSION = 1
MAX_BISECTION = 50


class SceneError(RuntimeError):
    pass


class DatasetError(ValueError):
    """Unreadable dataset file; ``path`` and byte ``offset`` locate the problem."""

    def __init__(self, path, reason: str, offset: int | None = None):
        where = f"{path}" + (f": byte {offset}" if offset is not None else "")
        super().__init__(f"{where}: {reason}")
        self.path = str(path)
        self.offset = offset


@dataclass
class SceneSpec:
    """Parameters of one synthetic scene; ``seed`` fixes every random draw.

    Gaussians fill the reference camera's frustum between ``depth_range``.
    Other cameras orbit a pivot at ``pivot_depth`` on the reference optical
    axis; the angular spread of the second input view is tuned by bisection
    so the two input views fall into ``bucket`` (``None`` keeps
    ``spread_deg``).
    """

    n_gaussians: int = 48
    image_size: tuple[int, int] = (64, 64)
    n_views: int = 3
    n_inputs: int = 2
    bucket: str | None = "large"
    fov_deg: float = 60.0
    depth_range: tuple[float, float] = (1.5, 3.0)
    pivot_depth: float = 6.0
    spread_deg: float = 15.0
    max_spread_deg: float = 60.0
    elevation_deg: float = 5.0
    color_range: tuple[float, float] = (0.1, 0.95)
    scale_range: tuple[float, float] = (0.06, 0.16)
    opacity_range: tuple[float, float] = (0.7, 0.95)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.n_gaussians < 1:
            raise SceneError("n_gaussians must be at least 1")
        if not 2 <= self.n_inputs <= self.n_views:
            raise SceneError("need 2 <= n_inputs <= n_views")
        if self.bucket is not None and self.bucket not in {b[0] for b in BUCKETS}:
            raise SceneError(f"unknown overlap bucket {self.bucket!r}")
        if not 0 < self.depth_range[0] < self.depth_range[1]:
            raise SceneError("depth_range must be increasing and positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SceneError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Scene:
    gaussians: GaussianSet
    cameras: list[Camera]
    images: np.ndarray  # (V, H, W, 3)
    inputs: list[int]
    targets: list[int]
    overlap: float = 1.0
    bucket: str = "large"

    def relative_cameras(self) -> list[Camera]:
        """All cameras expressed in the frame of the first input view."""
        ref = self.cameras[self.inputs[0]]
        return [c.relative_to(ref) for c in self.cameras]


@dataclass
class Dataset:
    scenes: list[Scene]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scenes)


def orbit_camera(K: np.ndarray, pivot: np.ndarray, yaw_deg: float, pitch_deg: float,
                 size: tuple[int, int]) -> Camera:
    """Camera at the reference centre rotated about ``pivot`` by yaw (about y) then pitch (about x)."""
    Rw = axis_angle_to_matrix([0.0, np.radians(yaw_deg), 0.0]) @ \
        axis_angle_to_matrix([np.radians(pitch_deg), 0.0, 0.0])
    center = pivot + Rw @ (-pivot)
    return Camera.from_center(K, Rw.T, center, *size)


def _sample_gaussians(spec: SceneSpec, K: np.ndarray, rng: np.random.Generator) -> GaussianSet:
    n = spec.n_gaussians
    W, H = spec.image_size
    # uniform pixel and depth, unprojected by the reference camera
    uv = rng.uniform([0.1 * W, 0.1 * H], [0.9 * W, 0.9 * H], (n, 2))
    z = rng.uniform(*spec.depth_range, n)
    rays = np.linalg.solve(K, np.concatenate([uv, np.ones((n, 1))], axis=1).T).T
    mu = rays * z[:, None]
    scale = rng.uniform(*spec.scale_range, (n, 3))
    opacity = rng.uniform(*spec.opacity_range, n)
    rgb = rng.uniform(*spec.color_range, (n, 3))
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    return GaussianSet.from_activated(mu, scale, opacity, rgb, rot=rot)


def _choose_spread(spec: SceneSpec, g: GaussianSet, cam0: Camera, make) -> tuple[float, float, str]:
    """Bisection on the orbit spread so that the second input view lands in ``spec.bucket``."""
    if spec.bucket is None:
        frac, b = overlap_fraction(cam0, make(spec.spread_deg), g)
        return spec.spread_deg, frac, b
    lo_t, hi_t = next((lo, hi) for name, lo, hi in BUCKETS if name == spec.bucket)
    goal = 0.5 * (lo_t + hi_t)
    lo, hi = 0.0, spec.max_spread_deg
    for _ in range(MAX_BISECTION):
        mid = 0.5 * (lo + hi)
        frac, b = overlap_fraction(cam0, make(mid), g)
        if b == spec.bucket:
            return mid, frac, b
        # overlap shrinks as the spread grows
        if frac > goal:
            lo = mid
        else:
            hi = mid
    raise SceneError(f"overlap bucket {spec.bucket!r} unreachable after {MAX_BISECTION} bisection steps")


def generate_scene(spec: SceneSpec) -> Scene:
    """Sample Gaussians and an orbit of cameras, then render every view."""
    rng = np.random.default_rng(spec.seed)
    W, H = spec.image_size
    K = default_intrinsics(W, H, spec.fov_deg)
    g = _sample_gaussians(spec, K, rng)
    cam0 = Camera(K, np.eye(3), np.zeros(3), W, H)
    pivot = np.array([0.0, 0.0, spec.pivot_depth])
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    pitch1 = rng.uniform(-spec.elevation_deg, spec.elevation_deg)
    make = lambda s: orbit_camera(K, pivot, sign * s, pitch1, (W, H))
    spread, frac, bucket = _choose_spread(spec, g, cam0, make)
    cams = [cam0, make(spread)]
    for _ in range(spec.n_views - 2):
        # interpolating views between the two inputs, as in two-view NVS benchmarks
        cams.append(orbit_camera(K, pivot, sign * rng.uniform(0.0, spread),
                                 rng.uniform(-spec.elevation_deg, spec.elevation_deg), (W, H)))
    # keep the input views first, then the targets
    order = list(range(spec.n_inputs)) + list(range(spec.n_inputs, spec.n_views))
    images = np.stack([render_np(g, c, bg=spec.background) for c in cams])
    return Scene(g, cams, images, order[: spec.n_inputs], order[spec.n_inputs:], frac, bucket)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SPLATPOSE_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(spec: SceneSpec, n_scenes: int, buckets: list[str] | None = None) -> Dataset:
    """``n_scenes`` scenes with seeds ``spec.seed + k``; ``buckets`` cycles the overlap target."""
    def one(k: int) -> Scene:
        d = spec.to_dict()
        d["seed"] = spec.seed + k
        if buckets:
            d["bucket"] = buckets[k % len(buckets)]
        return generate_scene(SceneSpec.from_dict(d))

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        scenes = list(pool.map(one, range(n_scenes)))
    return Dataset(scenes, {"spec": spec.to_dict(), "buckets": buckets})


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_dataset(ds: Dataset, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    scenes_meta = []
    for k, sc in enumerate(ds.scenes):
        d = root / f"scene_{k}"
        d.mkdir(exist_ok=True)
        sc.gaussians.save(d / "gaussians.json")
        for v, (cam, img) in enumerate(zip(sc.cameras, sc.images)):
            cam.save(d / f"cam_{v}.json")
            write_ppm(d / f"view_{v}.ppm", img)
        scenes_meta.append({"n_views": len(sc.cameras), "inputs": sc.inputs, "targets": sc.targets,
                            "overlap": sc.overlap, "bucket": sc.bucket})
    meta = {"format": FORMAT_VERSION, "n_scenes": len(ds.scenes), "scenes": scenes_meta,
            **{k: v for k, v in ds.meta.items() if k not in ("format", "n_scenes", "scenes")}}
    (root / "meta.json").write_text(json.dumps(meta, indent=1))
    return root


def _read_json(path: Path):
    if not path.is_file():
        raise DatasetError(path, "missing file")
    raw = path.read_bytes()
    try:
        return json.loads(raw)
    except UnicodeDecodeError as exc:
        raise DatasetError(path, f"not UTF-8 text: {exc.reason}", exc.start) from exc
    except json.JSONDecodeError as exc:
        # JSONDecodeError.pos is a character index; convert to a byte offset
        off = len(exc.doc[: exc.pos].encode("utf-8"))
        raise DatasetError(path, f"invalid JSON: {exc.msg}", off) from exc


def read_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    meta = _read_json(root / "meta.json")
    try:
        entries = meta["scenes"]
    except (KeyError, TypeError) as exc:
        raise DatasetError(root / "meta.json", "meta.json lacks a 'scenes' list") from exc
    scenes = []
    for k, info in enumerate(entries):
        d = root / f"scene_{k}"
        try:
            g = GaussianSet.from_dict(_read_json(d / "gaussians.json"))
        except (KeyError, ValueError) as exc:
            if isinstance(exc, DatasetError):
                raise
            raise DatasetError(d / "gaussians.json", f"bad Gaussian record: {exc}") from exc
        cams, imgs = [], []
        for v in range(int(info["n_views"])):
            cpath = d / f"cam_{v}.json"
            try:
                cams.append(Camera.from_dict(_read_json(cpath)))
            except (KeyError, ValueError) as exc:
                if isinstance(exc, DatasetError):
                    raise
                raise DatasetError(cpath, f"bad camera record: {exc}") from exc
            ipath = d / f"view_{v}.ppm"
            if not ipath.is_file():
                raise DatasetError(ipath, "missing file")
            try:
                imgs.append(read_ppm(ipath))
            except ImageFormatError as exc:
                raise DatasetError(ipath, str(exc).split(": ", 2)[-1], exc.offset) from exc
        scenes.append(Scene(g, cams, np.stack(imgs), list(info["inputs"]), list(info["targets"]),
                            float(info.get("overlap", 1.0)), info.get("bucket", "large")))
    extra = {k: v for k, v in meta.items() if k not in ("scenes",)}
    return Dataset(scenes, extra)
