"""Command-line entry point: ``splatpose <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _floats(text: str, n: int) -> tuple[float, ...]:
    vals = tuple(float(x) for x in text.split(","))
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers")
    return vals


def _write_json(path: str | None, obj) -> None:
    text = json.dumps(obj, indent=1)
    if path:
        Path(path).write_text(text)
    else:
        print(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_scenegen(args) -> int:
    from .scenegen import SceneSpec, generate_dataset, write_dataset
    spec = SceneSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else SceneSpec()
    if args.seed is not None:
        spec = SceneSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    buckets = args.buckets.split(",") if args.buckets else None
    ds = generate_dataset(spec, args.scenes, buckets)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} scenes to {args.out}")
    return EXIT_OK


def _load_config(args):
    from .camdfa import DecoderConfig
    if args.config:
        return DecoderConfig.from_dict(json.loads(Path(args.config).read_text()))
    return DecoderConfig.desk()


def cmd_train(args) -> int:
    from .metrics import LossWeights
    from .scenegen import read_dataset
    from .train import TrainOptions, train_loop
    ds = read_dataset(args.data)
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    w = LossWeights(args.lambda_proxy, args.lambda_rays, args.lambda_3d)
    opt = TrainOptions(steps=args.steps, lr=args.lr, batch=args.batch, seed=cfg.seed,
                       ckpt_every=args.ckpt_every, deep_supervision=args.deep_supervision)
    every = max(1, args.steps // 20)
    res = train_loop(ds, cfg, w, opt, args.out,
                     progress=lambda s, l: print(f"step {s} loss {l:.5f}") if s % every == 0 else None)
    print(f"checkpoint {res.checkpoint} ({res.seconds:.1f} s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .scenegen import read_dataset
    from .train import evaluate, load_model
    if args.checkpoint is None and not args.oracle:
        raise UsageError("eval needs --checkpoint or --oracle")
    ds = read_dataset(args.data)
    model = None if args.oracle else load_model(args.checkpoint)[0]
    rep = evaluate(model, ds, align=args.align, views=args.views, oracle=args.oracle,
                   align_iters=args.align_iters)
    if not args.per_scene:
        rep.pop("per_scene")
    _write_json(args.out, rep)
    return EXIT_OK


def cmd_raysolve(args) -> int:
    from .camgeom import RaySet, rays_to_camera
    obj = json.loads(Path(args.rays).read_text())
    items = obj["rays"] if isinstance(obj, dict) else obj
    rays = RaySet.from_json(items)
    K = None
    if args.K:
        K = np.array(json.loads(Path(args.K).read_text())).reshape(3, 3)
    elif isinstance(obj, dict) and obj.get("K") is not None and not args.free:
        K = np.array(obj["K"], dtype=np.float64).reshape(3, 3)
    size = None
    if args.size:
        size = args.size
    elif isinstance(obj, dict) and "width" in obj:
        size = (int(obj["width"]), int(obj["height"]))
    cam = rays_to_camera(rays, known_K=K, image_size=size)
    _write_json(args.out, cam.to_dict())
    return EXIT_OK


def cmd_render(args) -> int:
    from .camgeom import Camera
    from .imageio import write_pgm, write_ppm
    from .render import GaussianSet, depth_map, render_np
    g = GaussianSet.load(args.gaussians)
    cam = Camera.load(args.camera)
    write_ppm(args.out, render_np(g, cam, bg=args.bg))
    if args.depth:
        import splatpose.autodiff as ad
        with ad.no_grad():
            dep = depth_map(g, cam).data
        write_pgm(args.depth, np.clip(dep / args.max_depth, 0.0, 1.0))
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    from .camgeom import (Camera, cameras_to_rays, random_rotation, rays_to_camera, rotation_angle)
    rng = np.random.default_rng(args.seed)
    size = args.image_size
    worst = {"rot_rad": 0.0, "K_rel": 0.0, "t": 0.0}
    t0 = time.perf_counter()
    first = None
    for i in range(args.n):
        f = rng.uniform(0.6, 2.0) * size
        K = np.array([[f, 0, rng.uniform(0.3, 0.7) * size], [0, f * rng.uniform(0.8, 1.2),
                      rng.uniform(0.3, 0.7) * size], [0, 0, 1.0]])
        cam = Camera(K, random_rotation(rng), rng.normal(size=3), size, size)
        uv = rng.uniform(0, size, (args.rays, 2))
        rays = cameras_to_rays(cam, uv)
        # intrinsics are unknown to the solver: the full K, R, t recovery is exercised
        est = rays_to_camera(rays, image_size=(size, size))
        worst["rot_rad"] = max(worst["rot_rad"], rotation_angle(est.R @ cam.R.T))
        worst["K_rel"] = max(worst["K_rel"], float(np.abs(est.K - K).max() / np.abs(K).max()))
        worst["t"] = max(worst["t"], float(np.linalg.norm(est.t - cam.t)))
        if first is None:
            first = (cam, rays)
    dt = time.perf_counter() - t0
    print(f"cameras {args.n} rays {args.rays} seconds {dt:.3f}")
    print(f"max rotation error {worst['rot_rad']:.3e} rad")
    print(f"max intrinsics error {worst['K_rel']:.3e} (relative)")
    print(f"max translation error {worst['t']:.3e}")
    if args.dump:
        out = Path(args.dump)
        out.mkdir(parents=True, exist_ok=True)
        cam, rays = first
        (out / "rays.json").write_text(json.dumps({"rays": rays.to_json(), "width": size, "height": size}))
        cam.save(out / "camera.json")
        print(f"dumped rays and ground truth of camera 0 to {out}")
    ok = worst["rot_rad"] < 1e-6 and worst["K_rel"] < 1e-6 and worst["t"] < 1e-6
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_ablate(args) -> int:
    from .metrics import LossWeights
    from .scenegen import read_dataset
    from .train import ABLATIONS, TrainOptions, run_ablation
    train_ds = read_dataset(args.data)
    eval_ds = read_dataset(args.eval_data) if args.eval_data else train_ds
    variants = ["refray"] + [v for v in args.variants.split(",") if v and v != "refray"]
    bad = [v for v in variants if v not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown variants {bad}; choose from {sorted(ABLATIONS)}")
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    opt = TrainOptions(steps=args.steps, lr=args.lr, seed=cfg.seed)
    res = run_ablation(train_ds, eval_ds, cfg, LossWeights(), opt, variants, args.work_dir)
    _write_json(args.out, res)
    for name in variants:
        rep = res[name]["report"]
        print(f"{name:9s} auc20={rep.get('auc20', float('nan')):.4f} psnr={rep['psnr']:.2f}",
              file=sys.stderr)
    cmp = res.get("refray_vs_6d")
    if cmp is not None and not cmp["holds"]:
        print(f"FLAG: RefRay AUC@20 {cmp['refray_auc20']:.4f} < 6D AUC@20 {cmp['6d_auc20']:.4f}",
              file=sys.stderr)
    return EXIT_OK


def cmd_fit(args) -> int:
    from .scenegen import SceneSpec, generate_scene
    from .train import direct_fit
    sc = generate_scene(SceneSpec(seed=args.seed, bucket=args.bucket, n_gaussians=args.gaussians))
    res = direct_fit(sc, steps=args.steps, seed=args.seed)
    _write_json(args.out, {"psnr": res.psnr, "rot_err_deg": res.rot_err_deg,
                           "trans_err_deg": res.trans_err_deg, "steps": res.steps,
                           "seconds": res.seconds})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splatpose", description="Pose-free Gaussian splatting toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser, metavar="SUBCOMMAND")

    s = sub.add_parser("scenegen", help="generate a synthetic dataset directory")
    s.add_argument("--spec", help="scene spec JSON (defaults used when omitted)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--scenes", type=int, default=4, help="number of scenes")
    s.add_argument("--buckets", help="comma-separated overlap buckets to cycle through")
    s.add_argument("--seed", type=int, help="base seed (scene k uses seed + k)")
    s.set_defaults(func=cmd_scenegen)

    s = sub.add_parser("train", help="train the decoder on a dataset")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--config", help="decoder config JSON (desk preset when omitted)")
    s.add_argument("--out", required=True, help="output directory for checkpoint and loss.csv")
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--ckpt-every", type=int, default=0, help="extra checkpoint period in steps")
    s.add_argument("--deep-supervision", action="store_true", help="supervise every layer")
    s.add_argument("--lambda-proxy", type=float, default=0.05, help="weight of 1 - SSIM")
    s.add_argument("--lambda-rays", type=float, default=1.0)
    s.add_argument("--lambda-3d", type=float, default=1.0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint; writes metrics JSON")
    s.add_argument("--checkpoint", help="checkpoint path (without extension)")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", help="metrics JSON path (stdout when omitted)")
    s.add_argument("--align", action="store_true", help="also report target-pose aligned (-A) metrics")
    s.add_argument("--align-iters", type=int, default=40)
    s.add_argument("--views", type=int, help="number of input views (variable-view ablation)")
    s.add_argument("--oracle", action="store_true", help="bypass the network with ground-truth rays")
    s.add_argument("--per-scene", action="store_true", help="include per-scene records")
    s.add_argument("--seed", type=int, help="accepted for symmetry; evaluation is deterministic")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("raysolve", help="recover a camera from a rays JSON file")
    s.add_argument("--rays", required=True, help='JSON list of {"d", "m", "uv"} or {"rays": [...]}')
    s.add_argument("--K", help="known intrinsics JSON (3x3); intrinsics are solved when absent")
    s.add_argument("--free", action="store_true", help="ignore any K stored in the rays file")
    s.add_argument("--size", type=int, nargs=2, metavar=("W", "H"), help="image size")
    s.add_argument("--out", help="camera JSON path (stdout when omitted)")
    s.add_argument("--seed", type=int, help="accepted for symmetry; the solve is deterministic")
    s.set_defaults(func=cmd_raysolve)

    s = sub.add_parser("render", help="render Gaussians from a camera to PPM")
    s.add_argument("--gaussians", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--out", required=True, help="output PPM")
    s.add_argument("--bg", type=lambda t: _floats(t, 3), default=(0.0, 0.0, 0.0), help="r,g,b in [0,1]")
    s.add_argument("--depth", help="also write a 16-bit PGM depth map")
    s.add_argument("--max-depth", type=float, default=10.0, help="depth mapped to white")
    s.add_argument("--seed", type=int, help="accepted for symmetry; rendering is deterministic")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("roundtrip", help="random cameras -> rays -> cameras self-check")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=1000, help="number of cameras")
    s.add_argument("--rays", type=int, default=16, help="rays per camera")
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--dump", help="directory receiving rays.json and camera.json of camera 0")
    s.set_defaults(func=cmd_roundtrip)

    s = sub.add_parser("ablate", help="train and evaluate ablation variants with equal budgets")
    s.add_argument("--data", required=True, help="training dataset directory")
    s.add_argument("--eval-data", help="evaluation dataset directory (defaults to --data)")
    s.add_argument("--variants", default="6dpose,pixel,nocamdfa,gtpose",
                   help="comma-separated subset of 6dpose,pixel,nocamdfa,gtpose")
    s.add_argument("--config", help="base decoder config JSON")
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int)
    s.add_argument("--work-dir", help="keep per-variant checkpoints here")
    s.add_argument("--out", help="results JSON path (stdout when omitted)")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("fit", help="directly optimise Gaussians and rays on one synthetic scene")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--gaussians", type=int, default=32)
    s.add_argument("--bucket", default="large")
    s.add_argument("--out", help="result JSON path (stdout when omitted)")
    s.set_defaults(func=cmd_fit)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    if args.cmd is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"splatpose: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"splatpose: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
