"""Command-line interface. Flag defaults mirror the pipeline configuration
keys (dilation 5x5 for five iterations, lambda_lpips 0.01, lambda_depth 1.0,
two segmentation stages). Validation problems exit with code 2."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np


def _fail(message: str, code: int = 2):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _load_scene_dir(path):
    from .scene import ingest, load_scene

    manifest = ingest(path)
    return manifest, load_scene(manifest)


def _bounds_for(manifest, far: float):
    from .field import BoundingBox, bounds_from_cameras
    from .geometry import Pose

    if manifest.bounds is not None:
        return BoundingBox(np.array(manifest.bounds[0]), np.array(manifest.bounds[1]))
    poses = [Pose.from_matrix(m) for m in manifest.matrices]
    return bounds_from_cameras(poses, manifest.intrinsics, far)


def cmd_ingest(args):
    from .scene import ManifestError, ingest

    try:
        manifest = ingest(args.scene)
    except ManifestError as e:
        _fail(str(e))
    print(f"ingested scene '{manifest.scene_id}' with {len(manifest.files)} views")


def cmd_demo(args):
    from .synthetic import make_box_bundle, write_scene_dir

    bundle = make_box_bundle(n_train=args.views, width=args.size, height=args.size, seed=args.seed)
    root = write_scene_dir(bundle, args.out)
    print(f"wrote synthetic demo scene to {root}")


def _common_fit(args, mode):
    from .optim import FitConfig, LossWeights, PatchSpec

    return FitConfig(
        mode=mode,
        iterations=args.iterations,
        rays_per_batch=args.rays_per_batch,
        n_samples=args.samples,
        seed=args.seed,
        weights=LossWeights(
            lambda_clf=getattr(args, "lambda_clf", 0.1),
            lambda_lpips=getattr(args, "lambda_lpips", 0.01),
            lambda_depth=getattr(args, "lambda_depth", 1.0),
        ),
        patches=PatchSpec(downscale_factor=getattr(args, "patch_factor", 4)),
    )


def cmd_segment(args):
    from .scene import write_mask
    from .segmentation import FileMasksProvider, SegmentationConfig, load_annotations, segment

    manifest, scene = _load_scene_dir(args.scene)
    cfg = SegmentationConfig(
        fit=_common_fit(args, "mv"),
        grid_resolution=(args.resolution,) * 3,
        bounds=_bounds_for(manifest, args.far),
    )
    ann = None
    provider = None
    if args.points:
        ann = load_annotations(args.points)
    elif args.source_mask:
        _fail("--source-mask requires mask files for every view; use --masks-dir or --points")
    if args.masks_dir:
        provider = FileMasksProvider(args.masks_dir)
    if ann is None and provider is None:
        _fail("segment needs --points or --masks-dir")
    result = segment(scene, ann=ann, stages=args.stages, config=cfg, provider=provider)
    out = Path(args.out or (Path(args.scene) / "stages" / "segment"))
    out.mkdir(parents=True, exist_ok=True)
    for n, m in zip(scene.names, result.masks.masks):
        write_mask(out / f"{n}.png", m)
    from .field import save_grid

    save_grid(result.grid, out / "grid.spgr")
    print(f"wrote {scene.n_views} masks and grid to {out}")


def cmd_refine(args):
    from .field import load_grid
    from .refine import RefineConfig, refine_views
    from .renderer import RenderOptions, expected_depth, render_view
    from .scene import write_image, write_mask, write_pfm
    from .segmentation import FileMasksProvider

    manifest, scene = _load_scene_dir(args.scene)
    try:
        masks = FileMasksProvider(args.masks).initial_masks(scene)
    except Exception as e:
        _fail(str(e))
    grid = load_grid(args.grid) if args.grid else None
    if grid is None:
        from .field import RadianceGrid
        from .optim import fit

        grid = RadianceGrid((args.resolution,) * 3, _bounds_for(manifest, args.far))
        fit(grid, scene, _common_fit(args, "rec"))
    depths = []
    for pose in scene.poses:
        _, depth, _, opacity = render_view(grid, scene.intrinsics, pose, RenderOptions(n_samples=args.samples, mode="midpoint"))
        d = expected_depth(depth, opacity)
        d[opacity <= 1e-6] = 0.0
        depths.append(d)
    imgs, deps, out_masks, stats = refine_views(scene, depths, masks.masks, RefineConfig())
    out = Path(args.out or (Path(args.scene) / "stages" / "refined"))
    out.mkdir(parents=True, exist_ok=True)
    for n, img, d, m in zip(scene.names, imgs, deps, out_masks):
        write_image(out / f"{n}.png", img)
        if not args.rgb_only:
            write_pfm(out / f"{n}.pfm", d)
        write_mask(out / f"{n}_mask.png", m)
    (out / "stats.json").write_text(json.dumps(stats.to_json(), indent=2))
    print(f"refined {stats.pixels_refined} pixels over {stats.sweeps} sweeps "
          f"({stats.reduction_percent:.2f}% mask reduction); outputs in {out}")


def cmd_inpaint(args):
    from .inpaint import DirectoryInpainter, HarmonicInpainter, InpaintError, InpaintOptions, inpaint_scene
    from .optim import LossWeights
    from .segmentation import FileMasksProvider

    manifest, scene = _load_scene_dir(args.scene)
    if args.provider == "harmonic":
        provider = HarmonicInpainter()
    elif args.provider.startswith("dir:"):
        provider = DirectoryInpainter(args.provider[4:])
        try:
            provider.prepare(scene)
        except InpaintError as e:
            _fail(str(e))
    else:
        _fail(f"unknown provider '{args.provider}' (expected harmonic or dir:PATH)")
    try:
        masks = FileMasksProvider(args.masks).initial_masks(scene)
    except Exception as e:
        _fail(str(e))
    weights = LossWeights(
        lambda_lpips=args.lambda_lpips,
        lambda_depth=0.0 if args.no_depth_prior else args.lambda_depth,
    )
    opts = InpaintOptions(
        provider=provider,
        dilate_kernel=args.dilate_kernel,
        dilate_iters=args.dilate_iters,
        refine=args.refine,
        weights=weights,
        fit=_common_fit(args, "inpaint"),
        original_fit=_common_fit(args, "rec"),
        grid_resolution=(args.resolution,) * 3,
        bounds=_bounds_for(manifest, args.far),
        stage_dir=Path(args.out or (Path(args.scene) / "stages" / "inpaint")),
    )
    opts.fit.weights = weights
    grid, report = inpaint_scene(scene, masks, opts)
    print(f"inpainted scene; stage artifacts in {opts.stage_dir}")
    print(json.dumps({k: v for k, v in report.items() if k != "config"}, indent=2, default=float))


def cmd_render(args):
    from .field import load_grid
    from .renderer import RenderOptions, render_view
    from .scene import write_image, write_pfm

    manifest, scene = _load_scene_dir(args.scene)
    grid = load_grid(args.grid)
    if args.pose:
        from .geometry import Pose

        vals = [float(x) for x in args.pose.split(",")]
        if len(vals) != 16:
            _fail("--pose needs 16 comma-separated floats (row-major 4x4)")
        pose = Pose.from_matrix(np.array(vals).reshape(4, 4))
    else:
        pose = scene.poses[args.view]
    color, depth, _, _ = render_view(grid, scene.intrinsics, pose, RenderOptions(n_samples=args.samples, mode="midpoint"))
    write_image(args.out, color)
    if args.depth_out:
        write_pfm(args.depth_out, depth)
    print(f"wrote {args.out}")


def cmd_eval(args):
    from .field import load_grid
    from .inpaint import evaluate_inpainting
    from .scene import ingest as ingest_scene, load_scene, read_mask

    manifest, scene = _load_scene_dir(args.scene)
    grid = load_grid(args.grid)
    truth_manifest = ingest_scene(args.truth)
    truth = load_scene(truth_manifest)
    mask_root = Path(args.eval_masks)
    masks = [read_mask(mask_root / f"{n}.png") for n in truth.names]
    result = evaluate_inpainting(grid, scene.intrinsics, truth.images, truth.poses, masks)
    print(json.dumps(result, indent=2, default=float))


def cmd_serve(args):
    import logging

    import uvicorn

    from .service import JobManager, create_app

    logging.basicConfig(level=logging.INFO, format="%(message)s")
    manager = JobManager(args.data_root, max_workers=args.workers)
    app = create_app(manager)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvinpaint", description="Multiview segmentation and 3D scene inpainting")
    sub = p.add_subparsers(dest="command", required=True)

    def add_fit_flags(sp, resolution=32, iterations=400):
        sp.add_argument("--resolution", type=int, default=resolution, help="grid nodes per axis")
        sp.add_argument("--iterations", type=int, default=iterations)
        sp.add_argument("--rays-per-batch", type=int, default=2048)
        sp.add_argument("--samples", type=int, default=48, help="samples per ray")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--far", type=float, default=8.0, help="frustum truncation when the manifest has no bounds")

    sp = sub.add_parser("ingest", help="validate a scene directory and persist its manifest")
    sp.add_argument("scene")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("demo", help="write the bundled synthetic demo scene")
    sp.add_argument("--out", required=True)
    sp.add_argument("--views", type=int, default=16)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=7)
    sp.set_defaults(func=cmd_demo)

    sp = sub.add_parser("segment", help="multiview segmentation from sparse points")
    sp.add_argument("scene")
    sp.add_argument("--points", help="annotations JSON {source_view, positive, negative}")
    sp.add_argument("--source-mask", help=argparse.SUPPRESS)
    sp.add_argument("--masks-dir", help="externally produced initial masks (one PNG per view)")
    sp.add_argument("--stages", type=int, default=2, help="optimization stages (2 is the best-performing default)")
    sp.add_argument("--lambda-clf", type=float, default=0.1)
    sp.add_argument("--out")
    add_fit_flags(sp)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("refine", help="shrink masks by cross-view substitution")
    sp.add_argument("scene")
    sp.add_argument("--masks", required=True, help="mask directory (one PNG per view)")
    sp.add_argument("--grid", help="SPGR checkpoint of the original-scene field")
    sp.add_argument("--rgb-only", action="store_true", default=True, help="do not emit refined depth maps (default)")
    sp.add_argument("--with-depths", dest="rgb_only", action="store_false")
    sp.add_argument("--out")
    add_fit_flags(sp)
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("inpaint", help="remove the masked object and fit an inpainted field")
    sp.add_argument("scene")
    sp.add_argument("--masks", required=True, help="mask directory (one PNG per view)")
    sp.add_argument("--provider", default="harmonic", help="harmonic | dir:PATH")
    sp.add_argument("--dilate-kernel", type=int, default=5)
    sp.add_argument("--dilate-iters", type=int, default=5)
    sp.add_argument("--lambda-lpips", type=float, default=0.01)
    sp.add_argument("--lambda-depth", type=float, default=1.0)
    sp.add_argument("--no-depth-prior", action="store_true")
    sp.add_argument("--refine", action="store_true", help="run mask refinement before inpainting")
    sp.add_argument("--patch-factor", type=int, default=4, help="patch side = image side / factor")
    sp.add_argument("--out")
    add_fit_flags(sp, resolution=64, iterations=600)
    sp.set_defaults(func=cmd_inpaint)

    sp = sub.add_parser("render", help="render a view from a grid checkpoint")
    sp.add_argument("scene")
    sp.add_argument("--grid", required=True)
    sp.add_argument("--pose", help="16 comma-separated floats, row-major camera-to-world")
    sp.add_argument("--view", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--depth-out")
    sp.add_argument("--samples", type=int, default=96)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="masked-bbox metrics against ground-truth test views")
    sp.add_argument("scene")
    sp.add_argument("--grid", required=True)
    sp.add_argument("--truth", required=True, help="scene directory with object-free test views")
    sp.add_argument("--eval-masks", required=True, help="evaluation masks for the test views")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("serve", help="run the HTTP API")
    sp.add_argument("--port", type=int, default=int(os.environ.get("MVINPAINT_PORT", 8000)))
    sp.add_argument("--host", default=os.environ.get("MVINPAINT_HOST", "127.0.0.1"))
    sp.add_argument("--data-root", default=os.environ.get("MVINPAINT_DATA_ROOT", "./mvinpaint-data"))
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
