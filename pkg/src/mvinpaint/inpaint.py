"""3D inpainting: pluggable 2D inpainting of RGB and depth priors, optional
mask refinement, and fitting a fresh field on unmasked reconstruction +
perceptual patches + depth supervision.

Pipeline order: dilate masks, fit (or reuse) the original-scene field, render
its depth maps, optionally refine RGB by cross-view substitution, build
appearance/geometry priors with the 2D provider, then fit the inpainted field.
When refinement runs RGB-only (default), the depth-prior path keeps the
original rendered depths with the original dilated masks so no object depth
leaks through the shrunken refined masks.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import spsolve

from .field import BoundingBox, RadianceGrid, save_grid
from .optim import FitConfig, LossWeights, PerceptualExtractor, default_extractor, fit, mask_bbox, mse, perceptual_distance
from .refine import RefineConfig, refine_views
from .renderer import RenderOptions, expected_depth, render_view
from .scene import Scene, read_image, read_pfm, write_image, write_mask, write_pfm
from .segmentation import MaskSet, dilate_set


class InpaintError(RuntimeError):
    pass


class InpaintProvider:
    """2D inpainter interface; unmasked pixels must come back unchanged."""

    provider_id = "abstract"

    def prepare(self, scene: Scene):
        """Validate against a scene before the pipeline runs (optional)."""

    def inpaint_rgb(self, image: np.ndarray, mask: np.ndarray, view: str | None = None) -> np.ndarray:
        raise NotImplementedError

    def inpaint_depth(self, depth: np.ndarray, mask: np.ndarray, view: str | None = None) -> np.ndarray:
        raise NotImplementedError


def _composite(original: np.ndarray, filled: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Enforce the provider invariant: unmasked pixels bit-identical."""
    out = original.copy()
    out[mask] = filled[mask]
    return out


def harmonic_fill(channel: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill the masked region with the discrete harmonic extension of the
    unmasked boundary (direct sparse solve of the Laplace system).

    Raises when a masked component has no unmasked in-bounds neighbour to
    supply Dirichlet data (e.g. a fully masked image).
    """
    if not mask.any():
        return channel.copy()
    H, W = channel.shape
    cross = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, n_comp = ndimage.label(mask)
    for c in range(1, n_comp + 1):
        ring = ndimage.binary_dilation(labels == c, structure=cross) & ~mask
        if not ring.any():
            raise InpaintError(f"masked component {c} has no unmasked boundary to interpolate from")
    idx = np.full((H, W), -1, dtype=np.int64)
    ys, xs = np.nonzero(mask)
    idx[ys, xs] = np.arange(ys.size)
    rows, cols, vals = [], [], []
    rhs = np.zeros(ys.size)
    deg = np.zeros(ys.size)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = ys + dy, xs + dx
        inb = (ny >= 0) & (ny < H) & (nx >= 0) & (nx < W)
        deg += inb
        nyc, nxc = np.clip(ny, 0, H - 1), np.clip(nx, 0, W - 1)
        neighbor_masked = inb & mask[nyc, nxc]
        rows.extend(idx[ys[neighbor_masked], xs[neighbor_masked]])
        cols.extend(idx[nyc[neighbor_masked], nxc[neighbor_masked]])
        vals.extend([-1.0] * int(neighbor_masked.sum()))
        dirichlet = inb & ~mask[nyc, nxc]
        np.add.at(rhs, idx[ys[dirichlet], xs[dirichlet]], channel[nyc[dirichlet], nxc[dirichlet]])
    rows.extend(range(ys.size))
    cols.extend(range(ys.size))
    vals.extend(deg)
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(ys.size, ys.size))
    solution = spsolve(A, rhs)
    out = channel.copy()
    out[ys, xs] = solution
    return out


class HarmonicInpainter(InpaintProvider):
    """Built-in dependency-free inpainter: per-channel harmonic extension.

    It only ever extends the surrounding background, which is exactly the
    behaviour the perceptual fitting stage expects from its 2D priors.
    """

    provider_id = "harmonic"

    def inpaint_rgb(self, image, mask, view=None):
        out = np.stack([harmonic_fill(image[..., c], mask) for c in range(image.shape[-1])], axis=-1)
        return _composite(image, out, mask)

    def inpaint_depth(self, depth, mask, view=None):
        return _composite(depth, harmonic_fill(depth, mask), mask)


class DirectoryInpainter(InpaintProvider):
    """Externally produced inpaintings: <name>.png (and optional <name>.pfm
    depth) per view. Missing depth files fall back to the harmonic fill.

    Outputs are composited over the originals, so the unmasked-unchanged
    invariant holds regardless of what the directory contains.
    """

    provider_id = "directory"

    def __init__(self, path):
        self.root = Path(path)
        self._fallback = HarmonicInpainter()

    def prepare(self, scene: Scene):
        missing = [n for n in scene.names if not (self.root / f"{n}.png").exists()]
        if missing:
            raise InpaintError(f"inpainting directory missing views: {', '.join(missing)}")

    def inpaint_rgb(self, image, mask, view=None):
        if view is None:
            raise InpaintError("directory provider needs the view name")
        path = self.root / f"{view}.png"
        if not path.exists():
            raise InpaintError(f"inpainting directory missing views: {view}")
        return _composite(image, read_image(path), mask)

    def inpaint_depth(self, depth, mask, view=None):
        path = self.root / f"{view}.pfm" if view is not None else None
        if path is not None and path.exists():
            return _composite(depth, read_pfm(path), mask)
        return self._fallback.inpaint_depth(depth, mask)


def directory_provider(path) -> InpaintProvider:
    return DirectoryInpainter(path)


def harmonic_provider() -> InpaintProvider:
    return HarmonicInpainter()


@dataclass
class Priors:
    images: list
    depths: list | None
    masks_used: MaskSet
    provider_id: str


def build_rgb_priors(scene_images, names, masks: MaskSet, provider: InpaintProvider) -> list:
    return [
        _composite(img, provider.inpaint_rgb(img, m, view=n), m)
        for img, m, n in zip(scene_images, masks.masks, names)
    ]


def extract_depth_priors(original_grid: RadianceGrid, scene: Scene, masks: MaskSet, provider: InpaintProvider, n_samples: int = 96) -> list:
    """Render per-view depth from the original-scene field and inpaint it."""
    priors = []
    for pose, m, name in zip(scene.poses, masks.masks, scene.names):
        _, depth, _, opacity = render_view(
            original_grid, scene.intrinsics, pose, RenderOptions(n_samples=n_samples, mode="midpoint")
        )
        d = expected_depth(depth, opacity)
        d[opacity <= 1e-6] = 0.0
        priors.append(_composite(d, provider.inpaint_depth(d, m, view=name), m))
    return priors


@dataclass
class InpaintOptions:
    provider: InpaintProvider = dc_field(default_factory=HarmonicInpainter)
    dilate_kernel: int = 5
    dilate_iters: int = 5
    refine: bool = False
    refine_depths: bool = False  # Table-2 pattern: refined depths hurt, keep off
    refine_config: RefineConfig = dc_field(default_factory=RefineConfig)
    weights: LossWeights = dc_field(default_factory=LossWeights)
    fit: FitConfig = dc_field(default_factory=lambda: FitConfig(mode="inpaint", iterations=600))
    original_fit: FitConfig = dc_field(default_factory=lambda: FitConfig(mode="rec", iterations=400))
    original_grid: RadianceGrid | None = None
    grid_resolution: tuple = (128, 128, 128)
    bounds: BoundingBox | None = None
    depth_samples: int = 96
    stage_dir: Path | None = None


def inpaint_scene(scene: Scene, masks: MaskSet, options: InpaintOptions, cancel=None, progress=None):
    """Remove the masked object and fit an inpainted field.

    Returns (grid, report dict). Stage artifacts land under options.stage_dir
    when given: dilated_masks/, refined/, priors_rgb/, priors_depth/,
    inpainted_grid.spgr, report.json.
    """
    if options.bounds is None:
        raise InpaintError("inpaint options need scene bounds")
    options.weights.validate()
    t0 = time.perf_counter()
    report: dict = {"provider": options.provider.provider_id}
    options.provider.prepare(scene)

    dilated = dilate_set(masks, options.dilate_kernel, options.dilate_iters)
    use_depth = options.weights.lambda_depth > 0
    any_masked = any(m.any() for m in dilated.masks)

    original_grid = options.original_grid
    depth_maps = None
    if (use_depth or options.refine) and any_masked:
        if original_grid is None:
            original_grid = RadianceGrid(options.grid_resolution, options.bounds)
            rep = fit(original_grid, scene, options.original_fit, cancel=cancel)
            report["original_fit"] = {"iterations": rep.iterations, "final": rep.final_losses()}
        depth_maps = []
        for pose in scene.poses:
            _, depth, _, opacity = render_view(
                original_grid, scene.intrinsics, pose, RenderOptions(n_samples=options.depth_samples, mode="midpoint")
            )
            d = expected_depth(depth, opacity)
            d[opacity <= 1e-6] = 0.0
            depth_maps.append(d)

    fit_images = scene.images
    rgb_masks = dilated
    refine_stats = None
    refined_depths = None
    if options.refine and any_masked:
        imgs, deps, refined_mask_arrays, refine_stats = refine_views(
            scene, depth_maps, dilated.masks, options.refine_config
        )
        fit_images = imgs
        refined_depths = deps
        rgb_masks = MaskSet(masks=refined_mask_arrays, provenance="refined", dilation=dilated.dilation)
        report["refine"] = refine_stats.to_json()

    provider = options.provider
    prior_images = None
    prior_depths = None
    if any_masked:
        prior_images = build_rgb_priors(fit_images, scene.names, rgb_masks, provider)
        if use_depth:
            if options.refine and options.refine_depths:
                depth_src, depth_masks = refined_depths, rgb_masks
            else:
                depth_src, depth_masks = depth_maps, dilated
            prior_depths = [
                _composite(d, provider.inpaint_depth(d, m, view=n), m)
                for d, m, n in zip(depth_src, depth_masks.masks, scene.names)
            ]
    else:
        prior_images = list(fit_images)

    fit_scene = Scene(
        intrinsics=scene.intrinsics, poses=scene.poses, images=fit_images, names=scene.names
    )
    grid = RadianceGrid(options.grid_resolution, options.bounds)
    cfg = replace(options.fit, mode="inpaint", weights=options.weights)
    rep = fit(
        grid,
        fit_scene,
        cfg,
        masks=rgb_masks.masks,
        prior_images=prior_images,
        prior_depths=prior_depths,
        cancel=cancel,
        progress=progress,
    )
    report["inpaint_fit"] = {"iterations": rep.iterations, "final": rep.final_losses(), "checksum": rep.checksum}
    report["wall_time_s"] = time.perf_counter() - t0
    report["masked_pixels"] = int(sum(m.sum() for m in rgb_masks.masks))

    if options.stage_dir is not None:
        _write_stage_dir(options.stage_dir, scene, dilated, rgb_masks, fit_images, prior_images, prior_depths, grid, report, refine_stats, refined_depths)
    return grid, report


def _write_stage_dir(stage_dir, scene, dilated, rgb_masks, fit_images, prior_images, prior_depths, grid, report, refine_stats, refined_depths):
    root = Path(stage_dir)
    (root / "dilated_masks").mkdir(parents=True, exist_ok=True)
    for n, m in zip(scene.names, dilated.masks):
        write_mask(root / "dilated_masks" / f"{n}.png", m)
    if refine_stats is not None:
        refined = root / "refined"
        refined.mkdir(exist_ok=True)
        for n, img, m in zip(scene.names, fit_images, rgb_masks.masks):
            write_image(refined / f"{n}.png", img)
            write_mask(refined / f"{n}_mask.png", m)
        if refined_depths is not None:
            for n, d in zip(scene.names, refined_depths):
                write_pfm(refined / f"{n}.pfm", d)
        (refined / "stats.json").write_text(json.dumps(refine_stats.to_json(), indent=2))
    if prior_images is not None:
        (root / "priors_rgb").mkdir(exist_ok=True)
        for n, img in zip(scene.names, prior_images):
            write_image(root / "priors_rgb" / f"{n}.png", img)
    if prior_depths is not None:
        (root / "priors_depth").mkdir(exist_ok=True)
        for n, d in zip(scene.names, prior_depths):
            write_pfm(root / "priors_depth" / f"{n}.pfm", d)
    save_grid(grid, root / "inpainted_grid.spgr")
    (root / "report.json").write_text(json.dumps(report, indent=2, default=float))


def expand_bbox(bbox, shape, frac: float = 0.10):
    """Grow each side of an inclusive bbox by `frac` of its length, clamped."""
    x0, y0, x1, y1 = bbox
    w = x1 - x0 + 1
    h = y1 - y0 + 1
    H, W = shape
    return (
        max(0, int(np.floor(x0 - frac * w))),
        max(0, int(np.floor(y0 - frac * h))),
        min(W - 1, int(np.ceil(x1 + frac * w))),
        min(H - 1, int(np.ceil(y1 + frac * h))),
    )


def evaluate_inpainting(
    grid: RadianceGrid,
    intr,
    truth_views: list,
    truth_poses: list,
    masks_for_eval: list,
    ext: PerceptualExtractor | None = None,
    n_samples: int = 96,
):
    """Masked-bbox perceptual distance and MSE of rendered vs ground-truth
    test views; the bbox of each evaluation mask grows 10% per side."""
    ext = ext or default_extractor()
    per_view = []
    skipped = 0
    for truth, pose, mask in zip(truth_views, truth_poses, masks_for_eval):
        bbox = mask_bbox(mask)
        if bbox is None:
            skipped += 1
            continue
        x0, y0, x1, y1 = expand_bbox(bbox, mask.shape)
        rendered, _, _, _ = render_view(grid, intr, pose, RenderOptions(n_samples=n_samples, mode="midpoint"))
        crop_r = rendered[y0 : y1 + 1, x0 : x1 + 1]
        crop_t = truth[y0 : y1 + 1, x0 : x1 + 1]
        per_view.append(
            {
                "masked_bbox_perceptual": perceptual_distance(ext, crop_r, crop_t),
                "masked_mse": mse(crop_r, crop_t),
            }
        )
    if not per_view:
        return {"per_view": [], "mean_perceptual": None, "mean_mse": None, "skipped": skipped}
    return {
        "per_view": per_view,
        "mean_perceptual": float(np.mean([v["masked_bbox_perceptual"] for v in per_view])),
        "mean_mse": float(np.mean([v["masked_mse"] for v in per_view])),
        "skipped": skipped,
    }
