"""Multiview segmentation: mask initialization providers, geometric mask
projection, semantic-field fitting, thresholding, and staged refinement.

The pipeline lifts rough single-view annotations into 3D-consistent masks:
an initialization provider produces per-view guesses, a semantic field is
fitted against them (reconstruction + classification), and rendered
objectness probabilities are thresholded at 0.5. Later stages re-fit against
the previous stage's rendered masks, which repairs 2D noise because every
stage's masks are renders of one shared field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage

from .field import BoundingBox, RadianceGrid
from .geometry import Intrinsics, world_to_pixels
from .optim import FitConfig, fit
from .renderer import RenderOptions, expected_depth, render_view
from .scene import Scene, read_mask


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationSet:
    """Sparse user clicks on one source view."""

    source_view: int
    positive: tuple  # ((u, v), ...)
    negative: tuple = ()

    def __post_init__(self):
        if len(self.positive) < 1:
            raise SegmentationError("need at least one positive point")

    def validate_bounds(self, intr: Intrinsics):
        for u, v in tuple(self.positive) + tuple(self.negative):
            if not (0 <= u < intr.width and 0 <= v < intr.height):
                raise SegmentationError(f"point ({u}, {v}) outside {intr.width}x{intr.height} image")

    def to_json(self) -> dict:
        return {
            "source_view": self.source_view,
            "positive": [[float(u), float(v)] for u, v in self.positive],
            "negative": [[float(u), float(v)] for u, v in self.negative],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AnnotationSet":
        return cls(
            source_view=int(doc["source_view"]),
            positive=tuple((float(u), float(v)) for u, v in doc["positive"]),
            negative=tuple((float(u), float(v)) for u, v in doc.get("negative", [])),
        )


@dataclass
class MaskSet:
    masks: list  # per-view bool arrays
    provenance: str = "initial"
    dilation: tuple | None = None  # (kernel, iterations)

    def __len__(self):
        return len(self.masks)

    def areas(self) -> list[int]:
        return [int(m.sum()) for m in self.masks]


@dataclass
class SegmentationConfig:
    fit: FitConfig = dc_field(default_factory=lambda: FitConfig(mode="mv", iterations=300))
    threshold: float = 0.5
    render_samples: int = 64
    grid_resolution: tuple = (128, 128, 128)
    bounds: BoundingBox | None = None  # required (scene geometry is not derivable here)
    # region growing knobs
    grow_color_tol: float = 0.25
    grow_position_weight: float = 0.3


# -- mask initialization ------------------------------------------------------

def _grow_features(image: np.ndarray, position_weight: float) -> np.ndarray:
    H, W = image.shape[:2]
    vs, us = np.mgrid[0:H, 0:W]
    pos = np.stack([position_weight * us / W, position_weight * vs / H], axis=-1)
    return np.concatenate([image, pos], axis=-1)


def init_source_mask(
    image: np.ndarray,
    ann: AnnotationSet,
    color_tol: float = 0.25,
    position_weight: float = 0.3,
) -> np.ndarray:
    """Seeded region growing in a color+position feature space.

    Pixels join when they are closer (in feature space) to a positive click
    than to any negative click and within color_tol of the nearest positive;
    growth is the connected component containing a seed. One morphological
    close smooths the result; negative points always end up unmasked.
    """
    feats = _grow_features(np.asarray(image, dtype=np.float64), position_weight)
    H, W = image.shape[:2]

    def feature_at(u, v):
        return feats[min(int(v), H - 1), min(int(u), W - 1)]

    pos_feats = np.stack([feature_at(u, v) for u, v in ann.positive])
    d_pos = np.min(
        np.linalg.norm(feats[:, :, None, :] - pos_feats[None, None, :, :], axis=-1), axis=-1
    )
    if ann.negative:
        neg_feats = np.stack([feature_at(u, v) for u, v in ann.negative])
        d_neg = np.min(
            np.linalg.norm(feats[:, :, None, :] - neg_feats[None, None, :, :], axis=-1), axis=-1
        )
    else:
        d_neg = np.full((H, W), np.inf)
    candidate = (d_pos < color_tol) & (d_pos < d_neg)
    labels, _ = ndimage.label(candidate)
    seed_labels = {labels[min(int(v), H - 1), min(int(u), W - 1)] for u, v in ann.positive}
    seed_labels.discard(0)
    mask = np.isin(labels, sorted(seed_labels))
    mask = ndimage.binary_closing(mask, structure=np.ones((3, 3)))
    for u, v in ann.positive:
        mask[min(int(v), H - 1), min(int(u), W - 1)] = True
    for u, v in ann.negative:
        mask[min(int(v), H - 1), min(int(u), W - 1)] = False
    return mask


def project_mask(
    source_mask: np.ndarray,
    source_depth: np.ndarray,
    scene: Scene,
    target_view: int,
    source_view: int = 0,
    depth_tol_rel: float = 0.02,
    depth_tol_abs: float = 0.05,
) -> np.ndarray:
    """Geometric transfer of a source mask into a target view.

    Masked source pixels are lifted at their (ray-distance) depths and dropped
    into the target. When the scene carries target depth maps, a projected
    point whose distance to the target camera disagrees with the target's own
    depth fails the z-buffer test and is skipped (occluded in the target).
    """
    from .geometry import points_at_distance

    H, W = source_mask.shape
    ys, xs = np.nonzero(source_mask)
    out = np.zeros((scene.intrinsics.height, scene.intrinsics.width), dtype=bool)
    if ys.size == 0:
        return out
    rho = source_depth[ys, xs]
    ok = rho > 0
    ys, xs, rho = ys[ok], xs[ok], rho[ok]
    uv = np.stack([xs + 0.5, ys + 0.5], axis=-1)
    X = points_at_distance(scene.poses[source_view], scene.intrinsics, uv, rho)
    uvt, z, visible = world_to_pixels(scene.poses[target_view], scene.intrinsics, X)
    px = np.floor(uvt[:, 0]).astype(int)
    py = np.floor(uvt[:, 1]).astype(int)
    valid = visible & (px >= 0) & (px < W) & (py >= 0) & (py < H)
    if scene.depths is not None and scene.depths[target_view] is not None:
        dist_t = np.linalg.norm(X - scene.poses[target_view].translation, axis=-1)
        target_d = np.full(dist_t.shape, -1.0)
        target_d[valid] = scene.depths[target_view][py[valid], px[valid]]
        tol = depth_tol_rel * np.abs(target_d) + depth_tol_abs
        valid &= (target_d > 0) & (dist_t <= target_d + tol)
    out[py[valid], px[valid]] = True
    return out


class InitProvider:
    """Produces initial per-view masks from a scene and sparse annotations."""

    strategy = "abstract"
    needs_depth = False

    def initial_masks(self, scene: Scene, ann: AnnotationSet, depths=None) -> MaskSet:
        raise NotImplementedError


class RegionGrowProvider(InitProvider):
    """Region-grow the source view, transfer geometrically, re-grow per view.

    The projected partial mask seeds a second growing pass in each target so
    holes from resampling or occlusion close up.
    """

    strategy = "region-grow"
    needs_depth = True

    def __init__(self, color_tol: float = 0.25, position_weight: float = 0.3):
        self.color_tol = color_tol
        self.position_weight = position_weight

    def initial_masks(self, scene: Scene, ann: AnnotationSet, depths=None) -> MaskSet:
        if depths is None:
            raise SegmentationError("region-grow provider needs per-view depths")
        ann.validate_bounds(scene.intrinsics)
        src = ann.source_view
        source_mask = init_source_mask(
            scene.images[src], ann, color_tol=self.color_tol, position_weight=self.position_weight
        )
        masks = []
        for v in range(scene.n_views):
            if v == src:
                masks.append(source_mask)
                continue
            projected = project_mask(source_mask, depths[src], scene, v, source_view=src)
            if not projected.any():
                masks.append(projected)
                continue
            eroded = ndimage.binary_erosion(projected, structure=np.ones((3, 3)))
            seeds = eroded if eroded.any() else projected
            ys, xs = np.nonzero(seeds)
            step = max(1, ys.size // 64)
            grown = init_source_mask(
                scene.images[v],
                AnnotationSet(source_view=v, positive=tuple((x + 0.5, y + 0.5) for y, x in zip(ys[::step], xs[::step]))),
                color_tol=self.color_tol,
                position_weight=self.position_weight,
            )
            masks.append(grown | projected)
        return MaskSet(masks=masks, provenance="initial")


class ProjectOnlyProvider(InitProvider):
    """Source mask plus raw geometric projection, no per-view completion."""

    strategy = "project-only"
    needs_depth = True

    def __init__(self, color_tol: float = 0.25, position_weight: float = 0.3):
        self.color_tol = color_tol
        self.position_weight = position_weight

    def initial_masks(self, scene: Scene, ann: AnnotationSet, depths=None) -> MaskSet:
        if depths is None:
            raise SegmentationError("projection provider needs per-view depths")
        ann.validate_bounds(scene.intrinsics)
        src = ann.source_view
        source_mask = init_source_mask(
            scene.images[src], ann, color_tol=self.color_tol, position_weight=self.position_weight
        )
        masks = [
            source_mask if v == src else project_mask(source_mask, depths[src], scene, v, source_view=src)
            for v in range(scene.n_views)
        ]
        return MaskSet(masks=masks, provenance="projected")


class FileMasksProvider(InitProvider):
    """Externally produced masks, one PNG per view name."""

    strategy = "file"
    needs_depth = False

    def __init__(self, directory):
        self.directory = directory

    def initial_masks(self, scene: Scene, ann: AnnotationSet | None = None, depths=None) -> MaskSet:
        from pathlib import Path

        root = Path(self.directory)
        missing = [n for n in scene.names if not (root / f"{n}.png").exists()]
        if missing:
            raise SegmentationError(f"mask files missing for views: {', '.join(missing)}")
        return MaskSet(masks=[read_mask(root / f"{n}.png") for n in scene.names], provenance="initial")


# -- semantic field -----------------------------------------------------------

def fit_semantic_field(scene: Scene, init_masks: MaskSet, config: SegmentationConfig, cancel=None, progress=None) -> RadianceGrid:
    """Fit reconstruction + classification against the given supervision masks."""
    if len(init_masks.masks) != scene.n_views:
        raise SegmentationError(f"got {len(init_masks.masks)} masks for {scene.n_views} views")
    if config.bounds is None:
        raise SegmentationError("segmentation config needs scene bounds")
    grid = RadianceGrid(config.grid_resolution, config.bounds)
    cfg = config.fit
    if cfg.mode != "mv":
        raise SegmentationError("semantic field fitting uses mode 'mv'")
    fit(grid, scene, cfg, masks=init_masks.masks, cancel=cancel, progress=progress)
    return grid


def render_masks(grid: RadianceGrid, scene: Scene, threshold: float = 0.5, n_samples: int = 64) -> MaskSet:
    """Per view: render objectness logits, mask where sigmoid exceeds threshold.

    Empty rays render logit 0 (probability 0.5) and stay unmasked under the
    strict inequality.
    """
    masks = []
    for pose in scene.poses:
        _, _, logit, _ = render_view(grid, scene.intrinsics, pose, RenderOptions(n_samples=n_samples, mode="midpoint"))
        masks.append(1.0 / (1.0 + np.exp(-logit)) > threshold)
    return MaskSet(masks=masks, provenance="rendered")


@dataclass
class SegmentationResult:
    masks: MaskSet
    grid: RadianceGrid
    stage_masks: list  # MaskSet per stage
    init_masks: MaskSet
    depths: list | None = None  # support depths when a geometric provider ran


def segment(
    scene: Scene,
    ann: AnnotationSet | None = None,
    stages: int = 2,
    config: SegmentationConfig | None = None,
    init_masks: MaskSet | None = None,
    provider: InitProvider | None = None,
    cancel=None,
    progress=None,
) -> SegmentationResult:
    """Full multiview segmentation: initialize, then `stages` rounds of
    semantic-field fitting, each supervised by the previous round's renders."""
    if stages < 1:
        raise SegmentationError("need at least one stage")
    config = config or SegmentationConfig()
    depths = None
    if init_masks is None:
        if ann is None and provider is None:
            raise SegmentationError("segment needs annotations, a provider, or initial masks")
        provider = provider or RegionGrowProvider(
            color_tol=config.grow_color_tol, position_weight=config.grow_position_weight
        )
        if provider.needs_depth:
            if ann is None:
                raise SegmentationError(f"{provider.strategy} provider needs annotations")
            depths = _support_depths(scene, config, cancel=cancel)
        init_masks = provider.initial_masks(scene, ann, depths=depths)
    supervision = init_masks
    stage_masks = []
    grid = None
    for k in range(stages):
        stage_progress = None
        if progress is not None:
            stage_progress = lambda f, k=k: progress((k + f) / stages)
        grid = fit_semantic_field(scene, supervision, config, cancel=cancel, progress=stage_progress)
        rendered = render_masks(grid, scene, config.threshold, config.render_samples)
        rendered.provenance = f"rendered-stage-{k + 1}"
        stage_masks.append(rendered)
        supervision = rendered
    return SegmentationResult(masks=stage_masks[-1], grid=grid, stage_masks=stage_masks, init_masks=init_masks, depths=depths)


def _support_depths(scene: Scene, config: SegmentationConfig, cancel=None) -> list[np.ndarray]:
    """Plain reconstruction fit used only to lift masks geometrically."""
    from dataclasses import replace

    grid = RadianceGrid(config.grid_resolution, config.bounds)
    cfg = replace(config.fit, mode="rec")
    fit(grid, scene, cfg, cancel=cancel)
    depths = []
    for pose in scene.poses:
        _, depth, _, opacity = render_view(
            grid, scene.intrinsics, pose, RenderOptions(n_samples=config.render_samples, mode="midpoint")
        )
        d = expected_depth(depth, opacity)
        d[opacity <= 0.1] = 0.0
        depths.append(d)
    return depths


# -- morphology & metrics -----------------------------------------------------

def dilate(mask: np.ndarray, kernel: int = 5, iterations: int = 5) -> np.ndarray:
    """Binary dilation with a square structuring element."""
    if iterations < 0:
        raise SegmentationError("iterations must be >= 0")
    if iterations == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((kernel, kernel)), iterations=iterations)


def dilate_set(masks: MaskSet, kernel: int = 5, iterations: int = 5) -> MaskSet:
    return MaskSet(
        masks=[dilate(m, kernel, iterations) for m in masks.masks],
        provenance="dilated",
        dilation=(kernel, iterations),
    )


def evaluate_masks(pred: MaskSet, truth: MaskSet) -> dict:
    """Pixel accuracy and IoU per view plus means, in percent.

    IoU of two empty masks is 100 (documented: the metric's edge case is not
    exercised upstream)."""
    if len(pred.masks) != len(truth.masks):
        raise SegmentationError("mask counts differ")
    acc, iou = [], []
    for p, t in zip(pred.masks, truth.masks):
        if p.shape != t.shape:
            raise SegmentationError(f"mask shapes differ: {p.shape} vs {t.shape}")
        acc.append(100.0 * int((p == t).sum()) / p.size)
        union = int(np.logical_or(p, t).sum())
        inter = int(np.logical_and(p, t).sum())
        iou.append(100.0 if union == 0 else 100.0 * inter / union)
    return {
        "accuracy": acc,
        "iou": iou,
        "mean_accuracy": float(np.mean(acc)),
        "mean_iou": float(np.mean(iou)),
    }


def save_annotations(path, ann: AnnotationSet):
    with open(path, "w") as f:
        json.dump(ann.to_json(), f, indent=2)


def load_annotations(path) -> AnnotationSet:
    with open(path) as f:
        return AnnotationSet.from_json(json.load(f))
