"""Losses, patch sampling, the perceptual filter bank, and the fit driver.

Loss catalogue (all non-negative, zero at their optimum):

  - reconstruction: sum over rays of squared RGB error; gradients through
    density + color (policy REC). The inpainting variant filters to unmasked
    rays only.
  - classification: mean BCE between mask labels and sigmoid(rendered logit);
    gradients reach logits only (policy CLF), so a classification step leaves
    density and color bit-identical.
  - combined: reconstruction + lambda_clf * classification, shared forward.
  - depth: mean squared error of rendered vs target ray distance; gradients to
    density only (policy DEPTH).
  - perceptual: filter-bank feature distance between a rendered patch and its
    inpainted counterpart; gradients reach color only (policy LPIPS).

Reconstruction is a sum and the others are means, as defined; the default
lambdas fold the normalization difference.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import correlate1d

from .field import CHANNELS, AdamState, GradBuffer, RadianceGrid, StepConfig, apply_update
from .geometry import Intrinsics, Pose, generate_rays, view_ray_grid
from .renderer import intersect_bounds, render_rays, render_rays_backward, sample_t_values
from .scene import Scene


class FitCancelled(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class LossWeights:
    lambda_clf: float = 0.1
    lambda_lpips: float = 0.01
    lambda_depth: float = 1.0

    def validate(self):
        for name in ("lambda_clf", "lambda_lpips", "lambda_depth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class PatchSpec:
    downscale_factor: int = 16
    stride: int = 2
    views_per_batch: int = 4

    def validate(self):
        if self.downscale_factor < 1 or self.stride < 1 or self.views_per_batch < 1:
            raise ValueError("patch spec fields must be >= 1")


@dataclass
class RayBatch:
    """Rays with per-ray supervision targets and provenance."""

    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3) unit
    target_rgb: np.ndarray  # (R, 3)
    masked: np.ndarray  # (R,) bool
    target_depth: np.ndarray | None = None  # (R,)
    view_idx: np.ndarray | None = None
    pixel_uv: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.origins.shape[0]

    def take(self, sel: np.ndarray) -> "RayBatch":
        return RayBatch(
            origins=self.origins[sel],
            dirs=self.dirs[sel],
            target_rgb=self.target_rgb[sel],
            masked=self.masked[sel],
            target_depth=None if self.target_depth is None else self.target_depth[sel],
            view_idx=None if self.view_idx is None else self.view_idx[sel],
            pixel_uv=None if self.pixel_uv is None else self.pixel_uv[sel],
        )


@dataclass
class Counters:
    empty_rec_batches: int = 0

    def reset(self):
        self.empty_rec_batches = 0


counters = Counters()


def _forward(grid, origins, dirs, n_samples, mode, rng):
    """Render rays against the grid bounds; rays missing the box render zero.

    Returns (out dict over all rays, cache, hit index array).
    """
    R = origins.shape[0]
    t0, t1, hit = intersect_bounds(origins, dirs, grid.bounds)
    sel = np.nonzero(hit)[0]
    out = {
        "color": np.zeros((R, 3)),
        "depth": np.zeros(R),
        "logit": np.zeros(R),
        "opacity": np.zeros(R),
    }
    cache = None
    if sel.size:
        t, deltas = sample_t_values(t0[sel], t1[sel], n_samples, mode, rng)
        sub, cache = render_rays(grid, origins[sel], dirs[sel], t, deltas)
        for k in ("color", "depth", "logit", "opacity"):
            out[k][sel] = sub[k]
    return out, cache, sel


def loss_rec(
    grid: RadianceGrid,
    batch: RayBatch,
    buf: GradBuffer | None = None,
    unmasked_only: bool = False,
    n_samples: int = 64,
    mode: str = "midpoint",
    rng: np.random.Generator | None = None,
    grad_scale: float = 1.0,
) -> float:
    """Sum of squared RGB errors over the (optionally unmasked-only) batch."""
    work = batch.take(~batch.masked) if unmasked_only else batch
    if work.size == 0:
        counters.empty_rec_batches += 1
        return 0.0
    out, cache, sel = _forward(grid, work.origins, work.dirs, n_samples, mode, rng)
    resid = out["color"] - work.target_rgb
    value = float(np.sum(resid**2))
    if buf is not None and cache is not None:
        render_rays_backward(grid, cache, buf, "REC", d_color=2.0 * grad_scale * resid[sel])
    return value


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _bce_from_logits(y, s):
    # -[y ln sigmoid(s) + (1-y) ln(1-sigmoid(s))], log(0)-free
    return y * _softplus(-s) + (1.0 - y) * _softplus(s)


def loss_clf(
    grid: RadianceGrid,
    batch: RayBatch,
    buf: GradBuffer | None = None,
    n_samples: int = 64,
    mode: str = "midpoint",
    rng: np.random.Generator | None = None,
    grad_scale: float = 1.0,
) -> float:
    """Mean BCE between mask labels and per-ray objectness probabilities.

    Computed in logit space, so probabilities saturated past float precision
    never hit log(0).
    """
    out, cache, sel = _forward(grid, batch.origins, batch.dirs, n_samples, mode, rng)
    y = batch.masked.astype(np.float64)
    value = float(np.mean(_bce_from_logits(y, out["logit"])))
    if buf is not None and cache is not None:
        d_logit = grad_scale * (_sigmoid(out["logit"]) - y) / batch.size
        render_rays_backward(grid, cache, buf, "CLF", d_logit=d_logit[sel])
    return value


def loss_mv(
    grid: RadianceGrid,
    batch: RayBatch,
    weights: LossWeights | None = None,
    buf: GradBuffer | None = None,
    n_samples: int = 64,
    mode: str = "midpoint",
    rng: np.random.Generator | None = None,
):
    """Reconstruction + lambda_clf * classification with one shared forward.

    Returns (total, {"rec": ..., "clf": ...}).
    """
    weights = weights or LossWeights()
    out, cache, sel = _forward(grid, batch.origins, batch.dirs, n_samples, mode, rng)
    resid = out["color"] - batch.target_rgb
    l_rec = float(np.sum(resid**2))
    y = batch.masked.astype(np.float64)
    l_clf = float(np.mean(_bce_from_logits(y, out["logit"])))
    if buf is not None and cache is not None:
        render_rays_backward(grid, cache, buf, "REC", d_color=2.0 * resid[sel])
        d_logit = weights.lambda_clf * (_sigmoid(out["logit"]) - y) / batch.size
        render_rays_backward(grid, cache, buf, "CLF", d_logit=d_logit[sel])
    return l_rec + weights.lambda_clf * l_clf, {"rec": l_rec, "clf": l_clf}


def loss_depth(
    grid: RadianceGrid,
    batch: RayBatch,
    buf: GradBuffer | None = None,
    n_samples: int = 64,
    mode: str = "midpoint",
    rng: np.random.Generator | None = None,
    grad_scale: float = 1.0,
) -> float:
    """Mean squared error of rendered ray distance against target depths.

    Zero-opacity rays contribute with rendered depth 0 (renderer convention).
    """
    if batch.target_depth is None or not np.all(np.isfinite(batch.target_depth)):
        raise ValueError("depth loss needs finite target depths")
    out, cache, sel = _forward(grid, batch.origins, batch.dirs, n_samples, mode, rng)
    resid = out["depth"] - batch.target_depth
    value = float(np.mean(resid**2))
    if buf is not None and cache is not None:
        render_rays_backward(grid, cache, buf, "DEPTH", d_depth=2.0 * grad_scale * resid[sel] / batch.size)
    return value


# -- perceptual filter bank ---------------------------------------------------

_BLUR5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_FILTERS = np.array(
    [
        [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]],  # horizontal derivative
        [[-1, -2, -1], [0, 0, 0], [1, 2, 1]],  # vertical derivative
        [[-2, -1, 0], [-1, 0, 1], [0, 1, 2]],  # diagonal /
        [[0, -1, -2], [1, 0, -1], [2, 1, 0]],  # diagonal \
        [[-1, -1, -1], [-1, 8, -1], [-1, -1, -1]],  # center-surround
    ],
    dtype=np.float64,
) / 4.0

_NORM_EPS = 1e-10


def _corr2(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Zero-padded same-size 2D correlation (exact adjoint: flipped kernel)."""
    out = np.zeros_like(x)
    kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw)))
    for i in range(kh):
        for j in range(kw):
            out += k[i, j] * xp[i : i + x.shape[0], j : j + x.shape[1]]
    return out


def _blur_down(x: np.ndarray) -> np.ndarray:
    """5-tap separable blur (zero padding) then stride-2 subsample; x is (C,H,W)."""
    y = correlate1d(x, _BLUR5, axis=1, mode="constant")
    y = correlate1d(y, _BLUR5, axis=2, mode="constant")
    return y[:, ::2, ::2]


def _blur_down_vjp(u: np.ndarray, shape) -> np.ndarray:
    up = np.zeros((u.shape[0],) + shape)
    up[:, ::2, ::2] = u
    y = correlate1d(up, _BLUR5, axis=1, mode="constant")
    return correlate1d(y, _BLUR5, axis=2, mode="constant")


class PerceptualExtractor:
    """Interface: a fixed multi-layer feature producer with its own adjoint."""

    n_layers: int
    layer_weights: tuple

    def feature_maps(self, patch: np.ndarray) -> list[np.ndarray]:
        raise NotImplementedError

    def feature_maps_vjp(self, patch: np.ndarray, upstreams: list[np.ndarray]) -> np.ndarray:
        raise NotImplementedError


class FilterBankExtractor(PerceptualExtractor):
    """3-scale oriented-derivative + center-surround bank, channelwise.

    Deterministic, linear (exact adjoint), translation-equivariant up to the
    zero-padded borders. Filter taps are build-time constants.
    """

    n_layers = 3
    layer_weights = (1.0, 1.0, 1.0)

    def _pyramid(self, x: np.ndarray) -> list[np.ndarray]:
        levels = [x]
        for _ in range(self.n_layers - 1):
            levels.append(_blur_down(levels[-1]))
        return levels

    def feature_maps(self, patch: np.ndarray) -> list[np.ndarray]:
        """patch (H,W,3) in [0,1] -> per-scale feature maps (15, h, w)."""
        x = np.moveaxis(np.asarray(patch, dtype=np.float64), -1, 0)
        maps = []
        for level in self._pyramid(x):
            feats = [_corr2(level[c], k) for c in range(level.shape[0]) for k in _FILTERS]
            maps.append(np.stack(feats, axis=0))
        return maps

    def feature_maps_vjp(self, patch: np.ndarray, upstreams: list[np.ndarray]) -> np.ndarray:
        x = np.moveaxis(np.asarray(patch, dtype=np.float64), -1, 0)
        levels = self._pyramid(x)
        grad_levels = []
        for level, up in zip(levels, upstreams):
            g = np.zeros_like(level)
            for c in range(level.shape[0]):
                for f, k in enumerate(_FILTERS):
                    g[c] += _corr2(up[c * len(_FILTERS) + f], k[::-1, ::-1])
            grad_levels.append(g)
        # collapse the pyramid from coarse to fine
        g = grad_levels[-1]
        for s in range(self.n_layers - 2, -1, -1):
            g = grad_levels[s] + _blur_down_vjp(g, levels[s].shape[1:])
        return np.moveaxis(g, 0, -1)


def default_extractor() -> PerceptualExtractor:
    return FilterBankExtractor()


def _normalize(f: np.ndarray):
    r = np.sqrt(np.sum(f**2, axis=0, keepdims=True) + _NORM_EPS)
    return f / r, r


def perceptual_distance(ext: PerceptualExtractor, a: np.ndarray, b: np.ndarray) -> float:
    """Weighted mean squared difference of unit-normalized feature maps."""
    value, _ = _perceptual(ext, a, b, want_grad=False)
    return value


def perceptual_distance_grad(ext: PerceptualExtractor, a: np.ndarray, b: np.ndarray):
    """Return (distance, d distance / d a)."""
    return _perceptual(ext, a, b, want_grad=True)


def _perceptual(ext, a, b, want_grad):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"patch shapes differ: {a.shape} vs {b.shape}")
    fa = ext.feature_maps(a)
    fb = ext.feature_maps(b)
    total = 0.0
    upstreams = []
    for w, xa, xb in zip(ext.layer_weights, fa, fb):
        na, ra = _normalize(xa)
        nb, _ = _normalize(xb)
        diff = na - nb
        total += w * float(np.mean(diff**2))
        if want_grad:
            u = 2.0 * w * diff / diff.size
            # normalization jacobian: d(na)/d(xa) applied to u
            dot = np.sum(u * xa, axis=0, keepdims=True)
            upstreams.append(u / ra - xa * dot / ra**3)
    if not want_grad:
        return total, None
    return total, ext.feature_maps_vjp(a, upstreams)


# -- patch machinery ----------------------------------------------------------

def mask_bbox(mask: np.ndarray):
    """Inclusive (x0, y0, x1, y1) of the mask; None when empty."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def sample_patches(views, masks, spec: PatchSpec, rng: np.random.Generator):
    """Pick (view, rect) pairs; rects are (x0, y0, w, h) on the stride grid,
    constrained to intersect the view's mask bounding box."""
    spec.validate()
    n_views = len(views)
    if n_views >= spec.views_per_batch:
        chosen = rng.choice(n_views, size=spec.views_per_batch, replace=False)
    else:
        chosen = rng.integers(0, n_views, size=spec.views_per_batch)
    out = []
    for v in chosen:
        H, W = views[v].shape[:2]
        pw, ph = max(1, W // spec.downscale_factor), max(1, H // spec.downscale_factor)
        bbox = mask_bbox(masks[v])
        if bbox is None:
            raise ValueError(f"view {v}: mask has empty bounding box")
        x0b, y0b, x1b, y1b = bbox
        if (x1b - x0b + 1) < pw and (y1b - y0b + 1) < ph:
            # bbox smaller than a patch: center on it, clamped to the image
            cx, cy = (x0b + x1b) // 2, (y0b + y1b) // 2
            x0 = int(np.clip(cx - pw // 2, 0, W - pw))
            y0 = int(np.clip(cy - ph // 2, 0, H - ph))
            out.append((int(v), (x0, y0, pw, ph)))
            continue
        xs = np.arange(0, W - pw + 1, spec.stride)
        ys = np.arange(0, H - ph + 1, spec.stride)
        xs = xs[(xs <= x1b) & (xs + pw > x0b)]
        ys = ys[(ys <= y1b) & (ys + ph > y0b)]
        if xs.size == 0 or ys.size == 0:
            cx, cy = (x0b + x1b) // 2, (y0b + y1b) // 2
            x0 = int(np.clip(cx - pw // 2, 0, W - pw))
            y0 = int(np.clip(cy - ph // 2, 0, H - ph))
            out.append((int(v), (x0, y0, pw, ph)))
            continue
        out.append((int(v), (int(rng.choice(xs)), int(rng.choice(ys)), pw, ph)))
    return out


def patch_pixel_grid(rect) -> np.ndarray:
    x0, y0, w, h = rect
    vs, us = np.mgrid[y0 : y0 + h, x0 : x0 + w]
    return np.stack([us + 0.5, vs + 0.5], axis=-1).reshape(-1, 2)


# -- fit driver ---------------------------------------------------------------

@dataclass
class FitConfig:
    mode: str = "rec"  # rec | mv | inpaint
    iterations: int = 2000
    rays_per_batch: int = 2048
    n_samples: int = 192
    sampling: str = "stratified"  # stratified | midpoint
    lr: float = 1e-2
    lr_density: float = 1.0  # raw density must traverse tens of softplus units
    lr_logit: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    weights: LossWeights = dc_field(default_factory=LossWeights)
    patches: PatchSpec = dc_field(default_factory=PatchSpec)
    seed: int = 0
    checkpoint_every: int = 100
    log_every: int = 10
    debug_audit: bool = False
    coarse_stages: tuple = ((4, 150), (2, 150))  # (downsample factor, iterations)
    checkpoint_path: str | None = None  # also persist the periodic snapshot here

    def validate(self):
        if self.mode not in ("rec", "mv", "inpaint"):
            raise ValueError(f"unknown fit mode '{self.mode}'")
        if self.iterations < 0 or self.rays_per_batch < 1 or self.n_samples < 1:
            raise ValueError("bad schedule values")
        for stage in self.coarse_stages:
            if len(stage) != 2 or stage[0] < 1 or stage[1] < 0:
                raise ValueError(f"bad coarse stage {stage}")
        self.weights.validate()
        self.patches.validate()


@dataclass
class FitReport:
    iterations: int = 0
    wall_time_s: float = 0.0
    losses: dict = dc_field(default_factory=dict)  # name -> list per logged iter
    logged_iters: list = dc_field(default_factory=list)
    wall_ms: list = dc_field(default_factory=list)
    checksum: str = ""
    diverged: bool = False
    warnings: dict = dc_field(default_factory=dict)

    def record(self, it, values: dict, wall_ms: float):
        self.logged_iters.append(it)
        for k, v in values.items():
            self.losses.setdefault(k, []).append(v)
        self.wall_ms.append(wall_ms)

    def final_losses(self) -> dict:
        return {k: (v[-1] if v else None) for k, v in self.losses.items()}

    def write_csv(self, path):
        names = sorted(n for n in self.losses if n != "total")
        with open(path, "w") as f:
            f.write("iteration," + ",".join(names) + ",total,wall_ms\n")
            for row, it in enumerate(self.logged_iters):
                vals = [self.losses[n][row] for n in names]
                total = self.losses["total"][row]
                f.write(f"{it}," + ",".join(f"{v:.8g}" for v in vals) + f",{total:.8g},{self.wall_ms[row]:.3f}\n")


class _ViewArrays:
    """Flattened per-view ray/target tables for fast batch assembly."""

    def __init__(self, scene: Scene, masks=None, prior_images=None, prior_depths=None):
        self.n_views = scene.n_views
        self.width = scene.intrinsics.width
        self.n_px = scene.intrinsics.height * self.width
        self.origins = np.stack([p.translation for p in scene.poses])
        self.dirs = np.stack([view_ray_grid(scene.intrinsics, p)[1] for p in scene.poses])
        self.rgb = np.stack([img.reshape(-1, 3) for img in scene.images])
        self.masked = (
            np.stack([m.reshape(-1) for m in masks])
            if masks is not None
            else np.zeros((self.n_views, self.n_px), dtype=bool)
        )
        self.prior_rgb = np.stack([img.reshape(-1, 3) for img in prior_images]) if prior_images is not None else None
        self.prior_depth = np.stack([d.reshape(-1) for d in prior_depths]) if prior_depths is not None else None
        self.masks_list = masks

    def batch(self, rng: np.random.Generator, size: int) -> RayBatch:
        vi = rng.integers(0, self.n_views, size=size)
        pi = rng.integers(0, self.n_px, size=size)
        return RayBatch(
            origins=self.origins[vi],
            dirs=self.dirs[vi, pi],
            target_rgb=self.rgb[vi, pi],
            masked=self.masked[vi, pi],
            target_depth=self.prior_depth[vi, pi] if self.prior_depth is not None else None,
            view_idx=vi,
            pixel_uv=np.stack([pi % self.width + 0.5, pi // self.width + 0.5], axis=-1),
        )


def render_patch(grid, intr: Intrinsics, pose: Pose, rect, n_samples, mode, rng):
    """Render a pixel rectangle; returns (image (h,w,3), cache, hit sel, shape)."""
    uv = patch_pixel_grid(rect)
    origins, dirs = generate_rays(intr, pose, uv)
    out, cache, sel = _forward(grid, origins, dirs, n_samples, mode, rng)
    x0, y0, w, h = rect
    return out["color"].reshape(h, w, 3), cache, sel, (h, w)


def fit(
    grid: RadianceGrid,
    scene: Scene,
    config: FitConfig,
    masks=None,
    prior_images=None,
    prior_depths=None,
    extractor: PerceptualExtractor | None = None,
    cancel=None,
    progress=None,
) -> FitReport:
    """Training loop driver for all three modes.

    rec: reconstruction only. mv: reconstruction + classification supervised
    by `masks`. inpaint: unmasked-ray reconstruction + perceptual patches
    against `prior_images` + depth against `prior_depths`.

    config.coarse_stages runs coarse-to-fine: each (factor, iterations) stage
    fits a downsampled grid first, then resamples into the next resolution.
    Coarse stages consolidate opacity onto surfaces; a full-resolution grid
    fit from scratch on few forward-facing views tends to settle into layered
    semi-transparent 'lightfield' solutions with good colors but bad depth.

    Divergence (non-finite total loss) restores the last periodic parameter
    snapshot and raises DivergenceError; cooperative cancellation via `cancel`
    (an Event-like object) raises FitCancelled at an iteration boundary.
    """
    config.validate()
    report = FitReport()
    if config.iterations == 0:
        report.checksum = grid.checksum()
        return report
    if config.mode == "mv" and masks is None:
        raise ValueError("mv mode needs masks")
    rng = np.random.default_rng(config.seed)
    counters.reset()
    views = _ViewArrays(scene, masks=masks, prior_images=prior_images, prior_depths=prior_depths)
    ext = extractor or default_extractor()
    t_start = time.perf_counter()

    total_iters = config.iterations + sum(n for _, n in config.coarse_stages)
    done = 0

    def stage_progress(frac_within, stage_iters):
        if progress is not None:
            progress((done + frac_within * stage_iters) / total_iters)

    prev = None
    for factor, iters in config.coarse_stages:
        res = tuple(max(2, n // factor) for n in grid.resolution)
        coarse = RadianceGrid(res, grid.bounds)
        coarse.resample_from(prev if prev is not None else grid)
        _fit_single(coarse, scene, views, config, iters, rng, ext, cancel,
                    lambda f, it=iters: stage_progress(f, it), report, stage=f"coarse/{factor}")
        done += iters
        prev = coarse
    if prev is not None:
        grid.resample_from(prev)
    _fit_single(grid, scene, views, config, config.iterations, rng, ext, cancel,
                lambda f: stage_progress(f, config.iterations), report, stage="full")

    report.iterations = total_iters
    report.wall_time_s = time.perf_counter() - t_start
    report.checksum = grid.checksum()
    report.warnings = {"empty_rec_batches": counters.empty_rec_batches}
    return report


def _fit_single(grid, scene, views, config, iterations, rng, ext, cancel, progress, report, stage):
    opt = AdamState(grid)
    step = StepConfig(
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        lr_overrides={"density": config.lr_density, "logit": config.lr_logit},
    )
    w = config.weights
    masks_any = views.masked is not None and np.any(views.masked)
    use_patches = config.mode == "inpaint" and w.lambda_lpips > 0 and views.prior_rgb is not None and masks_any
    use_depth = config.mode == "inpaint" and w.lambda_depth > 0 and views.prior_depth is not None

    channels = {"rec": ("density", "color"), "mv": CHANNELS, "inpaint": ("density", "color")}[config.mode]
    buf = GradBuffer(grid, channels=channels)
    audit_buf = GradBuffer(grid, channels=("color",)) if (use_patches and config.debug_audit) else None
    snapshot = grid.copy_parameters()
    t_last = time.perf_counter()
    offset = report.iterations
    masks = views.masks_list

    for it in range(1, iterations + 1):
        if cancel is not None and cancel.is_set():
            raise FitCancelled(f"cancelled at iteration {it} of stage {stage}")
        buf.zero()
        batch = views.batch(rng, config.rays_per_batch)
        values = {}
        if config.mode == "rec":
            values["rec"] = loss_rec(grid, batch, buf, n_samples=config.n_samples, mode=config.sampling, rng=rng)
            total = values["rec"]
        elif config.mode == "mv":
            total, parts = loss_mv(grid, batch, w, buf, n_samples=config.n_samples, mode=config.sampling, rng=rng)
            values.update(parts)
        else:
            total = 0.0
            values["rec"] = loss_rec(
                grid, batch, buf, unmasked_only=True, n_samples=config.n_samples, mode=config.sampling, rng=rng
            )
            total += values["rec"]
            if use_depth:
                values["depth"] = loss_depth(
                    grid,
                    batch,
                    buf,
                    n_samples=config.n_samples,
                    mode=config.sampling,
                    rng=rng,
                    grad_scale=w.lambda_depth,
                )
                total += w.lambda_depth * values["depth"]
            if use_patches:
                target = audit_buf if audit_buf is not None else buf
                if audit_buf is not None:
                    audit_buf.zero()
                values["lpips"] = _patch_loss(grid, scene, views, masks, ext, w, config, target, rng)
                if audit_buf is not None:
                    # perceptual gradients must never touch density
                    assert not np.any(audit_buf.d_density), "perceptual gradient leaked into density"
                    buf.scaled_add(audit_buf)
                total += w.lambda_lpips * values["lpips"]
        values["total"] = total
        if not np.isfinite(total):
            grid.load_parameters(snapshot)
            report.diverged = True
            report.iterations = offset + it
            report.checksum = grid.checksum()
            raise DivergenceError(f"non-finite loss at iteration {it} of stage {stage}", report)
        apply_update(grid, buf, opt, step)
        if it % config.checkpoint_every == 0:
            snapshot = grid.copy_parameters()
            if config.checkpoint_path is not None:
                from .field import save_grid

                save_grid(grid, config.checkpoint_path)
        if it % config.log_every == 0 or it == iterations:
            now = time.perf_counter()
            report.record(offset + it, values, (now - t_last) * 1000.0)
            t_last = now
        progress(it / iterations)
    report.iterations = offset + iterations


def _patch_loss(grid, scene, views, masks, ext, w, config, buf, rng) -> float:
    """Mean perceptual distance over a patch batch; gradients via policy LPIPS."""
    picks = sample_patches(scene.images, masks, config.patches, rng)
    total = 0.0
    inv = 1.0 / len(picks)
    H, W = scene.intrinsics.height, scene.intrinsics.width
    for v, rect in picks:
        rendered, cache, sel, _ = render_patch(
            grid, scene.intrinsics, scene.poses[v], rect, config.n_samples, config.sampling, rng
        )
        x0, y0, rw, rh = rect
        prior_patch = views.prior_rgb[v].reshape(H, W, 3)[y0 : y0 + rh, x0 : x0 + rw]
        d, grad = perceptual_distance_grad(ext, rendered, prior_patch)
        total += d
        if cache is not None:
            d_color = (w.lambda_lpips * inv * grad).reshape(-1, 3)[sel]
            render_rays_backward(grid, cache, buf, "LPIPS", d_color=d_color)
    return total * inv


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    m = mse(a, b)
    return float("inf") if m == 0 else -10.0 * np.log10(m)
