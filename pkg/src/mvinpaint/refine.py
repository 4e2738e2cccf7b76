"""Occlusion-aware mask refinement: substitute masked source pixels that are
visible (unmasked and depth-consistent) in other views, shrinking masks before
2D inpainting.

Sweep semantics: within a sweep every source view is refined against a frozen
snapshot of all views; per pixel, each target contributes its first
front-to-back consistent sample, and the winner is reduced over the whole
candidate set: closest to the source camera, where candidates within the
depth tolerance of the minimum count as the same surface and the
highest-quality, sharpest lookup among them wins (final tie: lowest target
index). An accepted update must leave the new depth consistent with at least
one of the 8 source neighbours. Sweeps repeat until one makes no change, so
masks peel inward from their boundary, and the pure set reduction makes the
result independent of target visiting order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PixelCoord, points_at_distance, view_ray_grid, world_to_pixels
from .renderer import sample_t_values
from .scene import Scene


@dataclass
class RefineConfig:
    samples_n: int = 96
    mode: str = "midpoint"  # deterministic; stratified reuses the renderer's sampler
    depth_tol_rel: float = 0.01
    depth_tol_abs: float = 0.04  # about one voxel width at the bundled scene scale
    max_sweeps: int = 16
    seed: int = 0
    near: float | None = None  # default: 0.8 * smallest positive scene depth
    far: float | None = None  # default: 1.25 * largest scene depth
    # when True, pixels refined in earlier sweeps may serve as evidence for
    # further substitutions; resampling error then compounds along chains,
    # so the default restricts evidence to originally unmasked pixels
    chain_evidence: bool = False


@dataclass
class RefineStats:
    sweeps: int = 0
    pixels_refined: int = 0
    masked_area_before: int = 0
    masked_area_after: int = 0
    capped: bool = False

    @property
    def reduction_percent(self) -> float:
        if self.masked_area_before == 0:
            return 0.0
        return 100.0 * (self.masked_area_before - self.masked_area_after) / self.masked_area_before

    def to_json(self) -> dict:
        return {
            "sweeps": self.sweeps,
            "pixels_refined": self.pixels_refined,
            "masked_area_before": self.masked_area_before,
            "masked_area_after": self.masked_area_after,
            "reduction_percent": self.reduction_percent,
            "capped": self.capped,
        }


@dataclass
class RefineUpdate:
    color: np.ndarray
    new_depth: float
    source_distance: float
    target_view: int


class RefineState:
    """Working copies plus the per-pixel best source distance found so far.

    Invariants: best distances only decrease, masks only shrink.
    """

    def __init__(self, scene: Scene, depths, masks):
        self.images = [img.copy() for img in scene.images]
        self.depths = [d.copy() for d in depths]
        self.masks = [m.copy() for m in masks]
        self.original_masks = [m.copy() for m in masks]
        self.best_dist = [np.full(m.shape, np.inf) for m in masks]


def _masked_bilinear(img: np.ndarray, mask: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear image sample at continuous pixel coordinates (centers at +0.5).

    Masked pixels never contribute; their weight is redistributed over the
    unmasked corners. Returns (values, clean) with clean False only when all
    four corners are masked (caller falls back to the first-hit pixel).
    """
    H, W = img.shape[:2]
    x = np.clip(u - 0.5, 0.0, W - 1.0)
    y = np.clip(v - 0.5, 0.0, H - 1.0)
    x0 = np.minimum(x.astype(int), max(W - 2, 0))
    y0 = np.minimum(y.astype(int), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = x - x0
    fy = y - y0
    corners = ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)), (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy))
    val = np.zeros(u.shape + (img.shape[2],)) if img.ndim == 3 else np.zeros(u.shape)
    wsum = np.zeros(u.shape)
    for cy, cx, w in corners:
        w = w * ~mask[cy, cx]
        val += img[cy, cx] * (w[..., None] if img.ndim == 3 else w)
        wsum += w
    clean = wsum > 1e-12
    safe = np.where(clean, wsum, 1.0)
    val /= safe[..., None] if img.ndim == 3 else safe
    return val, clean, wsum


def _sample_range(depths, config: RefineConfig):
    positive = np.concatenate([d[d > 0].ravel() for d in depths]) if any((d > 0).any() for d in depths) else np.array([1.0])
    near = config.near if config.near is not None else 0.8 * float(positive.min())
    far = config.far if config.far is not None else 1.25 * float(positive.max())
    return near, far


def _source_samples(scene, src, ys, xs, depths, config, rng):
    """Sample points along the source rays, shared across all targets."""
    intr = scene.intrinsics
    o_s = scene.poses[src].translation
    dirs = view_ray_grid(intr, scene.poses[src])[1].reshape(intr.height, intr.width, 3)[ys, xs]
    near, far = _sample_range(depths, config)
    t, _ = sample_t_values(np.full(ys.size, near), np.full(ys.size, far), config.samples_n, config.mode, rng)
    pts = o_s + t[..., None] * dirs[:, None, :]  # (P, N, 3)
    return t, dirs, pts


def _target_candidates(scene, snapshot_images, snapshot_depths, snapshot_masks, src, tgt, t, dirs, pts, config):
    """Vectorized first-consistent-hit search for one (source, target) pair.

    Returns (found, color, new_depth, source_distance, quality, footprint)
    arrays over the candidate pixels."""
    intr = scene.intrinsics
    n_px, n_s = t.shape
    o_s = scene.poses[src].translation
    o_t = scene.poses[tgt].translation

    flat = pts.reshape(-1, 3)
    uvt, z, visible = world_to_pixels(scene.poses[tgt], intr, flat)
    px = np.floor(uvt[:, 0]).astype(int)
    py = np.floor(uvt[:, 1]).astype(int)
    inb = visible & (px >= 0) & (px < intr.width) & (py >= 0) & (py < intr.height)
    pxc = np.where(inb, px, 0)
    pyc = np.where(inb, py, 0)
    unmasked = ~snapshot_masks[tgt][pyc, pxc] & inb
    d_t = snapshot_depths[tgt][pyc, pxc]
    dist_to_target = np.linalg.norm(flat - o_t, axis=-1)
    g = d_t - dist_to_target  # > 0 in front of the target's surface
    tol = config.depth_tol_rel * np.abs(d_t) + config.depth_tol_abs
    consistent = (unmasked & (d_t > 0) & (np.abs(g) <= tol)).reshape(n_px, n_s)

    found = consistent.any(axis=1)
    first = np.argmax(consistent, axis=1)
    rows = np.arange(n_px)
    hit_flat = rows * n_s + first
    fb_px = pxc[hit_flat]  # first-hit pixel, known unmasked
    fb_py = pyc[hit_flat]
    d_fb = snapshot_depths[tgt][fb_py, fb_px]

    # snap to the surface: the first hit sits anywhere inside the tolerance
    # band, which shifts the lookup by a fraction of a pixel and drags texture
    # error in. Fit the local surface plane through the hit pixel and its +x/+y
    # neighbours (from the target depth map) and intersect the source ray.
    X_surf = points_at_distance(scene.poses[tgt], intr, np.stack([fb_px + 0.5, fb_py + 0.5], -1), d_fb)
    nx_px = np.clip(fb_px + 1, 0, intr.width - 1)
    ny_py = np.clip(fb_py + 1, 0, intr.height - 1)
    d_nx = snapshot_depths[tgt][fb_py, nx_px]
    d_ny = snapshot_depths[tgt][ny_py, fb_px]
    A = points_at_distance(scene.poses[tgt], intr, np.stack([nx_px + 0.5, fb_py + 0.5], -1), d_nx)
    B = points_at_distance(scene.poses[tgt], intr, np.stack([fb_px + 0.5, ny_py + 0.5], -1), d_ny)
    normal = np.cross(A - X_surf, B - X_surf)
    denom = np.einsum("pc,pc->p", normal, dirs)
    tol_fb = config.depth_tol_rel * np.abs(d_fb) + config.depth_tol_abs
    plane_ok = (
        found
        & (np.abs(denom) > 1e-12)
        & ~snapshot_masks[tgt][fb_py, nx_px]
        & ~snapshot_masks[tgt][ny_py, fb_px]
        & (np.abs(d_nx - d_fb) <= tol_fb)  # reject depth discontinuities
        & (np.abs(d_ny - d_fb) <= tol_fb)
    )
    t_star = np.einsum("pc,pc->p", normal, X_surf - o_s) / np.where(plane_ok, denom, 1.0)
    # keep the snap inside the consistency band around the raw hit
    raw_t = t[rows, first]
    plane_ok &= np.abs(t_star - raw_t) <= 2.0 * (t[:, 1] - t[:, 0] if n_s > 1 else np.full(n_px, np.inf))
    x_star = o_s + np.where(plane_ok, t_star, raw_t)[:, None] * dirs
    uv_star, _, vis_star = world_to_pixels(scene.poses[tgt], intr, x_star)
    ok_star = (
        plane_ok
        & vis_star
        & (uv_star[:, 0] >= 0)
        & (uv_star[:, 0] < intr.width)
        & (uv_star[:, 1] >= 0)
        & (uv_star[:, 1] < intr.height)
    )
    hit_u = np.where(ok_star, uv_star[:, 0], uvt[hit_flat, 0])
    hit_v = np.where(ok_star, uv_star[:, 1], uvt[hit_flat, 1])

    # bilinear color where all four contributing pixels are unmasked,
    # otherwise the first-hit pixel value (never blend object colors in)
    color_b, clean, wsum = _masked_bilinear(snapshot_images[tgt], snapshot_masks[tgt], hit_u, hit_v)
    color = np.where(clean[:, None], color_b, snapshot_images[tgt][fb_py, fb_px])
    full = wsum > 1.0 - 1e-9
    # lookup quality: snapped + untruncated bilinear > untruncated > partial > fallback
    quality = np.where(ok_star & full, 3, np.where(full, 2, np.where(clean, 1, 0)))
    # footprint of the target pixel on the surface (distance over incidence
    # cosine): grazing or distant observations resample the texture coarsely
    nrm = np.linalg.norm(normal, axis=-1)
    to_surf = X_surf - o_t
    d_surf = np.linalg.norm(to_surf, axis=-1)
    cos_inc = np.abs(np.einsum("pc,pc->p", normal, to_surf)) / np.maximum(nrm * d_surf, 1e-12)
    footprint = d_surf / np.maximum(cos_inc, 0.05)

    # transfer the target's depth to the source frame: the snapped plane
    # intersection already is the source-ray surface distance; the
    # pixel-center lift is the fallback (half-pixel transfer error)
    hpx = np.clip(hit_u.astype(int), 0, intr.width - 1)
    hpy = np.clip(hit_v.astype(int), 0, intr.height - 1)
    hp_ok = ~snapshot_masks[tgt][hpy, hpx]
    d_px = np.where(hp_ok, hpx, fb_px)
    d_py = np.where(hp_ok, hpy, fb_py)
    d_hit = snapshot_depths[tgt][d_py, d_px]
    centers = np.stack([d_px + 0.5, d_py + 0.5], axis=-1)
    X_depth = points_at_distance(scene.poses[tgt], intr, centers, d_hit)
    lifted = np.linalg.norm(X_depth - o_s, axis=-1)
    new_depth = np.where(ok_star, t_star, lifted)
    source_distance = np.where(ok_star, np.where(plane_ok, t_star, raw_t), raw_t)
    return found, color, new_depth, source_distance, quality, footprint


def refine_pixel(
    state: RefineState,
    scene: Scene,
    source_view: int,
    u_s: PixelCoord,
    target_view: int,
    samples_n: int = 96,
    config: RefineConfig | None = None,
) -> RefineUpdate | None:
    """First consistent hit for one masked source pixel against one target.

    Walks samples front-to-back; masked or depth-inconsistent target pixels
    are skipped; returns None when no sample is usable.
    """
    config = config or RefineConfig(samples_n=samples_n)
    x, y = int(u_s.u), int(u_s.v)
    if not state.masks[source_view][y, x] and not state.original_masks[source_view][y, x]:
        raise ValueError(f"pixel ({x}, {y}) is not masked in view {source_view}")
    rng = np.random.default_rng(config.seed)
    t, dirs, pts = _source_samples(scene, source_view, np.array([y]), np.array([x]), state.depths, config, rng)
    found, color, new_depth, source_distance, _, _ = _target_candidates(
        scene, state.images, state.depths, state.masks, source_view, target_view, t, dirs, pts, config
    )
    if not found[0]:
        return None
    return RefineUpdate(
        color=color[0], new_depth=float(new_depth[0]), source_distance=float(source_distance[0]), target_view=target_view
    )


def _neighbor_consistent(new_depth, ys, xs, snapshot_depth, config):
    """True where the candidate depth matches >= 1 of the 8 snapshot neighbours."""
    H, W = snapshot_depth.shape
    ok = np.zeros(ys.size, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            ny = ys + dy
            nx = xs + dx
            inb = (ny >= 0) & (ny < H) & (nx >= 0) & (nx < W)
            nd = np.where(inb, snapshot_depth[np.clip(ny, 0, H - 1), np.clip(nx, 0, W - 1)], -1.0)
            tol = config.depth_tol_rel * np.abs(new_depth) + config.depth_tol_abs
            ok |= inb & (nd > 0) & (np.abs(nd - new_depth) <= tol)
    return ok


def refine_views(scene: Scene, depths, masks, config: RefineConfig | None = None, target_order=None):
    """Refine every view against every other until a sweep changes nothing.

    Returns (images, depths, masks, RefineStats). Masks only shrink; a pixel
    already refined is replaced only by a strictly closer candidate. The
    result does not depend on `target_order` (candidate selection is a
    canonical minimum; the parameter exists to demonstrate that).
    """
    config = config or RefineConfig()
    state = RefineState(scene, depths, masks)
    stats = RefineStats(masked_area_before=int(sum(m.sum() for m in masks)))
    n = scene.n_views
    refined_pixels = [np.zeros(m.shape, dtype=bool) for m in masks]
    rng = np.random.default_rng(config.seed)

    # freeze the sample range against the input depths so caching and replay
    # are stable while working depths update
    near, far = _sample_range(depths, config)
    from dataclasses import replace

    config = replace(config, near=near, far=far)

    deterministic = config.mode == "midpoint"
    sample_cache = {}  # src -> (t, dirs, pts); valid in deterministic mode
    pair_cache = {}  # (src, tgt) -> candidate tuple; invalidated when tgt changes
    changed = [True] * n

    for sweep in range(1, config.max_sweeps + 1):
        stats.sweeps = sweep
        snap_images = [img.copy() for img in state.images]
        snap_depths = [d.copy() for d in state.depths]
        snap_masks = [m.copy() for m in state.masks]
        sweep_changed = [False] * n
        changes = 0
        for src in range(n):
            ys, xs = np.nonzero(state.original_masks[src])
            if ys.size == 0:
                continue
            if deterministic and src in sample_cache:
                t, dirs, pts = sample_cache[src]
            else:
                t, dirs, pts = _source_samples(scene, src, ys, xs, depths, config, rng)
                if deterministic:
                    sample_cache[src] = (t, dirs, pts)
            targets = [v for v in range(n) if v != src]
            if target_order is not None:
                targets = [v for v in target_order(src) if v != src]
            evidence_masks = snap_masks if config.chain_evidence else state.original_masks
            per_target = {}
            for tgt in targets:
                key = (src, tgt)
                # without chain evidence the candidate inputs never change
                cacheable = deterministic and (not config.chain_evidence or not changed[tgt])
                if cacheable and key in pair_cache:
                    cand = pair_cache[key]
                else:
                    cand = _target_candidates(
                        scene, snap_images, snap_depths, evidence_masks, src, tgt, t, dirs, pts, config
                    )
                    if deterministic:
                        pair_cache[key] = cand
                found, color, new_depth, source_distance, quality, footprint = cand
                gated = found & _neighbor_consistent(new_depth, ys, xs, snap_depths[src], config)
                per_target[tgt] = (gated, color, new_depth, source_distance, quality, footprint)

            # reduce over the candidate set: candidates within the depth
            # tolerance of the closest one see the same surface, so pick the
            # highest-quality, sharpest lookup among them (final tie: lowest
            # target index). A pure set reduction makes the result independent
            # of visit order.
            K = len(targets)
            if K == 0:
                continue
            order = sorted(targets)
            dist_all = np.stack([np.where(per_target[v][0], per_target[v][3], np.inf) for v in order])
            min_dist = dist_all.min(axis=0)
            any_cand = np.isfinite(min_dist)
            margin = config.depth_tol_rel * np.abs(np.where(any_cand, min_dist, 0.0)) + config.depth_tol_abs
            # same-surface class: twice the tolerance is still far below any
            # genuine occlusion separation, and admits cleaner lookups
            in_class = dist_all <= min_dist + 2.0 * margin
            qual_all = np.stack([per_target[v][4] for v in order])
            fp_all = np.stack([per_target[v][5] for v in order])
            rank = np.where(
                in_class,
                (3 - qual_all) * 1e6 + np.clip(fp_all, 0.0, 1e3) * 100.0 + np.arange(K)[:, None] * 1e-3,
                np.inf,
            )
            pick = np.argmin(rank, axis=0)
            rows = np.arange(ys.size)
            chosen_color = np.stack([per_target[v][1] for v in order])[pick, rows]
            chosen_depth = np.stack([per_target[v][2] for v in order])[pick, rows]
            chosen_dist = dist_all[pick, rows]

            # replace only when meaningfully closer than the standing result;
            # churn between same-surface candidates compounds resampling error
            best = state.best_dist[src][ys, xs]
            accept = any_cand & (chosen_dist < best - margin)
            if accept.any():
                sel_y, sel_x = ys[accept], xs[accept]
                state.images[src][sel_y, sel_x] = chosen_color[accept]
                state.depths[src][sel_y, sel_x] = chosen_depth[accept]
                state.masks[src][sel_y, sel_x] = False
                state.best_dist[src][sel_y, sel_x] = chosen_dist[accept]
                refined_pixels[src][sel_y, sel_x] = True
                sweep_changed[src] = True
                changes += int(accept.sum())
        changed = sweep_changed
        if changes == 0:
            break
    else:
        stats.capped = True
    stats.pixels_refined = int(sum(r.sum() for r in refined_pixels))
    stats.masked_area_after = int(sum(m.sum() for m in state.masks))
    return state.images, state.depths, state.masks, stats
