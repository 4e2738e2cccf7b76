"""Quadrature volume rendering of color, objectness logits, and depth.

All three outputs share the same transmittance/weight chain per ray:

    w_i = T_i * (1 - exp(-sigma_i * delta_i)),   T_i = exp(-sum_{j<i} sigma_j delta_j)

    color = sum w_i c_i        depth = sum w_i t_i        logit = sum w_i s_i

Depth is metric ray distance (unit-direction ray parameter). Ray probabilities
are sigmoid(rendered logit): the sigmoid is applied after rendering, never per
point. The adjoint pass routes gradients by a named detach policy:

    CLF    -> logits only (weights treated as constants)
    LPIPS  -> color only (weights treated as constants)
    REC    -> density + color
    DEPTH  -> density only

delta_N is defined as t_far - t_N; dropping the last sample instead would bias
short rays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import GradBuffer, RadianceGrid, sample_field_backward_many, sample_field_many
from .geometry import Intrinsics, Pose, Ray, view_ray_grid


class RenderError(RuntimeError):
    pass


# detach policy -> parameter channels that receive gradient
POLICIES = {
    "CLF": frozenset({"logit"}),
    "LPIPS": frozenset({"color"}),
    "REC": frozenset({"density", "color"}),
    "DEPTH": frozenset({"density"}),
}


@dataclass(frozen=True)
class RaySampleSet:
    t: np.ndarray  # (N,), strictly increasing
    deltas: np.ndarray  # (N,), last entry t_far - t_N
    mode: str

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        d = np.asarray(self.deltas, dtype=np.float64)
        if t.size < 1 or np.any(np.diff(t) <= 0) or np.any(d <= 0):
            raise RenderError("samples must be strictly increasing with positive deltas")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "deltas", d)


@dataclass(frozen=True)
class RenderResult:
    color: np.ndarray  # (3,)
    depth: float
    logit: float
    opacity: float
    weights: np.ndarray  # (N,)


@dataclass
class RenderOptions:
    n_samples: int = 192
    mode: str = "stratified"  # stratified | midpoint
    seed: int = 0
    chunk: int = 65536
    near: float | None = None  # None: intersect rays with the grid bounds
    far: float | None = None


def sample_ray(ray: Ray, n: int, mode: str = "stratified", rng: np.random.Generator | None = None) -> RaySampleSet:
    """Draw n sample positions on the ray; one per equal section."""
    if n < 1:
        raise RenderError(f"need at least one sample, got {n}")
    t0, t1 = ray.t_near, ray.t_far
    if not np.isfinite(t1):
        raise RenderError("sampling requires a finite far bound")
    t, deltas = sample_t_values(np.array([t0]), np.array([t1]), n, mode, rng)
    return RaySampleSet(t=t[0], deltas=deltas[0], mode=mode)


def sample_t_values(t_near: np.ndarray, t_far: np.ndarray, n: int, mode: str, rng=None):
    """Batched section sampling for R rays; returns t (R, n) and deltas (R, n)."""
    t_near = np.asarray(t_near, dtype=np.float64)[:, None]
    t_far = np.asarray(t_far, dtype=np.float64)[:, None]
    width = (t_far - t_near) / n
    edges = np.arange(n)[None, :]
    if mode == "midpoint":
        offs = np.full((t_near.shape[0], n), 0.5)
    elif mode == "stratified":
        if rng is None:
            rng = np.random.default_rng(0)
        offs = rng.uniform(size=(t_near.shape[0], n))
    else:
        raise RenderError(f"unknown sampling mode '{mode}'")
    t = t_near + (edges + offs) * width
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = (t_far - t)[:, -1]
    return t, deltas


class RenderCache:
    """Forward products needed by render_rays_backward."""

    __slots__ = ("field_cache", "t", "deltas", "alpha", "trans", "weights", "sigma", "color", "logit", "shape")

    def __init__(self, field_cache, t, deltas, alpha, trans, weights, sigma, color, logit, shape):
        self.field_cache = field_cache
        self.t = t
        self.deltas = deltas
        self.alpha = alpha
        self.trans = trans
        self.weights = weights
        self.sigma = sigma
        self.color = color
        self.logit = logit
        self.shape = shape


def render_rays(grid: RadianceGrid, origins: np.ndarray, dirs: np.ndarray, t: np.ndarray, deltas: np.ndarray):
    """Batched rendering of R rays with N samples each.

    Returns (outputs dict with color (R,3) / depth (R,) / logit (R,) /
    opacity (R,) / weights (R,N), cache for the adjoint pass).
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    R, N = t.shape
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    dirs_flat = np.broadcast_to(dirs[:, None, :], pts.shape).reshape(-1, 3)
    sigma, color, logit, fcache = sample_field_many(grid, pts.reshape(-1, 3), dirs_flat)
    bad = ~(np.isfinite(sigma) & np.all(np.isfinite(color), axis=1) & np.isfinite(logit))
    if np.any(bad):
        flat = int(np.argmax(bad))
        raise RenderError(f"non-finite field value at ray {flat // N}, sample {flat % N}")
    sigma = sigma.reshape(R, N)
    color = color.reshape(R, N, 3)
    logit = logit.reshape(R, N)
    tau = sigma * deltas
    alpha = 1.0 - np.exp(-tau)
    trans = np.exp(-np.cumsum(np.concatenate([np.zeros((R, 1)), tau[:, :-1]], axis=1), axis=1))
    weights = trans * alpha
    out = {
        "color": np.einsum("rn,rnc->rc", weights, color),
        "depth": np.sum(weights * t, axis=1),
        "logit": np.sum(weights * logit, axis=1),
        "opacity": np.sum(weights, axis=1),
        "weights": weights,
    }
    cache = RenderCache(fcache, t, deltas, alpha, trans, weights, sigma, color, logit, (R, N))
    return out, cache


def render_rays_backward(
    grid: RadianceGrid,
    cache: RenderCache,
    buf: GradBuffer,
    policy: str,
    d_color: np.ndarray | None = None,
    d_logit: np.ndarray | None = None,
    d_depth: np.ndarray | None = None,
):
    """Accumulate exact adjoints of render_rays under a detach policy."""
    if policy not in POLICIES:
        raise RenderError(f"unknown detach policy '{policy}'")
    channels = POLICIES[policy]
    R, N = cache.shape
    w = cache.weights
    ds_color = None
    ds_logit = None
    ds_sigma = None
    if "color" in channels and d_color is not None:
        ds_color = w[..., None] * d_color[:, None, :]  # (R, N, 3)
    if "logit" in channels and d_logit is not None:
        ds_logit = w * d_logit[:, None]  # (R, N)
    if "density" in channels:
        # g_i = dL/dw_i with per-sample payloads held constant
        g = np.zeros((R, N))
        if d_color is not None:
            g += np.einsum("rc,rnc->rn", d_color, cache.color)
        if d_depth is not None:
            g += d_depth[:, None] * cache.t
        gw = g * w
        # suffix_k = sum_{i>k} g_i w_i
        suffix = np.flip(np.cumsum(np.flip(gw, axis=1), axis=1), axis=1) - gw
        # T_{k+1} = T_k * exp(-tau_k) = T_k * (1 - alpha_k)
        t_next = cache.trans * (1.0 - cache.alpha)
        ds_sigma = cache.deltas * (g * t_next - suffix)
    if ds_color is None and ds_logit is None and ds_sigma is None:
        return
    sample_field_backward_many(
        grid,
        cache.field_cache,
        d_sigma=ds_sigma.reshape(-1) if ds_sigma is not None else None,
        d_color=ds_color.reshape(-1, 3) if ds_color is not None else None,
        d_logit=ds_logit.reshape(-1) if ds_logit is not None else None,
        buf=buf,
    )


def render(grid: RadianceGrid, ray: Ray, samples: RaySampleSet) -> RenderResult:
    """Render one ray for given sample positions."""
    out, _ = render_rays(
        grid, ray.origin[None], ray.direction[None], samples.t[None], samples.deltas[None]
    )
    return RenderResult(
        color=out["color"][0],
        depth=float(out["depth"][0]),
        logit=float(out["logit"][0]),
        opacity=float(out["opacity"][0]),
        weights=out["weights"][0],
    )


def render_backward(grid, ray: Ray, samples: RaySampleSet, cotangents: dict, policy: str, buf: GradBuffer):
    """Single-ray adjoint; cotangents keys: d_color (3,), d_logit, d_depth."""
    _, cache = render_rays(grid, ray.origin[None], ray.direction[None], samples.t[None], samples.deltas[None])
    dc = cotangents.get("d_color")
    render_rays_backward(
        grid,
        cache,
        buf,
        policy,
        d_color=np.asarray(dc, dtype=np.float64).reshape(1, 3) if dc is not None else None,
        d_logit=np.array([cotangents["d_logit"]], dtype=np.float64) if "d_logit" in cotangents else None,
        d_depth=np.array([cotangents["d_depth"]], dtype=np.float64) if "d_depth" in cotangents else None,
    )


def expected_depth(depth: np.ndarray, opacity: np.ndarray, min_opacity: float = 1e-6) -> np.ndarray:
    """Expected surface distance given a hit: rendered depth / opacity.

    The raw rendered depth is scaled by (1 - residual transmittance); depth
    maps handed to projection/refinement/prior consumers use this normalized
    form, gated on opacity by the caller.
    """
    return np.asarray(depth) / np.clip(opacity, min_opacity, None)


def render_depth_map(grid: RadianceGrid, intr: Intrinsics, pose: Pose, options: RenderOptions | None = None):
    """Normalized depth map plus opacity for one view."""
    _, depth, _, opacity = render_view(grid, intr, pose, options)
    return expected_depth(depth, opacity), opacity


def intersect_bounds(origins: np.ndarray, dirs: np.ndarray, bounds, near=None, far=None):
    """Slab-test ray/box intersection; returns (t0, t1, hit) with t0 >= 0."""
    lo = (bounds.lo - origins) / np.where(dirs == 0, 1e-300, dirs)
    hi = (bounds.hi - origins) / np.where(dirs == 0, 1e-300, dirs)
    t0 = np.max(np.minimum(lo, hi), axis=-1)
    t1 = np.min(np.maximum(lo, hi), axis=-1)
    t0 = np.maximum(t0, 0.0 if near is None else near)
    if far is not None:
        t1 = np.minimum(t1, far)
    hit = t1 > t0
    return t0, t1, hit


def render_view(grid: RadianceGrid, intr: Intrinsics, pose: Pose, options: RenderOptions | None = None):
    """Render full-resolution color/depth/logit/opacity maps for one camera.

    Deterministic under midpoint sampling; stratified mode is reproducible for
    a fixed options.seed.
    """
    options = options or RenderOptions()
    origins, dirs = view_ray_grid(intr, pose)
    H, W = intr.height, intr.width
    n_px = H * W
    rng = np.random.default_rng(options.seed)
    color = np.zeros((n_px, 3))
    depth = np.zeros(n_px)
    logit = np.zeros(n_px)
    opacity = np.zeros(n_px)
    t0, t1, hit = intersect_bounds(origins, dirs, grid.bounds, options.near, options.far)
    idx_hit = np.nonzero(hit)[0]
    for start in range(0, idx_hit.size, options.chunk):
        sel = idx_hit[start : start + options.chunk]
        t, deltas = sample_t_values(t0[sel], t1[sel], options.n_samples, options.mode, rng)
        try:
            out, _ = render_rays(grid, origins[sel], dirs[sel], t, deltas)
        except RenderError as e:
            px = sel[0]
            raise RenderError(f"{e} (view chunk starting at pixel ({px % W}, {px // W}))") from e
        color[sel] = out["color"]
        depth[sel] = out["depth"]
        logit[sel] = out["logit"]
        opacity[sel] = out["opacity"]
    return (
        color.reshape(H, W, 3),
        depth.reshape(H, W),
        logit.reshape(H, W),
        opacity.reshape(H, W),
    )
