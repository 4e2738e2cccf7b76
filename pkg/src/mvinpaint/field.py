"""Dense voxel radiance field: density, SH color, objectness logits.

Each grid node stores an unconstrained raw density (softplus-activated on
sampling), 4 degree-1 spherical-harmonic coefficients per color channel, and a
raw pre-sigmoid objectness logit. Logits are interpolated raw, not as
probabilities; the per-node-probability alternative would bias rendered masks
toward 0.5 in sparsely supervised cells.

Parameters are kept in float64 in memory; the SPGR checkpoint stores f32
planes (see save_grid/load_grid for the exact layout).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import generate_rays

# real SH degree 0/1 constants, basis = [C0, -C1*y, C1*z, -C1*x]
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

CHANNELS = ("density", "color", "logit")


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if np.any(hi <= lo):
            raise FieldError(f"degenerate bounds lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_derivative(x):
    # d softplus / dx = sigmoid(x)
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Degree-1 real SH basis evaluated at unit directions (..., 3) -> (..., 4)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack([np.full_like(x, SH_C0), -SH_C1 * y, SH_C1 * z, -SH_C1 * x], axis=-1)


class RadianceGrid:
    """Dense voxel field over an axis-aligned box.

    Nodes are placed at lo + i * extent / (n - 1) per axis, so the grid spans
    the bounds inclusively. Sampling outside the bounds yields zeros.
    """

    def __init__(self, resolution, bounds: BoundingBox, seed: int | None = None):
        nx, ny, nz = (int(n) for n in resolution)
        if min(nx, ny, nz) < 2:
            raise FieldError("grid needs at least 2 nodes per axis")
        self.resolution = (nx, ny, nz)
        self.bounds = bounds
        self.density_raw = np.full((nx, ny, nz), -1.0)
        # DC coefficient set to mid-gray so the color clamp starts open
        self.sh = np.zeros((nx, ny, nz, 3, 4))
        self.sh[..., 0] = 0.5 / SH_C0
        self.logit = np.zeros((nx, ny, nz))
        if seed is not None:
            rng = np.random.default_rng(seed)
            self.density_raw += 0.01 * rng.standard_normal(self.density_raw.shape)

    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def voxel_size(self) -> np.ndarray:
        n = np.array(self.resolution, dtype=np.float64)
        return self.bounds.extent / (n - 1)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"density": self.density_raw, "color": self.sh, "logit": self.logit}

    def copy_parameters(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}

    def load_parameters(self, params: dict[str, np.ndarray]):
        self.density_raw[...] = params["density"]
        self.sh[...] = params["color"]
        self.logit[...] = params["logit"]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in CHANNELS:
            h.update(self.parameters()[name].tobytes())
        return h.hexdigest()

    def node_positions(self) -> np.ndarray:
        """World positions of all nodes, shape (n_nodes, 3), x-major order."""
        nx, ny, nz = self.resolution
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
        f = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) / (np.array(self.resolution) - 1)
        return self.bounds.lo + f * self.bounds.extent

    def resample_from(self, other: "RadianceGrid"):
        """Fill parameters by trilinearly resampling another grid's raw values
        (coarse-to-fine transfer)."""
        idx, w, _ = other._corner_weights(self.node_positions())
        nx, ny, nz = self.resolution
        self.density_raw[...] = (other.density_raw.reshape(-1)[idx] * w).sum(1).reshape(nx, ny, nz)
        self.logit[...] = (other.logit.reshape(-1)[idx] * w).sum(1).reshape(nx, ny, nz)
        shflat = other.sh.reshape(-1, 12)
        out = np.empty((self.n_nodes, 12))
        for j in range(12):
            out[:, j] = (shflat[:, j][idx] * w).sum(1)
        self.sh[...] = out.reshape(nx, ny, nz, 3, 4)

    # -- interpolation ------------------------------------------------------

    def _corner_weights(self, xs: np.ndarray):
        """Trilinear corner indices/weights for points xs (P, 3).

        Returns (flat corner indices (P, 8), weights (P, 8), inside (P,)).
        Weights of outside points are zeroed.
        """
        xs = np.asarray(xs, dtype=np.float64).reshape(-1, 3)
        n = np.array(self.resolution)
        g = (xs - self.bounds.lo) / self.bounds.extent * (n - 1)
        inside = np.all((xs >= self.bounds.lo) & (xs <= self.bounds.hi), axis=1)
        g = np.clip(g, 0.0, n - 1)
        i0 = np.minimum(g.astype(np.int64), n - 2)
        f = g - i0
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        P = xs.shape[0]
        # corner order: (0,0,0) (0,0,1) (0,1,0) (0,1,1) (1,0,0) (1,0,1) (1,1,0) (1,1,1)
        w = np.empty((P, 8))
        xy = gx * gy
        w[:, 0] = xy * gz
        w[:, 1] = xy * fz
        xy = gx * fy
        w[:, 2] = xy * gz
        w[:, 3] = xy * fz
        xy = fx * gy
        w[:, 4] = xy * gz
        w[:, 5] = xy * fz
        xy = fx * fy
        w[:, 6] = xy * gz
        w[:, 7] = xy * fz
        w *= inside[:, None]
        base = i0[:, 0] * (n[1] * n[2]) + i0[:, 1] * n[2] + i0[:, 2]
        sy, sx = n[2], n[1] * n[2]
        offsets = np.array([0, 1, sy, sy + 1, sx, sx + 1, sx + sy, sx + sy + 1])
        idx = base[:, None] + offsets
        return idx, w, inside


@dataclass(frozen=True)
class FieldSample:
    sigma: float
    color: np.ndarray
    logit: float


class SampleCache:
    """Forward-pass byproducts needed by the field adjoint."""

    __slots__ = ("idx", "weights", "raw_density", "raw_color", "basis")

    def __init__(self, idx, weights, raw_density, raw_color, basis):
        self.idx = idx
        self.weights = weights
        self.raw_density = raw_density
        self.raw_color = raw_color
        self.basis = basis


def sample_field_many(grid: RadianceGrid, xs: np.ndarray, dirs: np.ndarray):
    """Batched field sampling at points xs (P,3) along unit directions dirs.

    Returns (sigma (P,), color (P,3) clamped to [0,1], logit (P,), cache).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    norms = np.linalg.norm(dirs, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise FieldError("view directions must be unit vectors")
    idx, w, inside = grid._corner_weights(xs)
    dflat = grid.density_raw.reshape(-1)
    lflat = grid.logit.reshape(-1)
    shflat = grid.sh.reshape(-1, 12)
    raw_density = np.einsum("pc,pc->p", dflat[idx], w)
    raw_logit = np.einsum("pc,pc->p", lflat[idx], w)
    # interpolate the 12 SH coefficients channel by channel (avoids a (P,8,12) gather)
    sh_interp = np.empty((w.shape[0], 12))
    for j in range(12):
        sh_interp[:, j] = np.einsum("pc,pc->p", shflat[:, j][idx], w)
    basis = sh_basis(dirs.reshape(-1, 3))
    raw_color = np.einsum("pij,pj->pi", sh_interp.reshape(-1, 3, 4), basis)
    sigma = softplus(raw_density) * inside  # outside the box the field is empty
    color = np.clip(raw_color, 0.0, 1.0)
    cache = SampleCache(idx, w, raw_density, raw_color, basis)
    return sigma, color, raw_logit, cache


def sample_field(grid: RadianceGrid, x: np.ndarray, d: np.ndarray) -> FieldSample:
    sigma, color, logit, _ = sample_field_many(grid, np.asarray(x).reshape(1, 3), np.asarray(d).reshape(1, 3))
    return FieldSample(sigma=float(sigma[0]), color=color[0], logit=float(logit[0]))


class GradBuffer:
    """Parameter-shaped gradient accumulators with channel gating.

    Accumulation is linear; channels not in `channels` stay exactly zero.
    """

    def __init__(self, grid: RadianceGrid, channels=CHANNELS):
        unknown = set(channels) - set(CHANNELS)
        if unknown:
            raise FieldError(f"unknown channels {sorted(unknown)}")
        self.resolution = grid.resolution
        self.channels = frozenset(channels)
        self.d_density = np.zeros(grid.density_raw.shape)
        self.d_sh = np.zeros(grid.sh.shape)
        self.d_logit = np.zeros(grid.logit.shape)

    def arrays(self) -> dict[str, np.ndarray]:
        return {"density": self.d_density, "color": self.d_sh, "logit": self.d_logit}

    def zero(self):
        self.d_density[...] = 0.0
        self.d_sh[...] = 0.0
        self.d_logit[...] = 0.0

    def scaled_add(self, other: "GradBuffer", scale: float = 1.0):
        self.d_density += scale * other.d_density
        self.d_sh += scale * other.d_sh
        self.d_logit += scale * other.d_logit


def _scatter(target_flat: np.ndarray, idx_flat: np.ndarray, values: np.ndarray):
    target_flat += np.bincount(idx_flat, weights=values.ravel(), minlength=target_flat.size)


def sample_field_backward_many(
    grid: RadianceGrid,
    cache: SampleCache,
    d_sigma: np.ndarray | None,
    d_color: np.ndarray | None,
    d_logit: np.ndarray | None,
    buf: GradBuffer,
):
    """Accumulate d(loss)/d(grid params) for a prior sample_field_many call.

    Only channels enabled in buf receive gradient; the rest are untouched.
    """
    if buf.resolution != grid.resolution:
        raise FieldError("gradient buffer layout does not match grid")
    idx, w = cache.idx, cache.weights
    idx_flat = idx.ravel()
    if d_sigma is not None and "density" in buf.channels:
        up = np.asarray(d_sigma) * softplus_derivative(cache.raw_density)
        _scatter(buf.d_density.reshape(-1), idx_flat, w * up[:, None])
    if d_color is not None and "color" in buf.channels:
        gate = (cache.raw_color > 0.0) & (cache.raw_color < 1.0)
        up = np.asarray(d_color) * gate  # (P, 3)
        # d raw_color[p, c] / d sh[node, c, k] = w[p, corner] * basis[p, k]
        contrib = up[:, :, None] * cache.basis[:, None, :]  # (P, 3, 4)
        flat = buf.d_sh.reshape(-1, 12)
        for j in range(12):
            col = flat[:, j]
            col += np.bincount(idx_flat, weights=(w * contrib.reshape(-1, 12)[:, j : j + 1]).ravel(), minlength=col.size)
    if d_logit is not None and "logit" in buf.channels:
        _scatter(buf.d_logit.reshape(-1), idx_flat, w * np.asarray(d_logit)[:, None])


def sample_field_backward(grid, x, d, upstream: FieldSample, channels, buf: GradBuffer):
    """Single-point adjoint; upstream carries cotangents in FieldSample shape."""
    _, _, _, cache = sample_field_many(grid, np.asarray(x).reshape(1, 3), np.asarray(d).reshape(1, 3))
    sample_field_backward_many(
        grid,
        cache,
        d_sigma=np.array([upstream.sigma]) if "density" in channels else None,
        d_color=np.asarray(upstream.color).reshape(1, 3) if "color" in channels else None,
        d_logit=np.array([upstream.logit]) if "logit" in channels else None,
        buf=buf,
    )


@dataclass
class StepConfig:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    # per-channel rate overrides; softplus-raw density must traverse tens of
    # units to reach opaque surfaces, colors live in [0,1]
    lr_overrides: dict | None = None

    def lr_for(self, channel: str) -> float:
        if self.lr_overrides and channel in self.lr_overrides:
            return self.lr_overrides[channel]
        return self.lr


class AdamState:
    """First/second moment state per parameter channel."""

    def __init__(self, grid: RadianceGrid):
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in grid.parameters().items()}
        self.v = {k: np.zeros_like(v) for k, v in grid.parameters().items()}


def apply_update(grid: RadianceGrid, buf: GradBuffer, state: AdamState, cfg: StepConfig):
    """In-place Adam step on the channels enabled in the buffer.

    Note: two half-weighted steps with the same gradient do not equal one full
    step; the moment state advances per call.
    """
    grads = buf.arrays()
    for name in buf.channels:
        if not np.all(np.isfinite(grads[name])):
            raise FieldError(f"non-finite gradient in channel '{name}'")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    params = grid.parameters()
    for name in buf.channels:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[name] -= cfg.lr_for(name) * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# -- checkpoint io -----------------------------------------------------------

SPGR_MAGIC = b"SPGR"
SPGR_VERSION = 1


def save_grid(grid: RadianceGrid, path):
    """Write the SPGR checkpoint.

    Header: magic "SPGR", u32 version, 3x u32 resolution, 6x f64 bounds
    (lo.xyz, hi.xyz), all little-endian. Then f32 parameter planes, each
    flattened x-fastest: density, SH (channel-major: c0k0..c0k3, c1k0.., ..),
    logit.
    """
    nx, ny, nz = grid.resolution
    with open(path, "wb") as f:
        f.write(SPGR_MAGIC)
        f.write(struct.pack("<I", SPGR_VERSION))
        f.write(struct.pack("<3I", nx, ny, nz))
        f.write(struct.pack("<6d", *grid.bounds.lo, *grid.bounds.hi))
        f.write(_plane(grid.density_raw))
        for c in range(3):
            for k in range(4):
                f.write(_plane(grid.sh[..., c, k]))
        f.write(_plane(grid.logit))


def _plane(arr3d: np.ndarray) -> bytes:
    # x-fastest flattening of an (nx, ny, nz) array
    return np.ascontiguousarray(arr3d.transpose(2, 1, 0), dtype="<f4").tobytes()


def load_grid(path) -> RadianceGrid:
    with open(path, "rb") as f:
        if f.read(4) != SPGR_MAGIC:
            raise FieldError(f"{path}: not an SPGR checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != SPGR_VERSION:
            raise FieldError(f"{path}: unsupported SPGR version {version}")
        nx, ny, nz = struct.unpack("<3I", f.read(12))
        b = struct.unpack("<6d", f.read(48))
        grid = RadianceGrid((nx, ny, nz), BoundingBox(np.array(b[:3]), np.array(b[3:])))
        count = nx * ny * nz

        def read_plane():
            data = np.frombuffer(f.read(4 * count), dtype="<f4").astype(np.float64)
            return data.reshape(nz, ny, nx).transpose(2, 1, 0)

        grid.density_raw[...] = read_plane()
        for c in range(3):
            for k in range(4):
                grid.sh[..., c, k] = read_plane()
        grid.logit[...] = read_plane()
    return grid


def bounds_from_cameras(poses, intr, far: float, margin: float = 0.05) -> BoundingBox:
    """Axis-aligned box enclosing the camera frustums truncated at `far`."""
    pts = []
    corners = np.array(
        [[0.5, 0.5], [intr.width - 0.5, 0.5], [0.5, intr.height - 0.5], [intr.width - 0.5, intr.height - 0.5]]
    )
    for pose in poses:
        pts.append(pose.translation)
        _, dirs = generate_rays(intr, pose, corners)
        pts.extend(pose.translation + far * d for d in dirs)
    pts = np.asarray(pts)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pad = margin * (hi - lo)
    return BoundingBox(lo - pad, hi + pad)
