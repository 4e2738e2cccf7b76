"""Pinhole camera model and projection/unprojection algebra.

Conventions used throughout the package:
  - poses are camera-to-world: world = R @ p_cam + t, with +z the viewing
    direction, image origin top-left, u rightward (columns), v downward (rows);
  - continuous pixel centers sit at integer coordinates + 0.5;
  - two depth notions coexist and conversions are explicit:
      * ray distance: Euclidean distance from the camera center along the
        pixel's unit-direction ray (what rendered depth maps store);
      * cam depth: the z coordinate in the camera frame (what the visibility
        test uses).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VISIBILITY_EPS = 1e-9


class GeometryError(ValueError):
    """Domain error for camera/projection operations."""


class NotVisibleError(GeometryError):
    """Point is behind (or at) the camera plane."""


@dataclass(frozen=True)
class Intrinsics:
    """Shared pinhole intrinsics (focal lengths and principal point, pixels)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise GeometryError(f"principal point ({self.cx}, {self.cy}) outside image bounds")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )


ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray  # 3x3, orthonormal, det +1
    translation: np.ndarray  # 3-vector, world units

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {R.shape}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ROTATION_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
            raise GeometryError(f"rotation determinant is {np.linalg.det(R):.6f}, expected +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def matrix(self) -> np.ndarray:
        """4x4 camera-to-world matrix."""
        G = np.eye(4)
        G[:3, :3] = self.rotation
        G[:3, 3] = self.translation
        return G

    @classmethod
    def from_matrix(cls, G: np.ndarray) -> "Pose":
        G = np.asarray(G, dtype=np.float64)
        return cls(rotation=G[:3, :3], translation=G[:3, 3])

    def inverse(self) -> "Pose":
        return Pose(rotation=self.rotation.T, translation=-self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        R = self.rotation @ other.rotation
        # re-orthonormalize against drift so long chains keep the invariant
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return Pose(rotation=R, translation=self.rotation @ other.translation + self.translation)

    def to_camera(self, X: np.ndarray) -> np.ndarray:
        """World point(s) -> camera frame. X is (..., 3)."""
        X = np.asarray(X, dtype=np.float64)
        return (X - self.translation) @ self.rotation

    def to_world(self, p_cam: np.ndarray) -> np.ndarray:
        p_cam = np.asarray(p_cam, dtype=np.float64)
        return p_cam @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PixelCoord:
    """Continuous pixel coordinate, optionally tagged with its view."""

    u: float
    v: float
    view_index: int = 0


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit norm
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise GeometryError(f"ray direction must be unit length, |d| = {n}")
        if not (0 <= self.t_near < self.t_far):
            raise GeometryError(f"invalid ray bounds [{self.t_near}, {self.t_far})")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(t, dtype=np.float64), self.direction)


def _check_in_bounds(intr: Intrinsics, u, v):
    if np.any(u < 0) or np.any(u > intr.width) or np.any(v < 0) or np.any(v > intr.height):
        raise GeometryError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height} image")


def camera_directions(intr: Intrinsics, uv: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Camera-frame direction(s) through continuous pixel coordinates uv (..., 2)."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.stack(
        [
            (uv[..., 0] - intr.cx) / intr.fx,
            (uv[..., 1] - intr.cy) / intr.fy,
            np.ones(uv.shape[:-1]),
        ],
        axis=-1,
    )
    if normalize:
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return d


def generate_ray(intr: Intrinsics, pose: Pose, px: PixelCoord, t_near: float = 0.0, t_far: float = np.inf) -> Ray:
    """World-space viewing ray through a pixel; origin is the camera center."""
    _check_in_bounds(intr, px.u, px.v)
    d_cam = camera_directions(intr, np.array([px.u, px.v]))
    d_world = pose.rotation @ d_cam
    return Ray(origin=pose.translation, direction=d_world, t_near=t_near, t_far=t_far)


def generate_rays(intr: Intrinsics, pose: Pose, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched ray origins/directions for continuous pixel coords uv (N, 2)."""
    d_cam = camera_directions(intr, uv)
    dirs = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs


def view_ray_grid(intr: Intrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Rays through every pixel center of the view; shapes (H*W, 3)."""
    vs, us = np.mgrid[0 : intr.height, 0 : intr.width]
    uv = np.stack([us + 0.5, vs + 0.5], axis=-1).reshape(-1, 2)
    return generate_rays(intr, pose, uv)


def pixel_to_world(pose: Pose, intr: Intrinsics, t: float, px: PixelCoord) -> np.ndarray:
    """Lift a pixel at cam depth t (camera-frame z) to a world point.

    Homogeneous pinhole form: X = G . K^-1 . (t*u, t*v, t).
    """
    if t <= 0:
        raise GeometryError(f"cam depth must be positive, got {t}")
    _check_in_bounds(intr, px.u, px.v)
    p_cam = np.array([t * (px.u - intr.cx) / intr.fx, t * (px.v - intr.cy) / intr.fy, t])
    return pose.to_world(p_cam)


def world_to_pixel(pose: Pose, intr: Intrinsics, X: np.ndarray) -> tuple[PixelCoord, float]:
    """Perspective-project a world point; returns (pixel, cam depth z).

    Inverse of pixel_to_world. Raises NotVisibleError when z <= VISIBILITY_EPS.
    """
    p_cam = pose.to_camera(np.asarray(X, dtype=np.float64).reshape(3))
    z = p_cam[2]
    if z <= VISIBILITY_EPS:
        raise NotVisibleError(f"point has cam depth {z}, not visible")
    u = intr.fx * p_cam[0] / z + intr.cx
    v = intr.fy * p_cam[1] / z + intr.cy
    return PixelCoord(u=float(u), v=float(v)), float(z)


def world_to_pixels(pose: Pose, intr: Intrinsics, X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched projection. Returns (uv (N,2), cam_depth (N,), visible (N,) bool).

    uv/cam_depth entries for non-visible points are filled but meaningless.
    """
    p_cam = pose.to_camera(np.asarray(X, dtype=np.float64).reshape(-1, 3))
    z = p_cam[:, 2]
    visible = z > VISIBILITY_EPS
    zs = np.where(visible, z, 1.0)
    uv = np.stack([intr.fx * p_cam[:, 0] / zs + intr.cx, intr.fy * p_cam[:, 1] / zs + intr.cy], axis=-1)
    return uv, z, visible


def points_at_distance(pose: Pose, intr: Intrinsics, uv: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Lift pixels at ray distance rho (Euclidean, unit-direction ray parameter)."""
    _, dirs = generate_rays(intr, pose, np.asarray(uv, dtype=np.float64).reshape(-1, 2))
    rho = np.asarray(rho, dtype=np.float64).reshape(-1, 1)
    return pose.translation + rho * dirs


def ray_distance_to_cam_depth(intr: Intrinsics, uv: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Convert ray distance -> camera z for pixels uv."""
    d = camera_directions(intr, np.asarray(uv, dtype=np.float64), normalize=False)
    return np.asarray(rho) / np.linalg.norm(d, axis=-1)


def cam_depth_to_ray_distance(intr: Intrinsics, uv: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Convert camera z -> ray distance for pixels uv."""
    d = camera_directions(intr, np.asarray(uv, dtype=np.float64), normalize=False)
    return np.asarray(z) * np.linalg.norm(d, axis=-1)


def reproject_depth(
    target_pose: Pose,
    intr: Intrinsics,
    target_px: PixelCoord,
    target_depth: float,
    source_pose: Pose,
) -> float:
    """Transfer a target-view depth to the source view.

    The target pixel is lifted at its ray distance and the Euclidean distance of
    that world point to the source camera center is returned (the value a
    source depth map stores under the ray-distance convention).
    """
    if target_depth <= 0:
        raise GeometryError(f"target depth must be positive, got {target_depth}")
    X = points_at_distance(target_pose, intr, np.array([[target_px.u, target_px.v]]), np.array([target_depth]))[0]
    return float(np.linalg.norm(X - source_pose.translation))
