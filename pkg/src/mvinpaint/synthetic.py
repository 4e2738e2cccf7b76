"""Bundled synthetic scenes: analytic ray-traced textured wall + occluder box.

These scenes come with exact ground truth (object masks, object-free renders,
depths along rays), so they double as oracles for segmentation, refinement,
and inpainting tests. World axes follow the camera convention (+y down, +z
away from the cameras); the wall is the plane z = wall_z.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose, generate_rays, view_ray_grid
from .scene import Scene, write_image, write_mask


@dataclass(frozen=True)
class BoxSceneSpec:
    wall_z: float = 4.0
    box_lo: tuple = (-0.45, -0.40, 2.2)
    box_hi: tuple = (0.35, 0.45, 3.0)
    texture_scale: float = 1.0  # spatial frequency multiplier for all textures
    # per-face colors keyed by dominant normal axis: -x +x -y +y -z +z
    box_colors: tuple = (
        (0.70, 0.32, 0.24),
        (0.62, 0.26, 0.30),
        (0.74, 0.38, 0.20),
        (0.58, 0.30, 0.34),
        (0.66, 0.28, 0.22),
        (0.66, 0.28, 0.22),
    )


def wall_texture(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Two-scale smooth RGB texture; the mid-frequency component carries the
    parallax cues that pin surface geometry during fitting."""
    r = 0.52 + 0.15 * np.sin(4.3 * x + 0.7) * np.cos(3.6 * y - 0.4) + 0.08 * np.sin(1.1 * x - 1.0)
    g = 0.50 + 0.15 * np.sin(3.8 * x - 1.0) * np.cos(4.4 * y + 0.3) + 0.08 * np.cos(0.9 * y + 0.6)
    b = 0.50 + 0.15 * np.cos(3.4 * x + 0.2) * np.sin(4.0 * y + 1.1) + 0.08 * np.sin(1.3 * (x + y))
    return np.stack([r, g, b], axis=-1)


def _ray_box(origins, dirs, lo, hi):
    """Slab intersection; returns (t_enter, face_axis, hit)."""
    safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    ta = (lo - origins) / safe
    tb = (hi - origins) / safe
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    t_enter_axis = np.argmax(tmin, axis=-1)
    t_enter = np.max(tmin, axis=-1)
    t_exit = np.min(tmax, axis=-1)
    hit = (t_enter < t_exit) & (t_exit > 0) & (t_enter > 0)
    return t_enter, t_enter_axis, hit


def trace_view(intr: Intrinsics, pose: Pose, spec: BoxSceneSpec, include_object: bool = True):
    """Analytic render of one camera.

    Returns (rgb (H,W,3), depth (H,W) ray distance, object_mask (H,W)).
    Rays that miss everything stay black with depth 0.
    """
    origins, dirs = view_ray_grid(intr, pose)
    H, W = intr.height, intr.width
    dz = dirs[:, 2]
    ok_wall = dz > 1e-9
    t_wall = np.where(ok_wall, (spec.wall_z - origins[:, 2]) / np.where(ok_wall, dz, 1.0), np.inf)
    t_wall = np.where(t_wall > 0, t_wall, np.inf)

    lo = np.asarray(spec.box_lo)
    hi = np.asarray(spec.box_hi)
    t_box, face_axis, hit_box = _ray_box(origins, dirs, lo, hi)
    t_box = np.where(hit_box & include_object, t_box, np.inf)

    t = np.minimum(t_wall, t_box)
    obj = t_box < t_wall
    rgb = np.zeros((H * W, 3))
    wall_sel = np.isfinite(t) & ~obj
    pw = origins[wall_sel] + t[wall_sel, None] * dirs[wall_sel]
    s = spec.texture_scale
    rgb[wall_sel] = wall_texture(s * pw[:, 0], s * pw[:, 1])
    if np.any(obj):
        sel = np.nonzero(obj)[0]
        ax = face_axis[sel]
        d_ax = dirs[sel, ax]
        # d > 0 enters the lo face (outward normal -axis), d < 0 the hi face
        face_idx = ax * 2 + (d_ax < 0).astype(int)
        hit_pts = origins[sel] + t[sel, None] * dirs[sel]
        # mild positional modulation gives the faces parallax texture too
        mod = 0.06 * np.sin(s * (7.0 * hit_pts[:, 0] + 5.0 * hit_pts[:, 1] + 3.0 * hit_pts[:, 2]))
        rgb[sel] = np.clip(np.asarray(spec.box_colors)[face_idx] + mod[:, None], 0.0, 1.0)
    depth = np.where(np.isfinite(t), t, 0.0)
    return rgb.reshape(H, W, 3), depth.reshape(H, W), obj.reshape(H, W)


def look_at(origin, target) -> Pose:
    o = np.asarray(origin, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - o
    z = z / np.linalg.norm(z)
    down = np.array([0.0, 1.0, 0.0])
    x = np.cross(down, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(rotation=np.stack([x, y, z], axis=1), translation=o)


@dataclass
class SyntheticBundle:
    """A train scene with the object plus every ground truth an oracle needs."""

    spec: BoxSceneSpec
    scene: Scene  # train views, object present
    gt_masks: list[np.ndarray]  # object masks per train view
    gt_depths: list[np.ndarray]  # with-object depths per train view
    clean_images: list[np.ndarray]  # object-free renders per train view
    clean_depths: list[np.ndarray]
    test_poses: list[Pose]
    test_clean_images: list[np.ndarray]  # object-free renders per test pose
    test_clean_depths: list[np.ndarray]
    test_masks: list[np.ndarray]  # where the object would appear per test pose


def make_box_bundle(
    n_train: int = 16,
    n_test: int = 6,
    width: int = 64,
    height: int = 64,
    seed: int = 7,
    spec: BoxSceneSpec | None = None,
    ring_radius: tuple = (1.05, 0.75),
) -> SyntheticBundle:
    spec = spec or BoxSceneSpec()
    rng = np.random.default_rng(seed)
    intr = Intrinsics(fx=0.95 * width, fy=0.95 * width, cx=width / 2, cy=height / 2, width=width, height=height)

    def cameras(n, phase):
        poses = []
        for i in range(n):
            a = 2 * np.pi * (i / n) + phase
            o = np.array(
                [
                    ring_radius[0] * np.cos(a) + 0.08 * rng.standard_normal(),
                    ring_radius[1] * np.sin(a) + 0.08 * rng.standard_normal(),
                    0.25 * np.sin(2 * a) + 0.05 * rng.standard_normal(),
                ]
            )
            target = np.array([0.12 * rng.standard_normal(), 0.12 * rng.standard_normal(), spec.wall_z])
            poses.append(look_at(o, target))
        return poses

    train_poses = cameras(n_train, 0.0)
    test_poses = cameras(n_test, np.pi / n_train)

    images, gt_masks, gt_depths, clean_images, clean_depths = [], [], [], [], []
    for pose in train_poses:
        rgb, depth, obj = trace_view(intr, pose, spec, include_object=True)
        crgb, cdepth, _ = trace_view(intr, pose, spec, include_object=False)
        images.append(rgb)
        gt_masks.append(obj)
        gt_depths.append(depth)
        clean_images.append(crgb)
        clean_depths.append(cdepth)
    test_clean_images, test_clean_depths, test_masks = [], [], []
    for pose in test_poses:
        crgb, cdepth, _ = trace_view(intr, pose, spec, include_object=False)
        _, _, obj = trace_view(intr, pose, spec, include_object=True)
        test_clean_images.append(crgb)
        test_clean_depths.append(cdepth)
        test_masks.append(obj)

    scene = Scene(
        intrinsics=intr,
        poses=train_poses,
        images=images,
        names=[f"{i:03d}" for i in range(n_train)],
    )
    return SyntheticBundle(
        spec=spec,
        scene=scene,
        gt_masks=gt_masks,
        gt_depths=gt_depths,
        clean_images=clean_images,
        clean_depths=clean_depths,
        test_poses=test_poses,
        test_clean_images=test_clean_images,
        test_clean_depths=test_clean_depths,
        test_masks=test_masks,
    )


def make_refine_bundle(n_train: int = 12, seed: int = 7, width: int = 64, height: int = 64) -> SyntheticBundle:
    """Occluder scene tuned so every dilated-mask pixel's background is
    directly visible in at least one view (small box well in front of the
    wall, wide camera ring): refinement can then empty the masks outright.
    The gentle texture keeps cross-view resampling error below the 2/255
    exactness bar."""
    spec = BoxSceneSpec(box_lo=(-0.18, -0.16, 2.25), box_hi=(0.18, 0.20, 2.65), texture_scale=0.3)
    return make_box_bundle(
        n_train=n_train, n_test=4, width=width, height=height, seed=seed, spec=spec, ring_radius=(2.4, 2.0)
    )


def default_bounds(spec: BoxSceneSpec, poses: list[Pose], intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Tight scene box around the content (occluder through wall), laterally
    wide enough to contain every frustum's wall intersection.

    Excluding the empty gap in front of the occluder keeps density from
    forming floaters near the cameras, which forward-facing captures are
    prone to; rays outside the box are empty by construction.
    """
    corners = np.array(
        [[0.5, 0.5], [intr.width - 0.5, 0.5], [0.5, intr.height - 0.5], [intr.width - 0.5, intr.height - 0.5]]
    )
    pts = []
    for pose in poses:
        origins, dirs = generate_rays(intr, pose, corners)
        t = (spec.wall_z - origins[:, 2]) / dirs[:, 2]
        pts.append(origins + t[:, None] * dirs)
    pts = np.concatenate(pts)
    lo = np.array([pts[:, 0].min() - 0.1, pts[:, 1].min() - 0.1, spec.box_lo[2] - 0.4])
    hi = np.array([pts[:, 0].max() + 0.1, pts[:, 1].max() + 0.1, spec.wall_z + 0.15])
    return lo, hi


def write_scene_dir(bundle: SyntheticBundle, out_dir, with_gt: bool = True) -> Path:
    """Persist the bundle as an ingestable scene directory."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    intr = bundle.scene.intrinsics
    frames = []
    for name, pose, img in zip(bundle.scene.names, bundle.scene.poses, bundle.scene.images):
        rel = f"images/{name}.png"
        write_image(root / rel, img)
        frames.append({"file": rel, "matrix": [float(x) for x in pose.matrix.reshape(-1)]})
    lo, hi = default_bounds(bundle.spec, bundle.scene.poses + bundle.test_poses, intr)
    doc = {
        "scene_id": root.name,
        "intrinsics": {
            "fx": intr.fx,
            "fy": intr.fy,
            "cx": intr.cx,
            "cy": intr.cy,
            "w": intr.width,
            "h": intr.height,
        },
        "frames": frames,
        "bounds": {"lo": [float(x) for x in lo], "hi": [float(x) for x in hi]},
    }
    (root / "transforms.json").write_text(json.dumps(doc, indent=2))
    if with_gt:
        (root / "gt_masks").mkdir(exist_ok=True)
        for name, mask in zip(bundle.scene.names, bundle.gt_masks):
            write_mask(root / "gt_masks" / f"{name}.png", mask)
    return root
