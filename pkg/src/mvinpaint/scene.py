"""Posed image collections: manifest schema, validation, and image I/O.

A scene directory contains images/ plus transforms.json:

    {
      "intrinsics": {"fx":..., "fy":..., "cx":..., "cy":..., "w":..., "h":...},
      "frames": [{"file": "images/000.png", "matrix": [16 floats, row-major]}]
    }

Matrices are camera-to-world. Color images are 8-bit PNG; depth and logit maps
are 32-bit float PFM.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import GeometryError, Intrinsics, Pose


class ManifestError(ValueError):
    pass


@dataclass
class SceneManifest:
    scene_id: str
    root: Path
    intrinsics: Intrinsics
    files: list[str]
    matrices: list[np.ndarray]  # 4x4 camera-to-world
    mask_dir: str | None = None
    depth_dir: str | None = None
    bounds: tuple | None = None  # ([lo xyz], [hi xyz]) scene box, optional
    units: str = "arbitrary"

    def to_json(self) -> dict:
        doc = {
            "scene_id": self.scene_id,
            "intrinsics": {
                "fx": self.intrinsics.fx,
                "fy": self.intrinsics.fy,
                "cx": self.intrinsics.cx,
                "cy": self.intrinsics.cy,
                "w": self.intrinsics.width,
                "h": self.intrinsics.height,
            },
            "frames": [
                {"file": f, "matrix": [float(x) for x in m.reshape(-1)]}
                for f, m in zip(self.files, self.matrices)
            ],
            "mask_dir": self.mask_dir,
            "depth_dir": self.depth_dir,
            "units": self.units,
        }
        if self.bounds is not None:
            doc["bounds"] = {"lo": list(self.bounds[0]), "hi": list(self.bounds[1])}
        return doc


@dataclass
class Scene:
    """Loaded scene: images in [0,1] float64, shared intrinsics, c2w poses."""

    intrinsics: Intrinsics
    poses: list[Pose]
    images: list[np.ndarray]
    names: list[str] = field(default_factory=list)
    masks: list[np.ndarray] | None = None
    depths: list[np.ndarray] | None = None

    @property
    def n_views(self) -> int:
        return len(self.images)


def read_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr


def write_image(path, img: np.ndarray):
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def write_mask(path, mask: np.ndarray):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def write_pfm(path, data: np.ndarray):
    """Grayscale PFM, little-endian (negative scale), bottom-up row order."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("pfm writer expects a single-channel map")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4" if scale < 0 else ">f4")
        return np.flipud(data.reshape(h, w)).astype(np.float64)


def _parse_intrinsics(d: dict) -> Intrinsics:
    try:
        return Intrinsics(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["w"]),
            height=int(d["h"]),
        )
    except KeyError as e:
        raise ManifestError(f"intrinsics: missing field {e}") from e
    except GeometryError as e:
        raise ManifestError(f"intrinsics: {e}") from e


def ingest(path, scene_id: str | None = None) -> SceneManifest:
    """Validate a scene directory and persist its manifest.

    Every referenced image is decoded once; rotations must be orthonormal with
    determinant +1. Violations are reported with the offending field path or
    frame index.
    """
    root = Path(path)
    tf_path = root / "transforms.json"
    if not tf_path.exists():
        raise ManifestError(f"{root}: transforms.json not found")
    doc = json.loads(tf_path.read_text())
    if "intrinsics" not in doc:
        raise ManifestError("transforms.json: missing 'intrinsics'")
    if "frames" not in doc or not doc["frames"]:
        raise ManifestError("transforms.json: missing or empty 'frames'")
    intr = _parse_intrinsics(doc["intrinsics"])
    files: list[str] = []
    matrices: list[np.ndarray] = []
    for i, frame in enumerate(doc["frames"]):
        if "file" not in frame or "matrix" not in frame:
            raise ManifestError(f"frames[{i}]: needs 'file' and 'matrix'")
        m = np.asarray(frame["matrix"], dtype=np.float64)
        if m.size != 16:
            raise ManifestError(f"frames[{i}].matrix: expected 16 floats, got {m.size}")
        m = m.reshape(4, 4)
        try:
            Pose.from_matrix(m)
        except GeometryError as e:
            raise ManifestError(f"frames[{i}]: {e}") from e
        img_path = root / frame["file"]
        if not img_path.exists():
            raise ManifestError(f"frames[{i}].file: {img_path} does not exist")
        with Image.open(img_path) as im:
            if im.size != (intr.width, intr.height):
                raise ManifestError(
                    f"frames[{i}].file: image is {im.size}, intrinsics say {(intr.width, intr.height)}"
                )
        files.append(frame["file"])
        matrices.append(m)
    bounds = None
    if "bounds" in doc:
        b = doc["bounds"]
        bounds = ([float(x) for x in b["lo"]], [float(x) for x in b["hi"]])
    manifest = SceneManifest(
        scene_id=scene_id or doc.get("scene_id", root.name),
        root=root,
        intrinsics=intr,
        files=files,
        matrices=matrices,
        mask_dir=doc.get("mask_dir"),
        depth_dir=doc.get("depth_dir"),
        bounds=bounds,
    )
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2))
    return manifest


def export(manifest: SceneManifest, out_dir) -> Path:
    """Write a transforms.json (images are referenced, not copied) for round-trips."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = manifest.to_json()
    doc.pop("scene_id", None)
    (out / "transforms.json").write_text(json.dumps(doc, indent=2))
    return out


def load_scene(manifest: SceneManifest, with_masks: bool = True, with_depths: bool = True) -> Scene:
    images = [read_image(manifest.root / f) for f in manifest.files]
    poses = [Pose.from_matrix(m) for m in manifest.matrices]
    names = [Path(f).stem for f in manifest.files]
    masks = None
    depths = None
    if with_masks and manifest.mask_dir:
        mask_root = manifest.root / manifest.mask_dir
        masks = [read_mask(mask_root / f"{n}.png") for n in names]
    if with_depths and manifest.depth_dir:
        depth_root = manifest.root / manifest.depth_dir
        depths = [read_pfm(depth_root / f"{n}.pfm") for n in names]
    return Scene(intrinsics=manifest.intrinsics, poses=poses, images=images, names=names, masks=masks, depths=depths)
