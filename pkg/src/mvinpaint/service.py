"""Job orchestration and the HTTP API the annotation UI consumes.

Jobs run on a bounded executor (one fit at a time by default); handlers only
read job snapshots. Every artifact a job produces lands under the scene's
stages/<job_id>/ directory, so any served output is reproducible from the
manifest plus the job's config snapshot and seed.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from .field import BoundingBox, RadianceGrid, bounds_from_cameras, load_grid, save_grid
from .geometry import Pose
from .inpaint import DirectoryInpainter, HarmonicInpainter, InpaintOptions, evaluate_inpainting, inpaint_scene
from .optim import FitCancelled, FitConfig, LossWeights, PatchSpec
from .refine import RefineConfig, refine_views
from .renderer import RenderOptions, render_view
from .scene import Scene, SceneManifest, ingest, load_scene, read_mask, write_image, write_mask, write_pfm
from .segmentation import (
    AnnotationSet,
    FileMasksProvider,
    MaskSet,
    SegmentationConfig,
    segment,
)

JOB_KINDS = ("segment", "refine", "inpaint", "render", "evaluate")

logger = logging.getLogger("mvinpaint.service")


def log_event(event: str, **fields):
    """Structured JSON-lines log entry."""
    logger.info(json.dumps({"event": event, "ts": time.time(), **fields}, default=str))


class ServiceError(ValueError):
    pass


class NotFound(KeyError):
    pass


@dataclass
class Job:
    job_id: str
    kind: str
    scene_id: str
    config: dict
    state: str = "queued"  # queued -> running -> done | failed
    progress: float = 0.0
    artifacts: dict = dc_field(default_factory=dict)
    error: str | None = None
    created_at: float = dc_field(default_factory=time.time)
    finished_at: float | None = None

    def snapshot(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "scene_id": self.scene_id,
            "config": self.config,
            "state": self.state,
            "progress": round(self.progress, 4),
            "artifacts": dict(self.artifacts),
            "error": self.error,
        }


def validate_job_config(kind: str, config: dict):
    """Reject invalid configs before queuing."""
    if kind not in JOB_KINDS:
        raise ServiceError(f"unknown job kind '{kind}'")
    for key in ("lambda_clf", "lambda_lpips", "lambda_depth"):
        if key in config and float(config[key]) < 0:
            raise ServiceError(f"{key} must be >= 0")
    for key in ("iterations", "resolution", "n_samples", "rays_per_batch", "stages", "dilate_iters"):
        if key in config and int(config[key]) < 0:
            raise ServiceError(f"{key} must be >= 0")
    if kind == "segment" and int(config.get("stages", 2)) < 1:
        raise ServiceError("stages must be >= 1")
    provider = config.get("provider", "harmonic")
    if not (provider == "harmonic" or provider.startswith("dir:")):
        raise ServiceError(f"unknown provider '{provider}'")


def _fit_config(config: dict, mode: str, extra=None) -> FitConfig:
    weights = LossWeights(
        lambda_clf=float(config.get("lambda_clf", 0.1)),
        lambda_lpips=float(config.get("lambda_lpips", 0.01)),
        lambda_depth=float(config.get("lambda_depth", 1.0)),
    )
    coarse = config.get("coarse_stages", ((4, 150), (2, 150)))
    cfg = FitConfig(
        mode=mode,
        iterations=int(config.get("iterations", 400)),
        rays_per_batch=int(config.get("rays_per_batch", 2048)),
        n_samples=int(config.get("n_samples", 48)),
        sampling=config.get("sampling", "stratified"),
        seed=int(config.get("seed", 0)),
        weights=weights,
        patches=PatchSpec(
            downscale_factor=int(config.get("patch_factor", 4)),
            stride=int(config.get("patch_stride", 2)),
            views_per_batch=int(config.get("patch_views", 4)),
        ),
        coarse_stages=tuple(tuple(s) for s in coarse),
        checkpoint_every=int(config.get("checkpoint_every", 100)),
    )
    if extra:
        for k, v in extra.items():
            setattr(cfg, k, v)
    return cfg


class JobManager:
    """Owns scenes, annotations, jobs, and their artifacts under data_root."""

    def __init__(self, data_root, max_workers: int = 1):
        self.data_root = Path(data_root)
        self.data_root.mkdir(parents=True, exist_ok=True)
        self.scenes: dict[str, SceneManifest] = {}
        self.annotations: dict[str, AnnotationSet] = {}
        self.jobs: dict[str, Job] = {}
        self._cancel: dict[str, threading.Event] = {}
        self._lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=max_workers)
        # latest done artifacts per scene: masks dir, grids, inpaint stage dir
        self.latest: dict[str, dict] = {}

    # -- scenes ---------------------------------------------------------------

    def ingest_scene(self, path, scene_id: str | None = None) -> SceneManifest:
        manifest = ingest(path, scene_id=scene_id)
        with self._lock:
            self.scenes[manifest.scene_id] = manifest
            self.latest.setdefault(manifest.scene_id, {})
        return manifest

    def get_scene(self, scene_id: str) -> SceneManifest:
        try:
            return self.scenes[scene_id]
        except KeyError:
            raise NotFound(f"scene '{scene_id}'") from None

    def scene_bounds(self, manifest: SceneManifest, config: dict) -> BoundingBox:
        if "bounds_lo" in config and "bounds_hi" in config:
            return BoundingBox(np.array(config["bounds_lo"], float), np.array(config["bounds_hi"], float))
        if manifest.bounds is not None:
            return BoundingBox(np.array(manifest.bounds[0]), np.array(manifest.bounds[1]))
        poses = [Pose.from_matrix(m) for m in manifest.matrices]
        return BoundingBox(*map(np.asarray, _frustum_bounds(poses, manifest.intrinsics, float(config.get("far", 8.0)))))

    def set_annotations(self, scene_id: str, ann: AnnotationSet):
        self.get_scene(scene_id)
        ann.validate_bounds(self.scenes[scene_id].intrinsics)
        self.annotations[scene_id] = ann

    def get_annotations(self, scene_id: str) -> AnnotationSet | None:
        self.get_scene(scene_id)
        return self.annotations.get(scene_id)

    # -- jobs -----------------------------------------------------------------

    def run_job(self, kind: str, scene_id: str, config: dict) -> Job:
        validate_job_config(kind, config)
        manifest = self.get_scene(scene_id)
        job = Job(job_id=uuid.uuid4().hex[:12], kind=kind, scene_id=scene_id, config=dict(config))
        with self._lock:
            self.jobs[job.job_id] = job
            self._cancel[job.job_id] = threading.Event()
        self._executor.submit(self._execute, job, manifest)
        return job

    def poll_job(self, job_id: str) -> Job:
        try:
            return self.jobs[job_id]
        except KeyError:
            raise NotFound(f"job '{job_id}'") from None

    def cancel_job(self, job_id: str):
        self.poll_job(job_id)
        self._cancel[job_id].set()

    def _stage_dir(self, job: Job) -> Path:
        d = self.get_scene(job.scene_id).root / "stages" / job.job_id
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _execute(self, job: Job, manifest: SceneManifest):
        job.state = "running"
        log_event("job.start", job_id=job.job_id, kind=job.kind, scene=job.scene_id)
        cancel = self._cancel[job.job_id]

        def progress(frac):
            job.progress = frac

        try:
            runner = getattr(self, f"_run_{job.kind}")
            runner(job, manifest, cancel, progress)
            job.progress = 1.0
            job.state = "done"
        except FitCancelled as e:
            job.error = f"cancelled: {e}"
            job.state = "failed"
        except Exception as e:  # job isolation: failures must not kill the executor
            job.error = f"{type(e).__name__}: {e}"
            job.state = "failed"
        finally:
            job.finished_at = time.time()
            log_event(
                "job.finish",
                job_id=job.job_id,
                kind=job.kind,
                scene=job.scene_id,
                state=job.state,
                error=job.error,
                seconds=round(job.finished_at - job.created_at, 3),
            )

    # -- job runners ----------------------------------------------------------

    def _run_segment(self, job: Job, manifest: SceneManifest, cancel, progress):
        scene = load_scene(manifest)
        config = job.config
        stage = self._stage_dir(job)
        res = int(config.get("resolution", 32))
        seg_cfg = SegmentationConfig(
            fit=_fit_config(config, "mv", extra={"checkpoint_path": str(stage / "checkpoint.spgr")}),
            grid_resolution=(res, res, res),
            bounds=self.scene_bounds(manifest, config),
        )
        ann = self.annotations.get(job.scene_id)
        init_masks = None
        provider = None
        if "masks_dir" in config:
            provider = FileMasksProvider(config["masks_dir"])
        if ann is None and provider is None:
            raise ServiceError("segment job needs annotations or a masks_dir")
        result = segment(
            scene,
            ann=ann,
            stages=int(config.get("stages", 2)),
            config=seg_cfg,
            provider=provider,
            init_masks=init_masks,
            cancel=cancel,
            progress=progress,
        )
        masks_dir = stage / "masks"
        masks_dir.mkdir(exist_ok=True)
        for n, m in zip(scene.names, result.masks.masks):
            write_mask(masks_dir / f"{n}.png", m)
        save_grid(result.grid, stage / "grid.spgr")
        job.artifacts = {"masks_dir": str(masks_dir), "grid": str(stage / "grid.spgr")}
        metrics = None
        gt_dir = manifest.root / "gt_masks"
        if gt_dir.is_dir():
            from .segmentation import evaluate_masks

            truth = MaskSet(masks=[read_mask(gt_dir / f"{n}.png") for n in scene.names])
            score = evaluate_masks(result.masks, truth)
            metrics = {"mean_iou": score["mean_iou"], "mean_accuracy": score["mean_accuracy"]}
            job.artifacts["mask_metrics"] = json.dumps(metrics)
        with self._lock:
            latest = self.latest[job.scene_id]
            latest["masks_dir"] = str(masks_dir)
            latest["segment_grid"] = str(stage / "grid.spgr")
            if metrics is not None:
                latest.setdefault("mask_metrics_history", []).append(metrics)

    def _run_refine(self, job: Job, manifest: SceneManifest, cancel, progress):
        from .renderer import expected_depth

        scene = load_scene(manifest)
        config = job.config
        stage = self._stage_dir(job)
        masks = self._resolve_masks(job, scene)
        grid = self._resolve_grid(job, manifest, scene, cancel)
        depths = []
        for pose in scene.poses:
            _, depth, _, opacity = render_view(
                grid, scene.intrinsics, pose, RenderOptions(n_samples=int(config.get("n_samples", 96)), mode="midpoint")
            )
            d = expected_depth(depth, opacity)
            d[opacity <= 1e-6] = 0.0
            depths.append(d)
        imgs, deps, out_masks, stats = refine_views(scene, depths, masks.masks, RefineConfig())
        for n, img, d, m in zip(scene.names, imgs, deps, out_masks):
            write_image(stage / f"{n}.png", img)
            write_pfm(stage / f"{n}.pfm", d)
            write_mask(stage / f"{n}_mask.png", m)
        (stage / "stats.json").write_text(json.dumps(stats.to_json(), indent=2))
        job.artifacts = {"refined_dir": str(stage), "stats": str(stage / "stats.json")}

    def _run_inpaint(self, job: Job, manifest: SceneManifest, cancel, progress):
        scene = load_scene(manifest)
        config = job.config
        stage = self._stage_dir(job)
        masks = self._resolve_masks(job, scene)
        res = int(config.get("resolution", 64))
        provider_key = config.get("provider", "harmonic")
        provider = HarmonicInpainter() if provider_key == "harmonic" else DirectoryInpainter(provider_key[4:])
        original_grid = None
        grid_path = self.latest.get(job.scene_id, {}).get("segment_grid")
        if config.get("reuse_segment_grid", True) and grid_path and Path(grid_path).exists():
            candidate = load_grid(grid_path)
            if candidate.resolution == (res, res, res):
                original_grid = candidate
        opts = InpaintOptions(
            provider=provider,
            dilate_kernel=int(config.get("dilate_kernel", 5)),
            dilate_iters=int(config.get("dilate_iters", 5)),
            refine=bool(config.get("refine", False)),
            refine_depths=bool(config.get("refine_depths", False)),
            weights=LossWeights(
                lambda_lpips=float(config.get("lambda_lpips", 0.01)),
                lambda_depth=0.0 if config.get("no_depth_prior") else float(config.get("lambda_depth", 1.0)),
            ),
            fit=_fit_config(config, "inpaint", extra={"checkpoint_path": str(stage / "checkpoint.spgr")}),
            original_fit=_fit_config({**config, "iterations": int(config.get("original_iterations", config.get("iterations", 400)))}, "rec"),
            original_grid=original_grid,
            grid_resolution=(res, res, res),
            bounds=self.scene_bounds(manifest, config),
            stage_dir=stage,
        )
        grid, report = inpaint_scene(scene, masks, opts, cancel=cancel, progress=progress)
        job.artifacts = {
            "stage_dir": str(stage),
            "grid": str(stage / "inpainted_grid.spgr"),
            "report": str(stage / "report.json"),
        }
        with self._lock:
            self.latest[job.scene_id]["inpaint_stage"] = str(stage)
            self.latest[job.scene_id]["inpaint_grid"] = str(stage / "inpainted_grid.spgr")

    def _run_render(self, job: Job, manifest: SceneManifest, cancel, progress):
        scene = load_scene(manifest)
        stage = self._stage_dir(job)
        grid = self._resolve_grid(job, manifest, scene, cancel, prefer_inpaint=True)
        pose = self._resolve_pose(job.config, scene)
        color, depth, _, opacity = render_view(
            grid, scene.intrinsics, pose, RenderOptions(n_samples=int(job.config.get("n_samples", 96)), mode="midpoint")
        )
        write_image(stage / "render.png", color)
        write_pfm(stage / "depth.pfm", depth)
        job.artifacts = {"render": str(stage / "render.png"), "depth": str(stage / "depth.pfm")}

    def _run_evaluate(self, job: Job, manifest: SceneManifest, cancel, progress):
        scene = load_scene(manifest)
        config = job.config
        stage = self._stage_dir(job)
        grid = self._resolve_grid(job, manifest, scene, cancel, prefer_inpaint=True)
        truth_manifest = ingest(config["truth_dir"])
        truth = load_scene(truth_manifest)
        mask_root = Path(config["eval_masks_dir"])
        masks = [read_mask(mask_root / f"{n}.png") for n in truth.names]
        result = evaluate_inpainting(grid, scene.intrinsics, truth.images, truth.poses, masks)
        (stage / "evaluation.json").write_text(json.dumps(result, indent=2, default=float))
        job.artifacts = {"evaluation": str(stage / "evaluation.json")}

    # -- helpers ----------------------------------------------------------------

    def _resolve_masks(self, job: Job, scene: Scene) -> MaskSet:
        config = job.config
        if "masks_dir" in config:
            return FileMasksProvider(config["masks_dir"]).initial_masks(scene)
        latest = self.latest.get(job.scene_id, {}).get("masks_dir")
        if latest:
            return FileMasksProvider(latest).initial_masks(scene)
        raise ServiceError("no masks available: run a segment job or pass masks_dir")

    def _resolve_grid(self, job: Job, manifest, scene, cancel, prefer_inpaint: bool = False) -> RadianceGrid:
        config = job.config
        if "grid" in config:
            return load_grid(config["grid"])
        latest = self.latest.get(job.scene_id, {})
        order = ("inpaint_grid", "segment_grid") if prefer_inpaint else ("segment_grid", "inpaint_grid")
        if config.get("kind") in ("original", "segment"):
            order = ("segment_grid", "inpaint_grid")
        for key in order:
            path = latest.get(key)
            if path and Path(path).exists():
                return load_grid(path)
        # no fitted grid yet: fit a fresh reconstruction
        res = int(config.get("resolution", 32))
        grid = RadianceGrid((res, res, res), self.scene_bounds(manifest, config))
        from .optim import fit

        fit(grid, scene, _fit_config(config, "rec"), cancel=cancel)
        return grid

    def _resolve_pose(self, config: dict, scene: Scene) -> Pose:
        if "pose" in config:
            vals = [float(x) for x in str(config["pose"]).split(",")]
            if len(vals) != 16:
                raise ServiceError("pose needs 16 comma-separated floats (row-major 4x4)")
            return Pose.from_matrix(np.array(vals).reshape(4, 4))
        if "view" in config:
            return scene.poses[int(config["view"])]
        if "interp" in config:
            t = float(config["interp"])
            if not 0 <= t <= 1:
                raise ServiceError("interp must be in [0, 1]")
            n = len(scene.poses)
            x = t * (n - 1)
            a, b = int(np.floor(x)), min(int(np.floor(x)) + 1, n - 1)
            f = x - int(np.floor(x))
            pa, pb = scene.poses[a], scene.poses[b]
            R = (1 - f) * pa.rotation + f * pb.rotation
            u, _, vt = np.linalg.svd(R)
            R = u @ vt
            if np.linalg.det(R) < 0:
                u[:, -1] = -u[:, -1]
                R = u @ vt
            return Pose(rotation=R, translation=(1 - f) * pa.translation + f * pb.translation)
        raise ServiceError("render needs pose=, view=, or interp=")


def _frustum_bounds(poses, intr, far):
    box = bounds_from_cameras(poses, intr, far)
    return box.lo, box.hi


# -- HTTP layer ----------------------------------------------------------------

def _etag(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:32]


def create_app(manager: JobManager):
    """FastAPI application over a JobManager."""
    app = FastAPI(title="mvinpaint", version="0.1.0")
    app.state.manager = manager

    def png_response(path_or_array, request: Request) -> Response:
        if isinstance(path_or_array, (str, Path)):
            data = Path(path_or_array).read_bytes()
        else:
            buf = io.BytesIO()
            from PIL import Image

            arr = np.clip(path_or_array, 0, 1)
            Image.fromarray((arr * 255 + 0.5).astype(np.uint8)).save(buf, format="PNG")
            data = buf.getvalue()
        tag = _etag(data)
        if request.headers.get("if-none-match") == tag:
            return Response(status_code=304)
        return Response(content=data, media_type="image/png", headers={"ETag": tag})

    @app.exception_handler(NotFound)
    async def not_found(request, exc):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.exception_handler(ServiceError)
    async def invalid(request, exc):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.post("/scenes")
    def post_scene(body: dict):
        if "path" not in body:
            raise ServiceError("body needs 'path': a server-side scene directory")
        manifest = manager.ingest_scene(body["path"], scene_id=body.get("scene_id"))
        return manifest.to_json()

    @app.get("/scenes/{scene_id}")
    def get_scene(scene_id: str):
        return manager.get_scene(scene_id).to_json()

    @app.get("/scenes/{scene_id}/views/{index}.png")
    def get_view(scene_id: str, index: int, request: Request):
        manifest = manager.get_scene(scene_id)
        if not 0 <= index < len(manifest.files):
            raise NotFound(f"view {index}")
        return png_response(manifest.root / manifest.files[index], request)

    @app.put("/scenes/{scene_id}/annotations")
    def put_annotations(scene_id: str, body: dict):
        try:
            ann = AnnotationSet.from_json(body)
        except Exception as e:
            raise ServiceError(f"bad annotations: {e}") from e
        manager.set_annotations(scene_id, ann)
        return ann.to_json()

    @app.get("/scenes/{scene_id}/annotations")
    def get_annotations(scene_id: str):
        ann = manager.get_annotations(scene_id)
        if ann is None:
            raise NotFound("annotations")
        return ann.to_json()

    @app.post("/scenes/{scene_id}/jobs")
    def post_job(scene_id: str, body: dict):
        kind = body.get("kind")
        config = body.get("config", {})
        job = manager.run_job(kind, scene_id, config)
        return {"job_id": job.job_id}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        return manager.poll_job(job_id).snapshot()

    @app.post("/jobs/{job_id}/cancel")
    def post_cancel(job_id: str):
        manager.cancel_job(job_id)
        return {"job_id": job_id, "cancelled": True}

    @app.get("/scenes/{scene_id}/masks/{index}.png")
    def get_mask(scene_id: str, index: int, request: Request):
        manifest = manager.get_scene(scene_id)
        masks_dir = manager.latest.get(scene_id, {}).get("masks_dir")
        if not masks_dir:
            raise NotFound("masks (no finished segment job)")
        name = Path(manifest.files[index]).stem
        return png_response(Path(masks_dir) / f"{name}.png", request)

    @app.get("/scenes/{scene_id}/priors/{index}.png")
    def get_prior(scene_id: str, index: int, request: Request):
        manifest = manager.get_scene(scene_id)
        stage = manager.latest.get(scene_id, {}).get("inpaint_stage")
        if not stage:
            raise NotFound("priors (no finished inpaint job)")
        name = Path(manifest.files[index]).stem
        return png_response(Path(stage) / "priors_rgb" / f"{name}.png", request)

    @app.get("/scenes/{scene_id}/renders")
    def get_render(scene_id: str, request: Request, pose: str | None = None, interp: float | None = None, view: int | None = None, kind: str = "inpainted", n_samples: int = 64):
        manifest = manager.get_scene(scene_id)
        scene = load_scene(manifest)
        config: dict = {"kind": "original" if kind == "original" else "inpainted", "n_samples": n_samples}
        if pose is not None:
            config["pose"] = pose
        elif interp is not None:
            config["interp"] = interp
        elif view is not None:
            config["view"] = view
        else:
            raise ServiceError("renders needs pose=, interp=, or view=")
        job = Job(job_id="inline", kind="render", scene_id=scene_id, config=config)
        grid = manager._resolve_grid(job, manifest, scene, None, prefer_inpaint=kind != "original")
        cam = manager._resolve_pose(config, scene)
        color, _, _, _ = render_view(grid, scene.intrinsics, cam, RenderOptions(n_samples=n_samples, mode="midpoint"))
        return png_response(color, request)

    @app.get("/scenes/{scene_id}/report")
    def get_report(scene_id: str):
        manager.get_scene(scene_id)
        stage = manager.latest.get(scene_id, {}).get("inpaint_stage")
        if not stage:
            raise NotFound("report (no finished inpaint job)")
        return json.loads((Path(stage) / "report.json").read_text())

    @app.get("/scenes/{scene_id}/mask_metrics")
    def get_mask_metrics(scene_id: str):
        """IoU/accuracy of the newest masks vs bundled ground truth, plus the
        previous segmentation run's numbers (drives the UI badge)."""
        manager.get_scene(scene_id)
        history = manager.latest.get(scene_id, {}).get("mask_metrics_history")
        if not history:
            raise NotFound("mask metrics (no ground truth or no finished segment job)")
        current = history[-1]
        previous = history[-2] if len(history) > 1 else None
        return {"current": current, "previous": previous}

    return app
