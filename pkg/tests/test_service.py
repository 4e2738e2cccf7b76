"""Service tests: manifest validation and round-trips, job lifecycle with
cancellation, and the HTTP surface driven end to end on the demo scene."""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from mvinpaint.scene import ManifestError, export, ingest, read_pfm, write_pfm
from mvinpaint.service import JobManager, NotFound, ServiceError, create_app, validate_job_config
from mvinpaint.synthetic import make_box_bundle, write_scene_dir

TINY = {
    "resolution": 16,
    "iterations": 60,
    "coarse_stages": ((2, 40),),
    "rays_per_batch": 512,
    "n_samples": 24,
    "seed": 5,
}


@pytest.fixture(scope="module")
def demo_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes") / "demo"
    bundle = make_box_bundle(n_train=8, n_test=2, width=48, height=48, seed=3)
    write_scene_dir(bundle, root)
    return root, bundle


@pytest.fixture()
def manager(tmp_path):
    return JobManager(tmp_path / "data", max_workers=1)


def wait_for(manager, job_id, timeout=600):
    t0 = time.time()
    while time.time() - t0 < timeout:
        job = manager.poll_job(job_id)
        if job.state in ("done", "failed"):
            return job
        time.sleep(0.1)
    raise TimeoutError(f"job {job_id} did not finish")


class TestIngest:
    def test_well_formed_scene(self, demo_dir):
        root, bundle = demo_dir
        manifest = ingest(root)
        assert len(manifest.files) == 8
        assert manifest.intrinsics.width == 48
        assert (root / "manifest.json").exists()

    def test_rejects_reflection_matrix(self, tmp_path, demo_dir):
        root, _ = demo_dir
        doc = json.loads((root / "transforms.json").read_text())
        doc["frames"][1]["matrix"][0] = -doc["frames"][1]["matrix"][0]  # negate a row entry
        bad = tmp_path / "bad"
        bad.mkdir()
        (bad / "images").symlink_to(root / "images")
        (bad / "transforms.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match=r"frames\[1\]"):
            ingest(bad)

    def test_reports_missing_file_with_index(self, tmp_path, demo_dir):
        root, _ = demo_dir
        doc = json.loads((root / "transforms.json").read_text())
        doc["frames"][2]["file"] = "images/nope.png"
        bad = tmp_path / "bad2"
        bad.mkdir()
        (bad / "images").symlink_to(root / "images")
        (bad / "transforms.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match=r"frames\[2\]"):
            ingest(bad)

    def test_schema_violations_name_fields(self, tmp_path):
        bad = tmp_path / "bad3"
        bad.mkdir()
        (bad / "transforms.json").write_text(json.dumps({"frames": [{"file": "x"}]}))
        with pytest.raises(ManifestError, match="intrinsics"):
            ingest(bad)

    def test_export_ingest_roundtrip(self, tmp_path, demo_dir):
        root, _ = demo_dir
        manifest = ingest(root)
        out = tmp_path / "exported"
        export(manifest, out)
        (out / "images").symlink_to(root / "images")
        back = ingest(out)
        assert back.files == manifest.files
        assert np.allclose(np.stack(back.matrices), np.stack(manifest.matrices))
        assert back.intrinsics == manifest.intrinsics

    def test_pfm_roundtrip(self, tmp_path):
        data = np.random.default_rng(0).uniform(0, 9, (13, 17)).astype(np.float32)
        write_pfm(tmp_path / "d.pfm", data)
        again = read_pfm(tmp_path / "d.pfm")
        assert np.allclose(again, data, atol=1e-7)


class TestJobValidation:
    def test_unknown_kind(self):
        with pytest.raises(ServiceError):
            validate_job_config("explode", {})

    def test_negative_lambda(self):
        with pytest.raises(ServiceError):
            validate_job_config("inpaint", {"lambda_depth": -1})

    def test_bad_provider(self):
        with pytest.raises(ServiceError):
            validate_job_config("inpaint", {"provider": "diffusion"})

    def test_unknown_scene(self, manager):
        with pytest.raises(NotFound):
            manager.run_job("segment", "nope", {})

    def test_poll_unknown_job(self, manager):
        with pytest.raises(NotFound):
            manager.poll_job("nope")


class TestJobLifecycle:
    def test_segment_job_reaches_done_with_masks(self, manager, demo_dir):
        root, bundle = demo_dir
        manifest = manager.ingest_scene(root)
        config = dict(TINY, masks_dir=str(root / "gt_masks"), stages=1)
        job = manager.run_job("segment", manifest.scene_id, config)
        done = wait_for(manager, job.job_id)
        assert done.state == "done", done.error
        masks_dir = Path(done.artifacts["masks_dir"])
        assert sorted(p.name for p in masks_dir.glob("*.png"))[0] == "000.png"
        assert Path(done.artifacts["grid"]).exists()

    def test_cancel_during_fit_keeps_checkpoint(self, manager, demo_dir):
        root, _ = demo_dir
        manifest = manager.ingest_scene(root)
        config = dict(TINY, iterations=100000, masks_dir=str(root / "gt_masks"), stages=1)
        config["checkpoint_every"] = 1
        job = manager.run_job("segment", manifest.scene_id, config)
        t0 = time.time()
        while manager.poll_job(job.job_id).state == "queued" and time.time() - t0 < 60:
            time.sleep(0.05)
        time.sleep(2.0)  # let a few iterations (and a checkpoint) happen
        manager.cancel_job(job.job_id)
        done = wait_for(manager, job.job_id)
        assert done.state == "failed"
        assert "cancel" in done.error
        stage = root / "stages" / job.job_id
        assert (stage / "checkpoint.spgr").exists()

    def test_config_snapshot_immutable(self, manager, demo_dir):
        root, _ = demo_dir
        manifest = manager.ingest_scene(root)
        config = dict(TINY, masks_dir=str(root / "gt_masks"), stages=1)
        job = manager.run_job("segment", manifest.scene_id, config)
        config["iterations"] = 999999  # caller mutation must not leak in
        done = wait_for(manager, job.job_id)
        assert done.config["iterations"] == TINY["iterations"]


class TestHttpApi:
    @pytest.fixture()
    def client(self, manager):
        return TestClient(create_app(manager))

    def test_scene_endpoints(self, client, demo_dir):
        root, _ = demo_dir
        r = client.post("/scenes", json={"path": str(root)})
        assert r.status_code == 200
        scene_id = r.json()["scene_id"]
        r = client.get(f"/scenes/{scene_id}")
        assert r.status_code == 200 and len(r.json()["frames"]) == 8
        r = client.get(f"/scenes/{scene_id}/views/0.png")
        assert r.status_code == 200 and r.headers["content-type"] == "image/png"
        etag = r.headers["etag"]
        r304 = client.get(f"/scenes/{scene_id}/views/0.png", headers={"If-None-Match": etag})
        assert r304.status_code == 304
        assert client.get("/scenes/ghost").status_code == 404

    def test_annotation_roundtrip(self, client, demo_dir):
        root, _ = demo_dir
        scene_id = client.post("/scenes", json={"path": str(root)}).json()["scene_id"]
        doc = {"source_view": 0, "positive": [[24.0, 25.0], [20.0, 22.0]], "negative": [[4.0, 4.0]]}
        r = client.put(f"/scenes/{scene_id}/annotations", json=doc)
        assert r.status_code == 200
        echoed = client.get(f"/scenes/{scene_id}/annotations").json()
        assert echoed == doc

    def test_invalid_config_rejected_before_queuing(self, client, demo_dir):
        root, _ = demo_dir
        scene_id = client.post("/scenes", json={"path": str(root)}).json()["scene_id"]
        r = client.post(f"/scenes/{scene_id}/jobs", json={"kind": "inpaint", "config": {"lambda_depth": -1}})
        assert r.status_code == 422

    def test_full_pipeline_over_http(self, client, demo_dir):
        """Annotate, segment, inspect masks, inpaint, render: API only."""
        root, bundle = demo_dir
        scene_id = client.post("/scenes", json={"path": str(root)}).json()["scene_id"]

        gt = bundle.gt_masks[0]
        ys, xs = np.nonzero(gt)
        ann = {
            "source_view": 0,
            "positive": [[float(xs.mean() + 0.5), float(ys.mean() + 0.5)]],
            "negative": [[4.0, 4.0]],
        }
        assert client.put(f"/scenes/{scene_id}/annotations", json=ann).status_code == 200

        seg_config = dict(TINY, stages=1)
        r = client.post(f"/scenes/{scene_id}/jobs", json={"kind": "segment", "config": seg_config})
        assert r.status_code == 200
        job_id = r.json()["job_id"]
        snap = self._wait_http(client, job_id)
        assert snap["state"] == "done", snap["error"]

        r = client.get(f"/scenes/{scene_id}/masks/0.png")
        assert r.status_code == 200

        inp_config = dict(TINY, iterations=80, dilate_iters=2, patch_factor=4, provider="harmonic")
        r = client.post(f"/scenes/{scene_id}/jobs", json={"kind": "inpaint", "config": inp_config})
        job_id = r.json()["job_id"]
        snap = self._wait_http(client, job_id)
        assert snap["state"] == "done", snap["error"]

        assert client.get(f"/scenes/{scene_id}/priors/0.png").status_code == 200
        report = client.get(f"/scenes/{scene_id}/report").json()
        assert report["provider"] == "harmonic"
        r = client.get(f"/scenes/{scene_id}/renders", params={"interp": 0.4, "kind": "inpainted", "n_samples": 32})
        assert r.status_code == 200 and r.headers["content-type"] == "image/png"
        r = client.get(f"/scenes/{scene_id}/renders", params={"view": 0, "kind": "original", "n_samples": 32})
        assert r.status_code == 200

    @staticmethod
    def _wait_http(client, job_id, timeout=900):
        t0 = time.time()
        while time.time() - t0 < timeout:
            snap = client.get(f"/jobs/{job_id}").json()
            if snap["state"] in ("done", "failed"):
                return snap
            time.sleep(0.2)
        raise TimeoutError(job_id)
