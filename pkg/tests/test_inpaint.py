"""Inpainting provider and pipeline tests: harmonic fill vs a Jacobi oracle,
directory compositing, depth priors, and the evaluation metric."""

import numpy as np
import pytest

from mvinpaint.field import BoundingBox, RadianceGrid
from mvinpaint.inpaint import (
    DirectoryInpainter,
    HarmonicInpainter,
    InpaintError,
    InpaintOptions,
    evaluate_inpainting,
    expand_bbox,
    extract_depth_priors,
    harmonic_fill,
    inpaint_scene,
)
from mvinpaint.optim import FitConfig, LossWeights, PatchSpec, fit
from mvinpaint.renderer import RenderOptions, render_view
from mvinpaint.scene import write_image, write_pfm
from mvinpaint.segmentation import MaskSet, dilate
from mvinpaint.synthetic import default_bounds


def jacobi_fill(channel, mask, iters=40000, tol=1e-10):
    """Independent iterative harmonic fill (average of in-bounds neighbours)."""
    out = channel.astype(np.float64).copy()
    out[mask] = out[~mask].mean() if (~mask).any() else 0.0
    H, W = out.shape
    ys, xs = np.nonzero(mask)
    for _ in range(iters):
        acc = np.zeros(ys.size)
        cnt = np.zeros(ys.size)
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ny, nx = ys + dy, xs + dx
            ok = (ny >= 0) & (ny < H) & (nx >= 0) & (nx < W)
            acc[ok] += out[ny[ok], nx[ok]]
            cnt[ok] += 1
        new = acc / cnt
        delta = np.max(np.abs(new - out[ys, xs]))
        out[ys, xs] = new
        if delta < tol:
            break
    return out


class TestHarmonicProvider:
    def test_constant_boundary_fills_constant(self):
        img = np.full((20, 20), 0.37)
        mask = np.zeros((20, 20), bool)
        mask[5:15, 6:16] = True
        filled = harmonic_fill(img, mask)
        assert np.max(np.abs(filled - 0.37)) < 1e-10

    def test_linear_ramp_preserved(self):
        img = np.tile(np.linspace(0.1, 0.9, 24)[None, :], (24, 1))
        mask = np.zeros((24, 24), bool)
        mask[8:16, 6:18] = True
        filled = harmonic_fill(img, mask)
        assert np.max(np.abs(filled - img)) < 1e-3

    def test_matches_jacobi_oracle(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (16, 16))
        mask = np.zeros((16, 16), bool)
        mask[4:12, 5:13] = True
        mask[2, 2] = True  # second component
        direct = harmonic_fill(img, mask)
        iterative = jacobi_fill(img, mask)
        assert np.max(np.abs(direct - iterative)) < 1e-6

    def test_unmasked_pixels_bit_identical(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (20, 20, 3))
        mask = np.zeros((20, 20), bool)
        mask[3:9, 3:9] = True
        out = HarmonicInpainter().inpaint_rgb(img, mask)
        assert np.array_equal(out[~mask], img[~mask])
        assert not np.array_equal(out[mask], img[mask])

    def test_fully_masked_image_rejected(self):
        with pytest.raises(InpaintError):
            harmonic_fill(np.zeros((8, 8)), np.ones((8, 8), bool))

    def test_depth_same_solver(self):
        depth = np.full((12, 12), 4.0)
        mask = np.zeros((12, 12), bool)
        mask[4:8, 4:8] = True
        out = HarmonicInpainter().inpaint_depth(depth, mask)
        assert np.allclose(out, 4.0)


class TestDirectoryProvider:
    def _scene_views(self, tmp_path, images, names):
        for n, img in zip(names, images):
            write_image(tmp_path / f"{n}.png", img)
        return DirectoryInpainter(tmp_path)

    def test_originals_give_originals(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.uniform(0.2, 0.8, (16, 16, 3))
        provider = self._scene_views(tmp_path, [img], ["000"])
        mask = np.zeros((16, 16), bool)
        mask[4:8, 4:8] = True
        out = provider.inpaint_rgb(img, mask, view="000")
        # png round-trip quantizes to 8 bits
        assert np.max(np.abs(out - img)) <= 0.5 / 255 + 1e-12

    def test_composites_stored_inside_mask_only(self, tmp_path):
        img = np.zeros((8, 8, 3))
        stored = np.ones((8, 8, 3))
        provider = self._scene_views(tmp_path, [stored], ["v"])
        mask = np.zeros((8, 8), bool)
        mask[2:4, 2:4] = True
        out = provider.inpaint_rgb(img, mask, view="v")
        assert np.array_equal(out[~mask], img[~mask])
        assert np.allclose(out[mask], 1.0)

    def test_missing_view_listed(self, tmp_path, box_bundle):
        provider = self._scene_views(tmp_path, [box_bundle.scene.images[0]], ["000"])
        with pytest.raises(InpaintError, match="001"):
            provider.prepare(box_bundle.scene)

    def test_depth_file_used_when_present(self, tmp_path):
        depth = np.full((8, 8), 2.0)
        stored = np.full((8, 8), 5.0)
        write_pfm(tmp_path / "v.pfm", stored)
        provider = DirectoryInpainter(tmp_path)
        mask = np.zeros((8, 8), bool)
        mask[1:3, 1:3] = True
        out = provider.inpaint_depth(depth, mask, view="v")
        assert np.allclose(out[mask], 5.0) and np.allclose(out[~mask], 2.0)


class TestDepthPriors:
    def test_empty_masks_unchanged(self, box_bundle, fitted_box_grid):
        empty = MaskSet([np.zeros((64, 64), bool) for _ in range(box_bundle.scene.n_views)])
        priors = extract_depth_priors(fitted_box_grid, box_bundle.scene, empty, HarmonicInpainter(), n_samples=48)
        _, depth, _, opacity = render_view(
            fitted_box_grid, box_bundle.scene.intrinsics, box_bundle.scene.poses[0], RenderOptions(n_samples=48, mode="midpoint")
        )
        from mvinpaint.renderer import expected_depth

        d = expected_depth(depth, opacity)
        d[opacity <= 1e-6] = 0.0
        assert np.array_equal(priors[0], d)

    def test_harmonic_fill_of_analytic_depth_hits_background_plane(self, box_bundle):
        """Provider-level oracle on a frontal box-on-plane view: fill the
        object's depth from the surrounding wall, compare to the true plane."""
        from mvinpaint.synthetic import look_at, trace_view

        intr = box_bundle.scene.intrinsics
        pose = look_at(np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.0, box_bundle.spec.wall_z]))
        _, depth, obj = trace_view(intr, pose, box_bundle.spec, include_object=True)
        _, clean_depth, _ = trace_view(intr, pose, box_bundle.spec, include_object=False)
        mask = dilate(obj, 5, 2)
        filled = HarmonicInpainter().inpaint_depth(depth, mask)
        rel = np.abs(filled[mask] - clean_depth[mask]) / clean_depth[mask]
        assert np.mean(rel < 0.05) >= 0.90

    def test_fitted_depth_priors_near_plane(self, box_bundle, fitted_box_grid):
        masks = MaskSet([dilate(m, 5, 5) for m in box_bundle.gt_masks])
        priors = extract_depth_priors(fitted_box_grid, box_bundle.scene, masks, HarmonicInpainter(), n_samples=64)
        ok = []
        for v in range(4):
            m = masks.masks[v]
            rel = np.abs(priors[v][m] - box_bundle.clean_depths[v][m]) / box_bundle.clean_depths[v][m]
            ok.append(np.mean(rel < 0.05))
        assert np.mean(ok) >= 0.90


class TestInpaintScene:
    def test_degenerate_config_equals_plain_fit(self, box_bundle):
        """Empty masks and zero lambdas reduce bit-exactly to reconstruction."""
        intr = box_bundle.scene.intrinsics
        lo, hi = default_bounds(box_bundle.spec, box_bundle.scene.poses, intr)
        bounds = BoundingBox(lo, hi)
        cfg = FitConfig(
            mode="inpaint",
            iterations=40,
            coarse_stages=((2, 20),),
            rays_per_batch=256,
            n_samples=16,
            seed=5,
            weights=LossWeights(lambda_lpips=0.0, lambda_depth=0.0),
        )
        opts = InpaintOptions(
            bounds=bounds,
            grid_resolution=(16, 16, 16),
            weights=LossWeights(lambda_lpips=0.0, lambda_depth=0.0),
            fit=cfg,
        )
        empty = MaskSet([np.zeros((64, 64), bool) for _ in range(box_bundle.scene.n_views)])
        grid, report = inpaint_scene(box_bundle.scene, empty, opts)

        plain = RadianceGrid((16, 16, 16), bounds)
        from dataclasses import replace

        fit(plain, box_bundle.scene, replace(cfg, mode="rec"))
        assert grid.checksum() == plain.checksum()

    def test_rejects_missing_bounds(self, box_bundle):
        with pytest.raises(InpaintError):
            inpaint_scene(box_bundle.scene, MaskSet(list(box_bundle.gt_masks)), InpaintOptions())

    def test_stage_directory_layout(self, box_bundle, tmp_path):
        intr = box_bundle.scene.intrinsics
        lo, hi = default_bounds(box_bundle.spec, box_bundle.scene.poses, intr)
        opts = InpaintOptions(
            bounds=BoundingBox(lo, hi),
            grid_resolution=(16, 16, 16),
            fit=FitConfig(mode="inpaint", iterations=30, coarse_stages=(), rays_per_batch=256, n_samples=16,
                          patches=PatchSpec(downscale_factor=4)),
            original_fit=FitConfig(mode="rec", iterations=30, coarse_stages=(), rays_per_batch=256, n_samples=16),
            refine=True,
            stage_dir=tmp_path / "stages",
        )
        grid, report = inpaint_scene(box_bundle.scene, MaskSet(list(box_bundle.gt_masks)), opts)
        root = tmp_path / "stages"
        assert (root / "dilated_masks" / "000.png").exists()
        assert (root / "refined" / "stats.json").exists()
        assert (root / "priors_rgb" / "000.png").exists()
        assert (root / "priors_depth" / "000.pfm").exists()
        assert (root / "inpainted_grid.spgr").exists()
        assert (root / "report.json").exists()
        assert report["masked_pixels"] >= 0


class TestEvaluateInpainting:
    def test_bbox_expansion_100_to_120(self):
        mask = np.zeros((400, 400), bool)
        mask[150:250, 150:250] = True  # 100x100 inclusive bbox: (150,150)-(249,249)
        from mvinpaint.optim import mask_bbox

        x0, y0, x1, y1 = expand_bbox(mask_bbox(mask), mask.shape)
        assert (x1 - x0 + 1) == 120 and (y1 - y0 + 1) == 120

    def test_identity_render_scores_zero(self, box_bundle, fitted_box_grid):
        intr = box_bundle.scene.intrinsics
        pose = box_bundle.test_poses[0]
        rendered, _, _, _ = render_view(fitted_box_grid, intr, pose, RenderOptions(n_samples=96, mode="midpoint"))
        result = evaluate_inpainting(
            fitted_box_grid, intr, [rendered], [pose], [box_bundle.test_masks[0]], n_samples=96
        )
        assert result["mean_mse"] == pytest.approx(0.0, abs=1e-12)
        assert result["mean_perceptual"] == pytest.approx(0.0, abs=1e-12)

    def test_blending_toward_truth_decreases_metrics(self, box_bundle, fitted_box_grid):
        intr = box_bundle.scene.intrinsics
        pose = box_bundle.test_poses[0]
        mask = box_bundle.test_masks[0]
        rendered, _, _, _ = render_view(fitted_box_grid, intr, pose, RenderOptions(n_samples=96, mode="midpoint"))
        wins_mse = wins_lpips = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            other = np.clip(rendered + 0.3 * rng.standard_normal(rendered.shape), 0, 1)
            halfway = 0.5 * other + 0.5 * rendered
            far = evaluate_inpainting(fitted_box_grid, intr, [other], [pose], [mask], n_samples=96)
            near = evaluate_inpainting(fitted_box_grid, intr, [halfway], [pose], [mask], n_samples=96)
            wins_mse += near["mean_mse"] < far["mean_mse"]
            wins_lpips += near["mean_perceptual"] < far["mean_perceptual"]
        assert wins_mse == 20 and wins_lpips == 20

    def test_degenerate_bbox_skipped(self, box_bundle, fitted_box_grid):
        intr = box_bundle.scene.intrinsics
        result = evaluate_inpainting(
            fitted_box_grid,
            intr,
            [box_bundle.test_clean_images[0]],
            [box_bundle.test_poses[0]],
            [np.zeros((64, 64), bool)],
            n_samples=48,
        )
        assert result["skipped"] == 1 and result["mean_mse"] is None
