import numpy as np
import pytest

from mvinpaint.field import SH_C0, BoundingBox, RadianceGrid


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One line per acceptance criterion at the end of the session."""
    rows = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance.py" in getattr(rep, "nodeid", ""):
                name = rep.nodeid.split("::", 1)[1]
                rows.append((name, "PASS" if status == "passed" else "FAIL"))
    if rows:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, status in sorted(rows):
            terminalreporter.write_line(f"{status}  {name}")


def make_random_grid(resolution=(4, 4, 4), seed=0, lo=(-1, -1, -1), hi=(1, 1, 1)) -> RadianceGrid:
    """Small random grid for gradient checks.

    Colors are biased to mid-gray so the clamp stays open (finite differences
    would disagree with the subgradient at the clamp boundary).
    """
    rng = np.random.default_rng(seed)
    grid = RadianceGrid(resolution, BoundingBox(np.array(lo, float), np.array(hi, float)))
    grid.density_raw[...] = rng.uniform(-1.0, 1.0, grid.density_raw.shape)
    grid.sh[..., 0] = (0.5 + 0.15 * rng.uniform(-1, 1, grid.sh.shape[:4])) / SH_C0
    grid.sh[..., 1:] = 0.05 * rng.uniform(-1, 1, grid.sh[..., 1:].shape)
    grid.logit[...] = rng.uniform(-1.5, 1.5, grid.logit.shape)
    return grid


def finite_difference_grad(loss_fn, grid: RadianceGrid, channel: str, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar loss over one parameter channel."""
    params = grid.parameters()[channel]
    flat = params.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = loss_fn()
        flat[i] = keep - h
        down = loss_fn()
        flat[i] = keep
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(params.shape)


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, floor: float = 1e-8):
    """Relative error check with an absolute floor for near-zero entries."""
    denom = np.maximum(np.abs(numeric), floor)
    rel = np.abs(analytic - numeric) / denom
    mask = (np.abs(numeric) > floor) | (np.abs(analytic) > floor)
    if np.any(mask):
        assert np.max(rel[mask]) < rtol, f"max rel err {np.max(rel[mask]):.3e}"
    # entries numerically zero on both sides pass trivially


@pytest.fixture(scope="session")
def box_bundle():
    from mvinpaint.synthetic import make_box_bundle

    return make_box_bundle(n_train=16, n_test=6, width=64, height=64, seed=7)


@pytest.fixture(scope="session")
def fitted_box_grid(box_bundle):
    """Plain reconstruction fit (object present) at 32^3, shared by the
    renderer depth test, the held-out PSNR test, and projection tests."""
    from mvinpaint.field import RadianceGrid
    from mvinpaint.optim import FitConfig, fit
    from mvinpaint.synthetic import default_bounds

    intr = box_bundle.scene.intrinsics
    lo, hi = default_bounds(box_bundle.spec, box_bundle.scene.poses + box_bundle.test_poses, intr)
    grid = RadianceGrid((32, 32, 32), BoundingBox(lo, hi))
    cfg = FitConfig(mode="rec", iterations=300, rays_per_batch=2048, n_samples=48, seed=11)
    fit(grid, box_bundle.scene, cfg)
    return grid


def corrupt_boundary(mask, frac, rng):
    """Flip `frac` of the pixels in a 2-px band around the mask boundary."""
    from scipy import ndimage

    band = ndimage.binary_dilation(mask, np.ones((3, 3)), 2) & ~ndimage.binary_erosion(mask, np.ones((3, 3)), 2)
    ys, xs = np.nonzero(band)
    pick = rng.choice(ys.size, size=int(frac * ys.size), replace=False)
    out = mask.copy()
    out[ys[pick], xs[pick]] = ~out[ys[pick], xs[pick]]
    return out


@pytest.fixture(scope="session")
def seg_config(box_bundle):
    from mvinpaint.optim import FitConfig
    from mvinpaint.segmentation import SegmentationConfig
    from mvinpaint.synthetic import default_bounds

    intr = box_bundle.scene.intrinsics
    lo, hi = default_bounds(box_bundle.spec, box_bundle.scene.poses + box_bundle.test_poses, intr)
    return SegmentationConfig(
        fit=FitConfig(
            mode="mv", iterations=300, coarse_stages=((4, 150), (2, 150)), rays_per_batch=2048, n_samples=48, seed=21
        ),
        grid_resolution=(32, 32, 32),
        bounds=BoundingBox(lo, hi),
    )


@pytest.fixture(scope="session")
def two_stage_result(box_bundle, seg_config):
    """Two-stage segmentation from 20% boundary-corrupted ground-truth masks,
    timed for the acceptance budget. Returns (result, init_masks, seconds)."""
    import time

    from mvinpaint.segmentation import MaskSet, segment

    rng = np.random.default_rng(5)
    init = MaskSet([corrupt_boundary(m, 0.2, rng) for m in box_bundle.gt_masks])
    t0 = time.perf_counter()
    result = segment(box_bundle.scene, stages=2, config=seg_config, init_masks=init)
    return result, init, time.perf_counter() - t0


@pytest.fixture(scope="session")
def refine_inputs():
    from mvinpaint.segmentation import dilate
    from mvinpaint.synthetic import make_refine_bundle

    bundle = make_refine_bundle()
    masks = [dilate(m, 5, 3) for m in bundle.gt_masks]
    depths = [d.copy() for d in bundle.gt_depths]
    return bundle, masks, depths


@pytest.fixture(scope="session")
def refined(refine_inputs):
    """Timed refinement run on the full-disocclusion scene."""
    import time

    from mvinpaint.refine import RefineConfig, refine_views

    bundle, masks, depths = refine_inputs
    t0 = time.perf_counter()
    out = refine_views(bundle.scene, depths, masks, RefineConfig(max_sweeps=48))
    return out, time.perf_counter() - t0
