import json
import math

import numpy as np
import pytest

from divas.fusion import (FusionParams, OccupancyGrid, depth_gradient,
                          depth_weight, fuse, project_grid_overlay,
                          thick_check, thin_check)
from divas.geometry import Camera, SceneBounds, VoxelGrid, look_at
from divas.reference import fuse_reference
from divas.render import RenderConfig, ViewGeometry, render_view
from divas.scene import (DensityGrid, SceneModel, ScenePrimitive,
                         bake_density_grid, ground_truth_voxels)
from divas.segmenter import ConfidenceMask

BOUNDS = SceneBounds((-4, -4, -4), (4, 4, 4))
INTR = dict(fx=96.0, fy=96.0, cx=32.0, cy=32.0, width=64, height=64)
CFG = RenderConfig(samples_per_ray=192, near=0.5, far=7.0)


def synth_view(shape=(8, 8), d_min=1.0, d_max=3.0, d_exp=2.0, n=20,
               cam=None) -> ViewGeometry:
    """Hand-built ViewGeometry with constant maps, for unit-level checks."""
    h, w = shape
    cam = cam or Camera(fx=10.0, fy=10.0, cx=w / 2, cy=h / 2, width=w,
                        height=h, world_from_camera=np.eye(4))
    mk = lambda v: np.full((h, w), v, dtype=np.float32)
    return ViewGeometry(cam, np.zeros((h, w, 3), dtype=np.float32),
                        mk(d_min), mk(d_max), mk(d_exp),
                        np.full((h, w), n, dtype=np.int32), mk(d_exp))


class TestDepthGradient:
    def test_flat_region_maximal(self):
        vg = synth_view()
        g = depth_gradient(vg, (4, 4))
        assert g == pytest.approx(1.0 - 1e-8)

    def test_discontinuity_small(self):
        vg = synth_view()
        vg.d_exp = vg.d_exp.copy()
        vg.d_exp[:, 5:] = 200.0
        g = depth_gradient(vg, (4, 4))
        assert g < 0.02

    def test_unit_gradient_half(self):
        # G = 1 with kappa = 1 gives g = 1 / (1 + 1) = 0.5
        vg = synth_view(d_min=1.0, d_max=3.0, d_exp=2.0)
        vg.d_exp = vg.d_exp.copy()
        rng_plus_eps = (3.0 - 1.0) + 1e-8
        vg.d_exp[4, 5] = 2.0 + rng_plus_eps
        g = depth_gradient(vg, (4, 4))
        assert g == pytest.approx(0.5, rel=1e-6)

    def test_border_neighbors_skipped(self):
        vg = synth_view()
        assert depth_gradient(vg, (0, 0)) == pytest.approx(1.0 - 1e-8)


class TestDepthWeight:
    def test_midpoint_unity(self):
        assert depth_weight(2.0, 1.0, 3.0, 4.0) == pytest.approx(1.0)

    def test_unit_offset_closed_form(self):
        # r = 1, alpha1 = 4 -> w = exp(-4)
        w = depth_weight(3.0, 1.0, 3.0, 4.0)
        assert w == pytest.approx(math.exp(-4.0), rel=1e-12)
        assert w == pytest.approx(0.01832, abs=1e-5)

    def test_degenerate_range_no_division_by_zero(self):
        w = depth_weight(2.0, 2.0, 2.0, 4.0, eps=1e-8)
        assert w == 1.0
        w2 = depth_weight(2.0 + 1e-9, 2.0, 2.0, 4.0, eps=1e-8)
        assert 0.0 < w2 <= 1.0

    def test_invalid_range(self):
        with pytest.raises(ValueError):
            depth_weight(1.0, 3.0, 2.0, 4.0)


def small_instance(sigma=3.0, g=12):
    sphere = ScenePrimitive("sphere", {"center": (0, 0, -3.0), "radius": 0.8},
                            density=sigma, color=(0.8, 0.2, 0.2), object_id=1)
    scene = SceneModel((sphere,), BOUNDS)
    cams = [Camera(world_from_camera=np.eye(4), **INTR),
            Camera(world_from_camera=look_at((3.0, 0.3, -3.0), (0, 0, -3.0)), **INTR)]
    views = []
    for c in cams:
        vg = render_view(scene, c, CFG)
        mask = ConfidenceMask(np.where(vg.valid, 0.9, 0.0).astype(np.float32),
                              refined=True)
        views.append((vg, mask))
    grid = VoxelGrid(g, 1.2, origin=(-1.2, -1.2, -3.0 - 1.2))
    dens = bake_density_grid(scene, grid)
    return scene, grid, dens, views


class TestThickCheck:
    def test_surface_voxel_passes(self):
        scene, grid, dens, views = small_instance(sigma=300.0, g=16)
        vg, mask = views[0]
        params = FusionParams()
        # voxel on the sphere's front surface along the optical axis
        center = np.array([0.0, 0.0, -2.2 - grid.voxel_size() / 2])
        ok, dec = thick_check(center, grid.voxel_size(), 300.0, vg, mask, params)
        assert ok and dec.stage == "passed"
        assert dec.w_depth > 0.0

    def test_far_displacement_fails_depth(self):
        scene, grid, dens, views = small_instance(sigma=300.0, g=16)
        vg, mask = views[0]
        params = FusionParams()
        tau = (params.base_tolerance_multiplier + params.max_bonus) * grid.voxel_size()
        center = np.array([0.0, 0.0, -2.2 - 10 * tau])
        ok, dec = thick_check(center, grid.voxel_size(), 300.0, vg, mask, params)
        assert not ok
        assert abs(dec.x_d - vg.d_exp[32, 32]) > dec.tau_depth

    def test_mask_gate(self):
        scene, grid, dens, views = small_instance(sigma=300.0, g=16)
        vg, _ = views[0]
        low = ConfidenceMask(np.full(vg.d_exp.shape, 0.4, dtype=np.float32),
                             refined=True)
        ok, dec = thick_check((0, 0, -2.25), grid.voxel_size(), 300.0, vg, low,
                              FusionParams())
        assert not ok and dec.stage == "mask-gate"

    def test_density_gate(self):
        scene, grid, dens, views = small_instance(sigma=300.0, g=16)
        vg, mask = views[0]
        ok, dec = thick_check((0, 0, -2.25), grid.voxel_size(), 0.1, vg, mask,
                              FusionParams())
        assert not ok and dec.stage == "density-gate"

    def test_bonus_saturates_at_max(self):
        scene, grid, dens, views = small_instance(sigma=2.0, g=16)
        vg, mask = views[0]
        params = FusionParams(per_sample_bonus=100.0, max_bonus=3.0)
        ok, dec = thick_check((0, 0, -3.0), grid.voxel_size(), 2.0, vg, mask, params)
        want = (params.base_tolerance_multiplier + 3.0) * grid.voxel_size()
        assert dec.tau_depth == pytest.approx(want)


class TestThinCheck:
    def _setup(self):
        rod = ScenePrimitive("capsule",
                             {"p0": (0, -1, -3.0), "p1": (0, 1, -3.0),
                              "radius": 0.02},
                            density=8.0, color=(0.9, 0.3, 0.1), object_id=1)
        scene = SceneModel((rod,), BOUNDS)
        cam = Camera(world_from_camera=np.eye(4), **INTR)
        vg = render_view(scene, cam, CFG)
        return scene, vg

    def test_rod_voxel_scores_m_max(self):
        scene, vg = self._setup()
        mask = ConfidenceMask(np.where(vg.valid, 0.95, 0.0).astype(np.float32),
                              refined=True)
        params = FusionParams()
        dec = thin_check((0, 0, -3.0), 0.04, 8.0, vg, mask, params)
        assert dec.candidate
        assert dec.n_pixels >= 1
        if dec.p_covered >= params.thin_percent_cover:
            assert dec.t == pytest.approx(dec.m_max)
        else:
            assert dec.t == pytest.approx(dec.p_covered)

    def test_no_support_zero_score(self):
        scene, vg = self._setup()
        mask = ConfidenceMask(np.full(vg.d_exp.shape, 0.2, dtype=np.float32),
                              refined=True)
        dec = thin_check((0, 0, -3.0), 0.04, 8.0, vg, mask, FusionParams())
        if dec.candidate:
            assert dec.support_count == 0
            assert dec.t == pytest.approx(0.0)

    def test_density_floor_blocks_candidacy(self):
        scene, vg = self._setup()
        mask = ConfidenceMask(np.where(vg.valid, 0.95, 0.0).astype(np.float32),
                              refined=True)
        dec = thin_check((0, 0, -3.0), 0.04, 0.5, vg, mask, FusionParams())
        assert not dec.candidate

    def test_partial_coverage_fraction(self):
        # hand-built view: footprint of 10 pixels with 3 supportive ones
        cam = Camera(fx=40.0, fy=8.0, cx=5.0, cy=4.0, width=10, height=8,
                     world_from_camera=np.eye(4))
        vg = synth_view(shape=(8, 10), d_min=1.9, d_max=2.1, d_exp=2.0, n=4,
                        cam=cam)
        mask_vals = np.zeros((8, 10), dtype=np.float32)
        vg.d_exp = vg.d_exp.copy()
        # voxel at depth 2 projects to a wide flat footprint; make exactly
        # 3 of the footprint pixels supportive, rest fail mask or depth
        params = FusionParams(thin_percent_cover=0.5)
        dec = thin_check((0.0, 0.0, -2.0), 1.0, 5.0, vg,
                         ConfidenceMask(mask_vals, refined=True), params)
        assert not dec.candidate or dec.support_count == 0


class TestFuse:
    def test_single_view_probability_is_vote(self):
        scene, grid, dens, views = small_instance(sigma=300.0, g=12)
        og = fuse(grid, dens, views[:1], FusionParams(), bounds=scene.bounds)
        og.check()
        inside = og.probs[og.probs > 0]
        assert inside.size > 0
        assert np.allclose(inside, 0.9, atol=1e-6)

    def test_two_masks_average(self):
        # same view geometry twice with masks 1.0 and 0.5: every thick pair
        # passes in both or neither, so positives average to 0.75
        scene, grid, dens, views = small_instance(sigma=300.0, g=12)
        (vg, m) = views[0]
        hi = ConfidenceMask(np.where(vg.valid, 1.0, 0.0).astype(np.float32),
                            refined=True)
        lo = ConfidenceMask(np.where(vg.valid, 0.5, 0.0).astype(np.float32),
                            refined=True)
        og = fuse(grid, dens, [(vg, hi), (vg, lo)],
                  FusionParams(enable_thin=False), bounds=scene.bounds)
        vals = og.probs[og.probs > 0]
        assert vals.size > 0
        assert np.allclose(vals, 0.75, atol=1e-6)

    def test_empty_views_all_zero(self):
        scene, grid, dens, _views = small_instance()
        og = fuse(grid, dens, [], FusionParams(), bounds=scene.bounds)
        assert not og.probs.any()

    def test_dimension_mismatch_rejected(self):
        scene, grid, dens, views = small_instance()
        other = VoxelGrid(grid.resolution + 2, grid.half_extent, grid.origin)
        with pytest.raises(ValueError):
            fuse(other, dens, views, FusionParams(), bounds=scene.bounds)

    def test_probability_range_and_empty_frustum(self):
        scene, grid, dens, views = small_instance()
        og = fuse(grid, dens, views, FusionParams(), bounds=scene.bounds)
        og.check()
        # voxels behind every camera stay zero
        far_grid = VoxelGrid(8, 0.5, origin=(-0.5, -0.5, 3.0))
        far_dens = bake_density_grid(scene, far_grid)
        og2 = fuse(far_grid, far_dens, views, FusionParams(), bounds=scene.bounds)
        assert not og2.probs.any()

    def test_view_permutation_bit_identical(self):
        scene, grid, dens, views = small_instance(sigma=2.5, g=14)
        og1 = fuse(grid, dens, views, FusionParams(), bounds=scene.bounds)
        og2 = fuse(grid, dens, views[::-1], FusionParams(), bounds=scene.bounds)
        assert np.array_equal(og1.probs, og2.probs)

    def test_worker_count_bit_identical(self):
        scene, grid, dens, views = small_instance(sigma=2.5, g=14)
        p = FusionParams()
        outs = [fuse(grid, dens, views, p, bounds=scene.bounds, workers=w).probs
                for w in (1, 2)]
        assert np.array_equal(outs[0], outs[1])

    def test_thin_gate_monotone(self):
        scene, grid, dens, views = small_instance(sigma=3.0, g=14)
        base = FusionParams()
        probs = []
        for rho_thin in (0.2, 0.6, 0.9):
            p = base.with_overrides(thin_accept=rho_thin)
            probs.append(fuse(grid, dens, views, p, bounds=scene.bounds).probs)
        assert np.all(probs[1] <= probs[0] + 1e-12)
        assert np.all(probs[2] <= probs[1] + 1e-12)

    def test_traced_matches_kernel(self, tmp_path):
        scene, grid, dens, views = small_instance(sigma=2.5, g=8)
        p = FusionParams()
        og = fuse(grid, dens, views, p, bounds=scene.bounds)
        trace = tmp_path / "trace.jsonl"
        ogt = fuse(grid, dens, views, p, bounds=scene.bounds, trace_path=trace)
        assert np.allclose(og.probs, ogt.probs, atol=1e-12)
        lines = [json.loads(l) for l in trace.read_text().splitlines()]
        assert lines
        assert {"thick"} <= {l["path"] for l in lines}

    def test_single_view_alpha_invariance(self):
        # normalization cancels alpha1 exactly when one view contributes
        scene, grid, dens, views = small_instance(sigma=300.0, g=12)
        outs = [fuse(grid, dens, views[:1],
                     FusionParams(depth_falloff=a), bounds=scene.bounds).probs
                for a in (1.0, 4.0, 16.0)]
        assert np.allclose(outs[0], outs[1], atol=1e-9)
        assert np.allclose(outs[1], outs[2], atol=1e-9)


class TestFuseReference:
    def test_matches_fuse_on_rendered_instance(self):
        scene, grid, dens, views = small_instance(sigma=2.5, g=14)
        p = FusionParams()
        a = fuse(grid, dens, views, p, bounds=scene.bounds)
        b = fuse_reference(grid, dens, views, p, bounds=scene.bounds)
        assert np.abs(a.probs - b.probs).max() < 1e-6

    def test_empty_mask_set(self):
        scene, grid, dens, _views = small_instance()
        og = fuse_reference(grid, dens, [], FusionParams(), bounds=scene.bounds)
        assert not og.probs.any()

    def test_single_voxel_grid_hand_trace(self):
        # G = 1: one voxel in front of one camera with constant maps; the
        # expected probability is the mask value (single passing view)
        cam = Camera(fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=8, height=8,
                     world_from_camera=np.eye(4))
        vg = synth_view(shape=(8, 8), d_min=1.5, d_max=2.5, d_exp=2.0, n=30,
                        cam=cam)
        mask = ConfidenceMask(np.full((8, 8), 0.7, dtype=np.float32), refined=True)
        grid = VoxelGrid(1, 0.05, origin=(-0.05, -0.05, -2.05))
        dens = DensityGrid(grid, np.full((1, 1, 1), 5.0, dtype=np.float32))
        og = fuse_reference(grid, dens, [(vg, mask)], FusionParams())
        assert og.probs[0, 0, 0] == pytest.approx(0.7, abs=1e-6)
        both = fuse(grid, dens, [(vg, mask)], FusionParams())
        assert both.probs[0, 0, 0] == pytest.approx(0.7, abs=1e-6)


class TestProjectGridOverlay:
    def test_all_zero_grid(self):
        scene, grid, dens, views = small_instance()
        og = OccupancyGrid(grid, np.zeros((grid.resolution,) * 3))
        ov = project_grid_overlay(og, views[0][0])
        assert not ov.any()

    def test_ground_truth_silhouette_iou(self):
        from divas.metrics import iou
        from divas.scenes import silhouette_mask
        sphere = ScenePrimitive("sphere", {"center": (0, 0, -3.0), "radius": 0.8},
                                density=200.0, color=(0.8, 0.2, 0.2), object_id=1)
        scene = SceneModel((sphere,), BOUNDS)
        cam = Camera(world_from_camera=np.eye(4),
                     **dict(INTR, fx=128.0, fy=128.0))
        vg = render_view(scene, cam, CFG)
        grid = VoxelGrid(128, 1.2, origin=(-1.2, -1.2, -4.2))
        gt = ground_truth_voxels(scene, grid, {1})
        og = OccupancyGrid(grid, gt.astype(np.float64))
        ov = project_grid_overlay(og, vg)
        sil = silhouette_mask(scene, vg, {1})
        assert iou(ov, sil) >= 0.9

    def test_threshold_strictness(self):
        scene, grid, dens, views = small_instance(sigma=300.0)
        og = fuse(grid, dens, views, FusionParams(), bounds=scene.bounds)
        top = og.probs.max()
        ov = project_grid_overlay(og, views[0][0], threshold=top + 1e-6)
        assert not ov.any()


class TestFusionParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            FusionParams(thin_accept=0.0)
        with pytest.raises(ValueError):
            FusionParams(mask_threshold=0.4)
        with pytest.raises(ValueError):
            FusionParams(base_tolerance_multiplier=-1.0)

    def test_json_roundtrip(self, tmp_path):
        p = FusionParams(per_sample_bonus=0.25, enable_thin=False)
        path = tmp_path / "params.json"
        p.save(path)
        assert FusionParams.load(path) == p
