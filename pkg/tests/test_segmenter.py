import threading
import time

import numpy as np
import pytest

from divas.geometry import Camera, SceneBounds
from divas.metrics import iou
from divas.render import RenderConfig, render_view
from divas.scene import SceneModel, ScenePrimitive
from divas.segmenter import (ConfidenceMask, MaskQueue, SegmenterConfig,
                             refine_mask, segment_from_prompt)

BOUNDS = SceneBounds((-8, -8, -8), (8, 8, 8))
INTR = dict(fx=120.0, fy=120.0, cx=48.0, cy=48.0, width=96, height=96)
CFG = RenderConfig(samples_per_ray=256, near=0.5, far=8.0)


def cam():
    return Camera(world_from_camera=np.eye(4), **INTR)


def wall_view():
    wall = ScenePrimitive("box", {"center": (0, 0, -3.0),
                                  "half_extents": (6, 6, 0.5)},
                          density=400.0, color=(0.2, 0.4, 0.9), object_id=1)
    return render_view(SceneModel((wall,), BOUNDS), cam(), CFG)


def sphere_on_wall_view(sphere_sigma=400.0):
    sphere = ScenePrimitive("sphere", {"center": (0, 0, -2.0), "radius": 0.7},
                            density=sphere_sigma, color=(0.9, 0.2, 0.1),
                            object_id=1)
    wall = ScenePrimitive("box", {"center": (0, 0, -5.0),
                                  "half_extents": (7, 7, 0.5)},
                          density=400.0, color=(0.2, 0.4, 0.9), object_id=2)
    scene = SceneModel((sphere, wall), BOUNDS)
    return scene, render_view(scene, cam(), CFG)


class TestSegmentFromPrompt:
    def test_uniform_wall_fills_frame(self):
        mask = segment_from_prompt(wall_view(), (48, 48), SegmenterConfig())
        assert mask.values.mean() > 0.99

    def test_sphere_silhouette_iou(self):
        scene, vg = sphere_on_wall_view()
        from divas.scenes import silhouette_mask
        sil = silhouette_mask(scene, vg, {1})
        mask = segment_from_prompt(vg, (48, 48), SegmenterConfig())
        assert iou(mask.values >= 0.5, sil) >= 0.95

    def test_depth_separation_of_lookalikes(self):
        # two same-color spheres overlapping in image space at different
        # depths; only the prompted one may be segmented
        near = ScenePrimitive("sphere", {"center": (-0.25, 0, -2.0), "radius": 0.5},
                              density=400.0, color=(0.8, 0.3, 0.2), object_id=1)
        far = ScenePrimitive("sphere", {"center": (0.7, 0, -4.5), "radius": 1.1},
                             density=400.0, color=(0.8, 0.3, 0.2), object_id=2)
        scene = SceneModel((near, far), BOUNDS)
        vg = render_view(scene, cam(), CFG)
        from divas.scenes import silhouette_mask
        mask = segment_from_prompt(vg, (33, 48), SegmenterConfig())
        sil_far = silhouette_mask(scene, vg, {2})
        core = mask.values >= 1.0
        assert core[48, 33]
        assert not (core & sil_far).any()

    def test_invalid_prompt_rejected(self):
        scene = SceneModel((), BOUNDS)
        vg = render_view(scene, cam(), CFG)
        with pytest.raises(ValueError):
            segment_from_prompt(vg, (10, 10), SegmenterConfig())
        with pytest.raises(ValueError):
            segment_from_prompt(wall_view(), (-1, 5), SegmenterConfig())

    def test_deterministic(self):
        _scene, vg = sphere_on_wall_view()
        a = segment_from_prompt(vg, (48, 48), SegmenterConfig())
        b = segment_from_prompt(vg, (48, 48), SegmenterConfig())
        assert np.array_equal(a.values, b.values)

    def test_imperfect_mode_adds_noise_deterministically(self):
        _scene, vg = sphere_on_wall_view()
        cfg = SegmenterConfig(dilate_px=2, salt_prob=0.01, salt_seed=9)
        clean = segment_from_prompt(vg, (48, 48), SegmenterConfig())
        a = segment_from_prompt(vg, (48, 48), cfg)
        b = segment_from_prompt(vg, (48, 48), cfg)
        assert np.array_equal(a.values, b.values)
        assert (a.values >= 0.9).sum() > (clean.values >= 0.9).sum()


class TestRefineMask:
    def test_depth_extremes(self):
        _scene, vg = sphere_on_wall_view()
        z = vg.z_surface
        valid = vg.valid
        m = ConfidenceMask(np.full(z.shape, 0.8, dtype=np.float32))
        out = refine_mask(m, vg)
        near_px = np.unravel_index(np.argmin(np.where(valid, z, np.inf)), z.shape)
        far_px = np.unravel_index(np.argmax(np.where(valid, z, -np.inf)), z.shape)
        assert out.values[near_px] == pytest.approx(0.8, abs=1e-6)
        assert out.values[far_px] == pytest.approx(0.0, abs=1e-6)

    def test_constant_depth_is_noop(self):
        vg = wall_view()
        # carve a perfectly flat synthetic depth map
        vg.z_surface = np.full_like(vg.z_surface, 2.5)
        m = ConfidenceMask(np.random.default_rng(0).random(vg.z_surface.shape)
                           .astype(np.float32))
        out = refine_mask(m, vg)
        v = vg.valid
        assert np.allclose(out.values[v], m.values[v], atol=1e-7)

    def test_invalid_pixels_zeroed(self):
        _scene, vg = sphere_on_wall_view()
        vg.n_samples = vg.n_samples.copy()
        vg.n_samples[:10, :10] = 0
        m = ConfidenceMask(np.ones(vg.z_surface.shape, dtype=np.float32))
        out = refine_mask(m, vg)
        assert not out.values[:10, :10].any()

    def test_never_increases_confidence(self):
        _scene, vg = sphere_on_wall_view()
        vals = np.random.default_rng(1).random(vg.z_surface.shape).astype(np.float32)
        out = refine_mask(ConfidenceMask(vals), vg)
        assert np.all(out.values <= vals + 1e-7)

    def test_double_refine_rejected(self):
        _scene, vg = sphere_on_wall_view()
        m = refine_mask(ConfidenceMask(np.ones(vg.z_surface.shape,
                                               dtype=np.float32)), vg)
        with pytest.raises(ValueError):
            refine_mask(m, vg)

    def test_mask_values_stay_in_range(self):
        m = ConfidenceMask(np.zeros((4, 4)))
        assert m.values.min() >= 0
        with pytest.raises(ValueError):
            ConfidenceMask(np.full((4, 4), 1.5))


class TestMaskQueue:
    def _view(self):
        return wall_view()

    def test_three_completions_trigger_barrier(self):
        q = MaskQueue(workers=2)
        vg = self._view()
        for i in range(3):
            q.submit(f"m{i}", vg, (48, 48), SegmenterConfig())
        assert q.wait_barrier_required(timeout=30.0)
        results = q.barrier()
        assert len(results) == 3
        assert q.completed_count() == 0  # cache flushed
        q.shutdown()

    def test_last_in_group_triggers_immediately(self):
        q = MaskQueue(workers=2)
        q.submit("only", self._view(), (48, 48), SegmenterConfig(),
                 last_in_group=True)
        assert q.barrier_required()
        results = q.barrier()
        assert set(results) == {"only"}
        assert not q.barrier_required()
        q.shutdown()

    def test_empty_barrier_returns_immediately(self):
        q = MaskQueue(workers=2)
        assert q.barrier() == {}
        q.shutdown()

    def test_two_masks_no_barrier_required(self):
        q = MaskQueue(workers=2)
        vg = self._view()
        q.submit("a", vg, (48, 48), SegmenterConfig())
        q.submit("b", vg, (40, 40), SegmenterConfig())
        with q._done_cv:
            q._done_cv.wait_for(lambda: len(q._done) == 2, timeout=30)
        assert not q.barrier_required()
        q.shutdown()

    def test_exactly_one_result_per_request_under_interleaving(self):
        rng = np.random.default_rng(3)
        vg = self._view()
        seen = []
        q = MaskQueue(workers=3, on_complete=lambda rid, m: seen.append(rid))
        ids = [f"r{i}" for i in range(9)]
        collected = {}
        for i, rid in enumerate(ids):
            q.submit(rid, vg, (int(rng.integers(20, 70)), 48), SegmenterConfig())
            time.sleep(float(rng.uniform(0, 0.01)))
            if i in (3, 6):
                collected.update(q.barrier())
        collected.update(q.barrier())
        assert sorted(collected) == sorted(ids)
        assert sorted(seen) == sorted(ids)
        q.shutdown()

    def test_result_independent_of_submission_order(self):
        vg = self._view()
        prompts = [(30, 48), (48, 48), (60, 40)]
        out = {}
        for order in (range(3), reversed(range(3))):
            q = MaskQueue(workers=2)
            for i in order:
                q.submit(f"p{i}", vg, prompts[i], SegmenterConfig())
            res = q.barrier()
            q.shutdown()
            for k, v in res.items():
                if k in out:
                    assert np.array_equal(out[k].values, v.values)
                out[k] = v

    def test_shutdown_reports_cancelled(self):
        q = MaskQueue(workers=1)
        vg = self._view()
        for i in range(6):
            q.submit(f"s{i}", vg, (48, 48), SegmenterConfig())
        cancelled = q.shutdown()
        assert isinstance(cancelled, list)
        with pytest.raises(RuntimeError):
            q.submit("late", vg, (48, 48), SegmenterConfig())

    def test_duplicate_ids_rejected(self):
        q = MaskQueue(workers=1)
        q.submit("x", self._view(), (48, 48), SegmenterConfig())
        with pytest.raises(ValueError):
            q.submit("x", self._view(), (48, 48), SegmenterConfig())
        q.barrier()
        q.shutdown()
