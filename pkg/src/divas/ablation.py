"""Batch evaluation and the ablation procedures.

Every ablation shares upstream artifacts across its arms: the arms differ
only at the ablated stage, and the shared artifacts are content-hashed so
a run can prove the comparison was like for like.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .fusion import FusionParams, fuse, project_grid_overlay
from .metrics import iou, pixel_accuracy
from .render import RenderConfig, render_view
from .scene import bake_density_grid, ground_truth_voxels
from .scenes import SceneProfile, build_plan, silhouette_mask
from .segmenter import refine_mask, segment_from_prompt
from .session import replay_plan

__all__ = ["ABLATIONS", "AblationRow", "run_ablation", "write_csv",
           "pipeline_artifacts", "evaluate_grid", "TAU_CW_SWEEP"]

ABLATIONS = ("thin-off", "depth-weight-off", "tau_cw-sweep", "fibonacci-vs-manual")
TAU_CW_SWEEP = (0.3, 0.45, 0.6, 0.75, 0.9, 0.95)
CSV_FIELDS = ("scene", "ablation", "arm", "tau_cw", "iou3d", "iou2d_mean",
              "acc2d_mean", "runtime_ms")


@dataclass
class AblationRow:
    scene: str
    ablation: str
    arm: str
    tau_cw: float
    iou3d: float
    iou2d_mean: float
    acc2d_mean: float
    runtime_ms: float
    artifact_hash: str = ""

    def as_record(self):
        return {k: getattr(self, k) for k in CSV_FIELDS}


@dataclass
class PipelineArtifacts:
    """Everything downstream of prompting, reusable across ablation arms."""

    views_raw: list                 # (ViewGeometry, unrefined ConfidenceMask)
    views_refined: list             # (ViewGeometry, refined ConfidenceMask)
    grid: object
    density: object
    gt: np.ndarray
    held_out: list = field(default_factory=list)

    def mask_hash(self) -> str:
        h = hashlib.sha256()
        for _vg, m in self.views_raw:
            h.update(m.values.tobytes())
        return h.hexdigest()[:16]


def pipeline_artifacts(profile: SceneProfile, plan: dict,
                       grid_resolution: int = None, tau_cw: float = None,
                       segmenter=None) -> PipelineArtifacts:
    """Run the pipeline up to (and including) mask refinement, batch-style.

    Renders each anchor in the plan, back-projects its prompts, renders the
    centroid views and segments them at their centers, mirroring the
    interactive workflow without the queue.
    """
    from .planner import back_project_prompt, make_centroid_view

    seg_cfg = segmenter or profile.segmenter
    render_cfg = profile.render
    if tau_cw is not None:
        render_cfg = RenderConfig(
            samples_per_ray=render_cfg.samples_per_ray, near=render_cfg.near,
            far=render_cfg.far, tau_cw=tau_cw, min_weight=render_cfg.min_weight)
    cams = profile.rig_cameras(plan.get("n_views"))
    zoom = plan.get("zoom", profile.zoom_default)
    views_raw = []
    for a in plan["anchors"]:
        anchor_view = render_view(profile.scene, cams[int(a["index"])], render_cfg)
        for p in a["prompts"]:
            target = back_project_prompt(anchor_view, tuple(p))
            cam = make_centroid_view(anchor_view.camera, target, zoom)
            cview = render_view(profile.scene, cam, render_cfg)
            mask = segment_from_prompt(cview, (cam.width // 2, cam.height // 2),
                                       seg_cfg)
            views_raw.append((cview, mask))
    views_refined = [(vg, refine_mask(m, vg)) for vg, m in views_raw]
    grid = profile.make_grid(grid_resolution)
    density = bake_density_grid(profile.scene, grid)
    gt = ground_truth_voxels(profile.scene, grid, profile.target_ids)
    held_out = [render_view(profile.scene, c, render_cfg)
                for c in profile.held_out_cameras()]
    return PipelineArtifacts(views_raw, views_refined, grid, density, gt, held_out)


def evaluate_grid(profile: SceneProfile, arts: PipelineArtifacts, ogrid,
                  threshold: float = 0.5):
    """(iou3d, mean 2D iou, mean 2D accuracy) against analytic ground truth."""
    pred = ogrid.probs >= threshold
    iou3d = iou(pred, arts.gt)
    ious, accs = [], []
    for hv in arts.held_out:
        overlay = project_grid_overlay(ogrid, hv, threshold,
                                       bounds=profile.scene.bounds)
        sil = silhouette_mask(profile.scene, hv, profile.target_ids)
        ious.append(iou(overlay, sil))
        accs.append(pixel_accuracy(overlay, sil))
    return iou3d, float(np.mean(ious)), float(np.mean(accs))


def _fuse_timed(profile, arts, views, params, workers):
    t0 = time.perf_counter()
    og = fuse(arts.grid, arts.density, views, params,
              bounds=profile.scene.bounds, workers=workers)
    return og, (time.perf_counter() - t0) * 1e3


def run_ablation(profile: SceneProfile, plan: dict, ablation: str,
                 grid_resolution: int = None, workers: int = None) -> list:
    """Run one ablation; returns a list of AblationRow."""
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; "
                         f"available: {', '.join(ABLATIONS)}")
    params = profile.fusion
    rows = []

    if ablation == "thin-off":
        arts = pipeline_artifacts(profile, plan, grid_resolution)
        mh = arts.mask_hash()
        for arm, p in (("thin-on", params),
                       ("thin-off", params.with_overrides(enable_thin=False))):
            og, ms = _fuse_timed(profile, arts, arts.views_refined, p, workers)
            i3, i2, a2 = evaluate_grid(profile, arts, og)
            rows.append(AblationRow(profile.name, ablation, arm,
                                    profile.render.tau_cw, i3, i2, a2, ms, mh))

    elif ablation == "depth-weight-off":
        arts = pipeline_artifacts(profile, plan, grid_resolution)
        mh = arts.mask_hash()
        for arm, views in (("refined", arts.views_refined),
                           ("raw", arts.views_raw)):
            og, ms = _fuse_timed(profile, arts, views, params, workers)
            i3, i2, a2 = evaluate_grid(profile, arts, og)
            rows.append(AblationRow(profile.name, ablation, arm,
                                    profile.render.tau_cw, i3, i2, a2, ms, mh))

    elif ablation == "tau_cw-sweep":
        prompt_hash = hashlib.sha256(
            repr([a["prompts"] for a in plan["anchors"]]).encode()).hexdigest()[:16]
        for tau in TAU_CW_SWEEP:
            arts = pipeline_artifacts(profile, plan, grid_resolution, tau_cw=tau)
            og, ms = _fuse_timed(profile, arts, arts.views_refined, params, workers)
            i3, i2, a2 = evaluate_grid(profile, arts, og)
            rows.append(AblationRow(profile.name, ablation, f"tau={tau}",
                                    tau, i3, i2, a2, ms, prompt_hash))

    else:  # fibonacci-vs-manual
        plans = {"fibonacci": plan}
        if plan.get("mode") == "manual":
            raise ValueError("pass the fibonacci plan; the manual arm is derived")
        manual_idx = plan.get("manual_indices")
        if not manual_idx:
            # stand-in for a competent human pick: among views that expose
            # the target well, spread the choices over viewing directions
            from .scenes import first_hit_ids
            k = len(plan["anchors"])
            cams = profile.rig_cameras(plan.get("n_views"))
            vis = []
            for cam in cams:
                ids = first_hit_ids(profile.scene, cam)
                vis.append(sum(int((ids == t).sum()) for t in profile.target_ids))
            floor = 0.25 * max(vis)
            cand = [i for i, v in enumerate(vis) if v >= floor]
            chosen = [max(cand, key=lambda i: vis[i])]
            dirs = [c.forward for c in cams]
            while len(chosen) < min(k, len(cand)):
                def spread(i):
                    return min(float(np.arccos(np.clip(dirs[i] @ dirs[j],
                                                       -1.0, 1.0)))
                               for j in chosen)
                chosen.append(max((i for i in cand if i not in chosen),
                                  key=spread))
            manual_idx = sorted(chosen)
        plans["manual"] = build_plan(
            profile, mode="manual", n=plan.get("n_views"),
            prompts_per_anchor=len(plan["anchors"][0]["prompts"]),
            zoom=plan.get("zoom"), manual_indices=manual_idx)
        for arm, pl in plans.items():
            arts = pipeline_artifacts(profile, pl, grid_resolution)
            og, ms = _fuse_timed(profile, arts, arts.views_refined, params, workers)
            i3, i2, a2 = evaluate_grid(profile, arts, og)
            rows.append(AblationRow(profile.name, ablation, arm,
                                    profile.render.tau_cw, i3, i2, a2, ms,
                                    arts.mask_hash()))
    return rows


def write_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for r in rows:
            writer.writerow(r.as_record())
