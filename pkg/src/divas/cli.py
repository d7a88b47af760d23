"""Command line interface.

Subcommands: render, segment, fuse, session-replay, ablate, export-grid,
plan, scenes, serve.  Exit code 0 on success, 2 on any reported error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .ablation import ABLATIONS, run_ablation, write_csv
from .fusion import FusionParams, OccupancyGrid, fuse
from .io import write_fmap, write_vgrid
from .render import RenderConfig, render_view
from .scene import bake_density_grid, ground_truth_voxels
from .scenes import build_plan, get_profile, scene_names
from .segmenter import segment_from_prompt, refine_mask
from .session import load_plan, replay_plan, save_plan


def _profile(args):
    return get_profile(args.scene)


def _render_cfg(profile, args):
    cfg = profile.render
    if getattr(args, "tau_cw", None) is not None:
        cfg = RenderConfig(samples_per_ray=cfg.samples_per_ray, near=cfg.near,
                           far=cfg.far, tau_cw=args.tau_cw,
                           min_weight=cfg.min_weight)
    return cfg


def _save_png(path, rgb):
    from PIL import Image
    arr = np.clip(np.asarray(rgb) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def cmd_scenes(_args):
    for name in scene_names():
        print(name)
    return 0


def cmd_render(args):
    profile = _profile(args)
    cfg = _render_cfg(profile, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cams = profile.rig_cameras(args.n_views)
    if args.views == "heldout":
        cams = profile.held_out_cameras()
    for i, cam in enumerate(cams):
        vg = render_view(profile.scene, cam, cfg)
        stem = out / f"view_{i:02d}"
        _save_png(f"{stem}_rgb.png", vg.rgb)
        write_fmap(f"{stem}_dmin.fmap", vg.d_min)
        write_fmap(f"{stem}_dmax.fmap", vg.d_max)
        write_fmap(f"{stem}_dexp.fmap", vg.d_exp)
        write_fmap(f"{stem}_z.fmap", vg.z_surface)
        write_fmap(f"{stem}_nsamples.fmap", vg.n_samples.astype(np.float32))
    print(f"rendered {len(cams)} views into {out}")
    return 0


def cmd_segment(args):
    profile = _profile(args)
    cams = profile.rig_cameras(args.n_views)
    if not 0 <= args.view < len(cams):
        raise ValueError(f"view index {args.view} outside the {len(cams)}-view rig")
    vg = render_view(profile.scene, cams[args.view], _render_cfg(profile, args))
    mask = segment_from_prompt(vg, (args.px, args.py), profile.segmenter)
    if args.refined:
        mask = refine_mask(mask, vg)
    write_fmap(args.out, mask.values)
    print(f"wrote mask ({mask.values.mean():.3f} mean confidence) to {args.out}")
    return 0


def cmd_fuse(args):
    profile = _profile(args)
    plan = load_plan(args.plan)
    params = FusionParams.load(args.params) if args.params else profile.fusion
    from .ablation import pipeline_artifacts
    arts = pipeline_artifacts(profile, plan, args.grid_res, tau_cw=args.tau_cw)
    t0 = time.perf_counter()
    og = fuse(arts.grid, arts.density, arts.views_refined, params,
              bounds=profile.scene.bounds, workers=args.workers,
              trace_path=args.trace)
    dt = (time.perf_counter() - t0) * 1e3
    write_vgrid(args.out, og, unbounded=profile.scene.bounds.unbounded)
    print(f"fused {len(arts.views_refined)} views into {args.out} "
          f"({og.grid.resolution}^3, {dt:.0f} ms)")
    return 0


def cmd_session_replay(args):
    profile = _profile(args)
    plan = load_plan(args.plan)
    params = FusionParams.load(args.params) if args.params else None
    session = replay_plan(profile, plan, grid_resolution=args.grid_res,
                          params=params, workers=args.workers)
    write_vgrid(args.out, session.occupancy,
                unbounded=profile.scene.bounds.unbounded)
    if args.events:
        with open(args.events, "w") as f:
            for ev in session.events:
                f.write(json.dumps({"seq": ev.seq, "kind": ev.kind,
                                    "payload": ev.payload}) + "\n")
    print(f"replayed {len(session.masks)} masks, grid version "
          f"{session.version}, wrote {args.out}")
    return 0


def cmd_ablate(args):
    profile = _profile(args)
    plan = load_plan(args.plan)
    rows = run_ablation(profile, plan, args.ablation,
                        grid_resolution=args.grid_res, workers=args.workers)
    write_csv(args.out, rows)
    for r in rows:
        print(f"{r.arm:>14}  tau_cw={r.tau_cw:<5} iou3d={r.iou3d:.4f} "
              f"iou2d={r.iou2d_mean:.4f} acc2d={r.acc2d_mean:.4f} "
              f"{r.runtime_ms:.0f} ms")
    print(f"wrote {args.out}")
    return 0


def cmd_export_grid(args):
    profile = _profile(args)
    grid = profile.make_grid(args.grid_res)
    ids = ([int(x) for x in args.object_ids.split(",")] if args.object_ids
           else sorted(profile.target_ids))
    gt = ground_truth_voxels(profile.scene, grid, ids)
    og = OccupancyGrid(grid, gt.astype(np.float64))
    write_vgrid(args.out, og, unbounded=profile.scene.bounds.unbounded)
    print(f"wrote ground-truth grid ({int(gt.sum())} voxels) to {args.out}")
    return 0


def cmd_plan(args):
    profile = _profile(args)
    manual = ([int(x) for x in args.manual_indices.split(",")]
              if args.manual_indices else None)
    plan = build_plan(profile, mode=args.mode, n=args.n_views, k_top=args.k_top,
                      prompts_per_anchor=args.prompts, zoom=args.zoom,
                      manual_indices=manual)
    save_plan(args.out, plan)
    print(f"wrote plan ({len(plan['anchors'])} anchors) to {args.out}")
    return 0


def cmd_serve(args):
    import uvicorn
    from .service import create_app
    addr = args.addr or os.environ.get("DIVAS_ADDR", "127.0.0.1:8076")
    host, _, port = addr.rpartition(":")
    app = create_app(ui_dir=args.ui_dir)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="divas",
                                description="interactive multi-view 3D segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, plan=False, grid=False, workers=False, tau=False):
        sp.add_argument("--scene", required=True, help="bundled scene name")
        if plan:
            sp.add_argument("--plan", required=True, help="scripted session JSON")
        if grid:
            sp.add_argument("--grid-res", type=int, default=None)
        if workers:
            sp.add_argument("--workers", type=int, default=None)
        if tau:
            sp.add_argument("--tau-cw", type=float, default=None)

    sp = sub.add_parser("scenes", help="list bundled scenes")
    sp.set_defaults(fn=cmd_scenes)

    sp = sub.add_parser("render", help="render rig views to PNG + fmap")
    common(sp, tau=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--views", choices=("rig", "heldout"), default="rig")
    sp.add_argument("--n-views", type=int, default=None)
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("segment", help="segment one prompt on one rig view")
    common(sp, tau=True)
    sp.add_argument("--view", type=int, required=True)
    sp.add_argument("--px", type=int, required=True)
    sp.add_argument("--py", type=int, required=True)
    sp.add_argument("--n-views", type=int, default=None)
    sp.add_argument("--refined", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_segment)

    sp = sub.add_parser("fuse", help="batch pipeline: plan -> occupancy grid")
    common(sp, plan=True, grid=True, workers=True, tau=True)
    sp.add_argument("--params", default=None, help="FusionParams JSON")
    sp.add_argument("--trace", default=None, help="JSON-lines decision trace")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_fuse)

    sp = sub.add_parser("session-replay",
                        help="replay a scripted interactive session")
    common(sp, plan=True, grid=True, workers=True)
    sp.add_argument("--params", default=None)
    sp.add_argument("--events", default=None, help="write the event log here")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_session_replay)

    sp = sub.add_parser("ablate", help="run an ablation, write CSV")
    common(sp, plan=True, grid=True, workers=True)
    sp.add_argument("--ablation", required=True, choices=ABLATIONS)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("export-grid", help="write ground-truth voxels as vgrid")
    common(sp, grid=True)
    sp.add_argument("--object-ids", default=None, help="comma separated ids")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_export_grid)

    sp = sub.add_parser("plan", help="build a scripted session plan")
    common(sp)
    sp.add_argument("--mode", choices=("fibonacci", "manual"), default="fibonacci")
    sp.add_argument("--n-views", type=int, default=None)
    sp.add_argument("--k-top", type=int, default=None)
    sp.add_argument("--prompts", type=int, default=2)
    sp.add_argument("--zoom", type=float, default=None)
    sp.add_argument("--manual-indices", default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_plan)

    sp = sub.add_parser("serve", help="run the HTTP service")
    sp.add_argument("--addr", default=None, help="host:port (or env DIVAS_ADDR)")
    sp.add_argument("--ui-dir", default=None, help="static UI bundle directory")
    sp.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
