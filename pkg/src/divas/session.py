"""Interactive session orchestration: anchors, prompts, async masks, fusion.

A session owns the full two-stage workflow: a planned pool of viewpoints
with ranked anchors, prompt-driven centroid view generation, asynchronous
mask inference behind a barrier-capable queue, cumulative fusion into the
occupancy grid, and overlay feedback onto upcoming views.

Fusion is a full recompute over every refined mask accumulated so far, so
the final grid depends only on the set of submitted prompts, never on
completion timing.
"""

from __future__ import annotations

import itertools
import json
import threading
from dataclasses import dataclass, field

import numpy as np

from .fusion import FusionParams, OccupancyGrid, fuse, project_grid_overlay
from .geometry import Camera
from .planner import (CentroidViewSpec, back_project_prompt, make_centroid_view,
                      rank_views)
from .render import ViewGeometry, render_view
from .scene import bake_density_grid
from .scenes import SceneProfile
from .segmenter import ConfidenceMask, MaskQueue, refine_mask

__all__ = ["Session", "SessionEvent", "start_session", "submit_prompt",
           "maybe_fuse", "get_overlay", "replay_plan"]

EVENT_KINDS = ("prompt-accepted", "mask-ready", "fusion-complete",
               "overlay-ready", "error")


@dataclass(frozen=True)
class SessionEvent:
    kind: str
    payload: dict
    seq: int


@dataclass
class _Centroid:
    id: str
    spec: CentroidViewSpec
    view: ViewGeometry
    last_in_group: bool


class Session:
    """One interactive segmentation session over a scene profile."""

    def __init__(self, profile: SceneProfile, mode: str = "fibonacci",
                 n: int = None, k_top: int = None, grid_resolution: int = None,
                 params: FusionParams = None, workers: int = None,
                 refine: bool = True, segmenter_workers: int = 2):
        if mode not in ("fibonacci", "manual"):
            raise ValueError(f"unknown session mode {mode!r}")
        n = n or profile.n_views
        k_top = k_top or profile.k_top
        if mode == "fibonacci" and n < k_top:
            raise ValueError("cannot select more anchors than sampled views")
        self.profile = profile
        self.mode = mode
        self.params = params or profile.fusion
        self.workers = workers
        self.refine = refine
        self.lock = threading.RLock()
        # events live under their own lock: queue worker callbacks emit
        # events while the session lock is held across a fusion barrier,
        # and a shared lock would starve the pool into a deadlock
        self._event_lock = threading.RLock()
        self._event_cv = threading.Condition(self._event_lock)
        self._seq = itertools.count(1)
        self.events: list[SessionEvent] = []

        self.pool = profile.rig_cameras(n)
        self.scores = rank_views(self.pool)
        if mode == "fibonacci":
            self.anchors = [s.index for s in self.scores[:k_top]]
        else:
            self.anchors = []
        self.grid = profile.make_grid(grid_resolution)
        self.density = bake_density_grid(profile.scene, self.grid)
        self.centroids: list[_Centroid] = []
        self.masks: dict[str, tuple] = {}  # centroid id -> (view, refined mask)
        self.version = 0
        self.occupancy: OccupancyGrid = None
        self._views: dict[str, ViewGeometry] = {}
        self._overlays: dict[tuple, np.ndarray] = {}
        self._mask_announced: set = set()
        self.queue = MaskQueue(workers=segmenter_workers,
                               on_complete=self._on_mask_ready)

    # -- events ------------------------------------------------------------

    def _emit(self, kind: str, payload: dict) -> SessionEvent:
        with self._event_cv:
            ev = SessionEvent(kind, payload, next(self._seq))
            self.events.append(ev)
            self._event_cv.notify_all()
            return ev

    def events_after(self, seq: int) -> list:
        with self._event_lock:
            return [e for e in self.events if e.seq > seq]

    def wait_events(self, seq: int, timeout: float = None) -> list:
        with self._event_cv:
            self._event_cv.wait_for(lambda: self.events and self.events[-1].seq > seq,
                                    timeout)
            return [e for e in self.events if e.seq > seq]

    def _on_mask_ready(self, centroid_id, _mask):
        self._announce_mask(centroid_id)

    def _announce_mask(self, centroid_id):
        """Emit mask-ready exactly once per centroid, whichever thread is first."""
        with self._event_lock:
            if centroid_id not in self._mask_announced:
                self._mask_announced.add(centroid_id)
                self._emit("mask-ready", {"view_id": centroid_id})

    # -- views ---------------------------------------------------------------

    def pick_anchor(self, pool_index: int):
        """Manual mode: add a pool view to the anchor set."""
        if self.mode != "manual":
            raise ValueError("anchors are fixed in fibonacci mode")
        if not 0 <= pool_index < len(self.pool):
            raise IndexError("pool index out of range")
        if pool_index not in self.anchors:
            self.anchors.append(pool_index)

    def anchor_id(self, pool_index: int) -> str:
        return f"anchor-{pool_index:02d}"

    def view_camera(self, view_id: str) -> Camera:
        if view_id.startswith("anchor-"):
            return self.pool[int(view_id.split("-")[1])]
        if view_id.startswith("centroid-"):
            return self.centroids[int(view_id.split("-")[1])].view.camera
        raise KeyError(f"unknown view id {view_id!r}")

    def view_geometry(self, view_id: str) -> ViewGeometry:
        with self.lock:
            if view_id not in self._views:
                if view_id.startswith("centroid-"):
                    raise KeyError(f"unknown view id {view_id!r}")
                cam = self.view_camera(view_id)
                self._views[view_id] = render_view(self.profile.scene, cam,
                                                   self.profile.render)
            return self._views[view_id]

    # -- workflow ------------------------------------------------------------

    def submit_prompt(self, anchor_id: str, pixel, zoom: float = None,
                      last_in_group: bool = False):
        """Back-project a prompt, spawn its centroid view, queue its mask.

        Returns (centroid_id, centroid ViewGeometry); the mask arrives
        asynchronously as a mask-ready event.
        """
        zoom = zoom if zoom is not None else self.profile.zoom_default
        with self.lock:
            idx = int(anchor_id.split("-")[1])
            if idx not in self.anchors:
                raise KeyError(f"{anchor_id!r} is not an anchor of this session")
            anchor_view = self.view_geometry(anchor_id)
            target = back_project_prompt(anchor_view, pixel)  # raises on sky
            cam = make_centroid_view(anchor_view.camera, target, zoom)
            spec = CentroidViewSpec(anchor_index=idx, prompt=tuple(pixel),
                                    target=target, zoom=zoom)
            cid = f"centroid-{len(self.centroids):02d}"
            view = render_view(self.profile.scene, cam, self.profile.render)
            self.centroids.append(_Centroid(cid, spec, view, last_in_group))
            self._views[cid] = view
            center_prompt = (cam.width // 2, cam.height // 2)
            self.queue.submit(cid, view, center_prompt, self.profile.segmenter,
                              last_in_group=last_in_group)
            self._emit("prompt-accepted",
                       {"anchor_id": anchor_id, "centroid_id": cid,
                        "pixel": list(pixel), "zoom": zoom})
            return cid, view

    def maybe_fuse(self, force: bool = False):
        """Barrier + fuse when a synchronization condition holds.

        Conditions: (i) a submitted centroid was the last of its anchor
        group, or (ii) the queue caches at least three completed masks.
        Returns the new grid version, or None when no fusion ran.
        """
        with self.lock:
            if not (force or self.queue.barrier_required()):
                return None
            fresh = self.queue.barrier()
            for cid in sorted(fresh):
                # mask-ready precedes fusion-complete even if the worker
                # callback has not won the session lock yet
                self._announce_mask(cid)
                view = self._views[cid]
                mask = fresh[cid]
                if self.refine:
                    mask = refine_mask(mask, view)
                self.masks[cid] = (view, mask)
            if not self.masks:
                return None
            try:
                views = [self.masks[cid] for cid in sorted(self.masks)]
                grid = fuse(self.grid, self.density, views, self.params,
                            bounds=self.profile.scene.bounds,
                            workers=self.workers)
            except Exception as err:  # session survives a failed fusion
                self._emit("error", {"stage": "fusion", "message": str(err)})
                raise
            self.version += 1
            grid.version = self.version
            self.occupancy = grid
            self._overlays.clear()
            self._emit("fusion-complete",
                       {"version": self.version, "n_masks": len(self.masks)})
            nxt = self._next_pending_centroid()
            if nxt is not None:
                self.get_overlay(nxt)
                self._emit("overlay-ready",
                           {"version": self.version, "view_id": nxt})
            return self.version

    def _next_pending_centroid(self):
        for c in self.centroids:
            if c.id not in self.masks:
                return c.id
        return self.centroids[-1].id if self.centroids else None

    def get_overlay(self, view_id: str) -> np.ndarray:
        """Binary overlay of the current grid on a view; needs version >= 1."""
        with self.lock:
            if self.version < 1:
                raise RuntimeError("no fusion yet")
            key = (self.version, view_id)
            if key not in self._overlays:
                view = self.view_geometry(view_id)
                self._overlays[key] = project_grid_overlay(
                    self.occupancy, view, bounds=self.profile.scene.bounds)
            return self._overlays[key]

    def close(self):
        return self.queue.shutdown()


def start_session(profile: SceneProfile, mode: str = "fibonacci", n: int = None,
                  k_top: int = None, **kw) -> Session:
    return Session(profile, mode=mode, n=n, k_top=k_top, **kw)


def submit_prompt(session: Session, anchor_id: str, pixel, zoom: float = None,
                  last_in_group: bool = False):
    return session.submit_prompt(anchor_id, pixel, zoom, last_in_group)


def maybe_fuse(session: Session, force: bool = False):
    return session.maybe_fuse(force=force)


def get_overlay(session: Session, view_id: str):
    return session.get_overlay(view_id)


def replay_plan(profile: SceneProfile, plan: dict, grid_resolution: int = None,
                params: FusionParams = None, workers: int = None,
                refine: bool = True) -> Session:
    """Drive a full session from a scripted plan; returns the finished session.

    The final grid is deterministic: the last prompt of the last anchor
    group forces a terminal barrier, and fusion is a stateless recompute
    over all masks.
    """
    session = Session(profile, mode=plan.get("mode", "fibonacci"),
                      n=plan.get("n_views"), k_top=plan.get("k_top"),
                      grid_resolution=grid_resolution, params=params,
                      workers=workers, refine=refine)
    try:
        if session.mode == "manual":
            for a in plan["anchors"]:
                session.pick_anchor(int(a["index"]))
        zoom = plan.get("zoom")
        for a in plan["anchors"]:
            aid = session.anchor_id(int(a["index"]))
            prompts = a["prompts"]
            for j, p in enumerate(prompts):
                session.submit_prompt(aid, tuple(p), zoom,
                                      last_in_group=(j == len(prompts) - 1))
                session.maybe_fuse()
        if session.version == 0:
            session.maybe_fuse(force=True)
    finally:
        session.close()
    return session


def save_plan(path, plan: dict):
    with open(path, "w") as f:
        json.dump(plan, f, indent=2)


def load_plan(path) -> dict:
    with open(path) as f:
        return json.load(f)
