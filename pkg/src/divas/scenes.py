"""Bundled benchmark scenes, per-scene profiles, and plan-building oracles.

Four desk-scale scenes exercise the pipeline's failure modes:

* sphere_on_plane  - compact solid object on a ground pad (the baseline)
* occluder         - prompted box in front, sphere behind it that catches
                     false mask activations in imperfect-mask mode
* rod_lattice      - grid of thin capsules whose recall depends on the
                     thin-structure path
* two_object       - two look-alike spheres; prompts must stay local

Profiles fix everything a session needs: rig, intrinsics, render config,
fusion parameters, segmenter config, grid layout and held-out cameras.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .fusion import FusionParams
from .geometry import Camera, SceneBounds, VoxelGrid
from .planner import fibonacci_sample, rank_views
from .render import RenderConfig, ViewGeometry, render_view
from .scene import SceneModel, ScenePrimitive
from .segmenter import SegmenterConfig

__all__ = ["SceneProfile", "SCENES", "get_profile", "scene_names",
           "silhouette_mask", "surface_object_ids", "pick_prompts", "build_plan"]


@dataclass
class SceneProfile:
    name: str
    scene: SceneModel
    target_ids: frozenset
    rig_center: tuple
    rig_radius: float
    intrinsics: dict
    render: RenderConfig
    fusion: FusionParams
    segmenter: SegmenterConfig
    grid_resolution: int
    grid_half_extent: float
    grid_center: tuple
    zoom_default: float = 0.47
    n_views: int = 12
    k_top: int = 5
    held_out_radius: float = None

    def make_grid(self, resolution: int = None) -> VoxelGrid:
        res = resolution or self.grid_resolution
        origin = np.asarray(self.grid_center) - self.grid_half_extent
        return VoxelGrid(res, self.grid_half_extent, origin)

    def rig_cameras(self, n: int = None):
        return fibonacci_sample(n or self.n_views, self.rig_radius,
                                self.rig_center, self.intrinsics)

    def held_out_cameras(self, n: int = 4):
        r = self.held_out_radius or self.rig_radius * 1.05
        return fibonacci_sample(n, r, self.rig_center, self.intrinsics)


def _intrinsics(res: int = 160, focal: float = 1.25) -> dict:
    return dict(fx=focal * res, fy=focal * res, cx=res / 2.0, cy=res / 2.0,
                width=res, height=res)


# room ids start here; never used as segmentation targets
_ROOM_ID = 90


def _room(center, inner: float, thickness: float = 0.2):
    """Six slabs enclosing the rig so every ray terminates on valid matter.

    Keeps the inverse-depth normalization anchored in every view direction
    (the object is never the farthest valid surface) and gives cumulative
    weight cutoffs a background to run into.
    """
    cx, cy, cz = center
    t = thickness
    d = inner + t
    walls = []
    specs = (
        ((cx - d, cy, cz), (t, inner + 2 * t, inner + 2 * t), (0.30, 0.30, 0.34)),
        ((cx + d, cy, cz), (t, inner + 2 * t, inner + 2 * t), (0.32, 0.30, 0.30)),
        ((cx, cy - d, cz), (inner + 2 * t, t, inner + 2 * t), (0.26, 0.28, 0.26)),
        ((cx, cy + d, cz), (inner + 2 * t, t, inner + 2 * t), (0.34, 0.34, 0.38)),
        ((cx, cy, cz - d), (inner + 2 * t, inner + 2 * t, t), (0.28, 0.31, 0.36)),
        ((cx, cy, cz + d), (inner + 2 * t, inner + 2 * t, t), (0.33, 0.29, 0.33)),
    )
    for i, (c, h, col) in enumerate(specs):
        walls.append(ScenePrimitive("box", {"center": c, "half_extents": h},
                                    density=40.0, color=col,
                                    object_id=_ROOM_ID + i, soft_edge=0.004))
    return tuple(walls)


def _sphere_on_plane() -> SceneProfile:
    center = (0.0, 0.55, 0.0)
    sphere = ScenePrimitive("sphere", {"center": center, "radius": 0.5,
                                       "inner_radius": 0.45},
                            density=46.0, color=(0.85, 0.2, 0.15),
                            object_id=1, soft_edge=0.0)
    pad = ScenePrimitive("box", {"center": (0.0, -0.85, 0.0),
                                 "half_extents": (0.3, 0.075, 0.3)},
                         density=40.0, color=(0.1, 0.14, 0.2),
                         object_id=2, soft_edge=0.004)
    scene = SceneModel((sphere, pad) + _room(center, 4.6),
                       SceneBounds((-4.9, -4.4, -4.9), (4.9, 5.5, 4.9)),
                       background=(0.02, 0.02, 0.04))
    return SceneProfile(
        name="sphere_on_plane", scene=scene, target_ids=frozenset({1}),
        rig_center=center, rig_radius=3.3, intrinsics=_intrinsics(),
        render=RenderConfig(samples_per_ray=384, near=0.4, far=12.5),
        fusion=FusionParams(), segmenter=SegmenterConfig(color_tol=0.55),
        grid_resolution=128, grid_half_extent=1.2, grid_center=center,
    )


def _occluder() -> SceneProfile:
    center = (0.0, 0.55, 0.1)
    box = ScenePrimitive("box", {"center": (0.0, 0.5, 0.55),
                                 "half_extents": (0.5, 0.5, 0.22)},
                         density=8.0, color=(0.2, 0.55, 0.8),
                         object_id=1, soft_edge=0.0)
    ball = ScenePrimitive("sphere", {"center": (0.0, 0.55, -0.9), "radius": 0.55},
                          density=8.0, color=(0.8, 0.65, 0.2),
                          object_id=2, soft_edge=0.0)
    scene = SceneModel((box, ball) + _room(center, 4.6),
                       SceneBounds((-4.9, -4.4, -4.8), (4.9, 5.5, 5.0)),
                       background=(0.02, 0.02, 0.04))
    return SceneProfile(
        name="occluder", scene=scene, target_ids=frozenset({1}),
        rig_center=center, rig_radius=3.2, intrinsics=_intrinsics(),
        render=RenderConfig(samples_per_ray=384, near=0.4, far=12.5),
        fusion=FusionParams(), segmenter=SegmenterConfig(),
        grid_resolution=96, grid_half_extent=1.7, grid_center=(0.0, 0.55, -0.1),
    )


def _tilt_x(p, center, deg):
    """Rotate a point about the x-axis through `center`."""
    a = math.radians(deg)
    x, y, z = (p[0] - center[0], p[1] - center[1], p[2] - center[2])
    return (center[0] + x,
            center[1] + y * math.cos(a) - z * math.sin(a),
            center[2] + y * math.sin(a) + z * math.cos(a))


def _rod_lattice() -> SceneProfile:
    center = (0.0, 0.6, 0.0)
    tilt = 28.0
    rods = []

    def cap(p0, p1, r):
        rods.append(ScenePrimitive(
            "capsule", {"p0": _tilt_x(p0, center, tilt),
                        "p1": _tilt_x(p1, center, tilt), "radius": r},
            density=80.0, color=(0.82, 0.25, 0.2), object_id=1,
            soft_edge=0.002))

    r = 0.016
    xs = (-0.45, -0.15, 0.15, 0.45)
    ys = (0.15, 0.45, 0.75, 1.05)
    for x in xs:
        cap((x, 0.0, 0.0), (x, 1.2, 0.0), r)
    for y in ys:
        cap((-0.6, y, 0.0), (0.6, y, 0.0), r)
    # border frame: thick enough to prompt from oblique and edge-on views
    rf = 0.028
    cap((-0.62, 0.0, 0.0), (0.62, 0.0, 0.0), rf)
    cap((-0.62, 1.2, 0.0), (0.62, 1.2, 0.0), rf)
    cap((-0.62, 0.0, 0.0), (-0.62, 1.2, 0.0), rf)
    cap((0.62, 0.0, 0.0), (0.62, 1.2, 0.0), rf)
    scene = SceneModel(tuple(rods) + _room(center, 4.2),
                       SceneBounds((-4.7, -3.9, -4.7), (4.7, 5.1, 4.7)),
                       background=(0.02, 0.02, 0.04))
    return SceneProfile(
        name="rod_lattice", scene=scene, target_ids=frozenset({1}),
        rig_center=center, rig_radius=2.6, intrinsics=_intrinsics(),
        render=RenderConfig(samples_per_ray=384, near=0.4, far=12.5),
        fusion=FusionParams(), segmenter=SegmenterConfig(depth_tol=0.1),
        grid_resolution=96, grid_half_extent=0.9, grid_center=center,
    )


def _two_object() -> SceneProfile:
    center = (0.0, 0.45, 0.0)
    target = ScenePrimitive("sphere", {"center": (-0.55, 0.45, 0.0), "radius": 0.4,
                                        "inner_radius": 0.35},
                            density=46.0, color=(0.7, 0.3, 0.6),
                            object_id=1, soft_edge=0.0)
    decoy = ScenePrimitive("sphere", {"center": (0.65, 0.4, 0.15), "radius": 0.35,
                                       "inner_radius": 0.30},
                           density=46.0, color=(0.7, 0.3, 0.6),
                           object_id=2, soft_edge=0.0)
    scene = SceneModel((target, decoy) + _room(center, 4.4),
                       SceneBounds((-4.8, -4.35, -4.8), (4.8, 5.25, 4.8)),
                       background=(0.02, 0.02, 0.04))
    return SceneProfile(
        name="two_object", scene=scene, target_ids=frozenset({1}),
        rig_center=center, rig_radius=3.0, intrinsics=_intrinsics(),
        render=RenderConfig(samples_per_ray=384, near=0.4, far=12.5),
        fusion=FusionParams(), segmenter=SegmenterConfig(color_tol=0.55),
        grid_resolution=96, grid_half_extent=1.4, grid_center=center,
    )


_BUILDERS = {
    "sphere_on_plane": _sphere_on_plane,
    "occluder": _occluder,
    "rod_lattice": _rod_lattice,
    "two_object": _two_object,
}
SCENES = tuple(_BUILDERS)
_CACHE = {}


def scene_names():
    return list(SCENES)


def get_profile(name: str) -> SceneProfile:
    if name not in _BUILDERS:
        raise KeyError(f"unknown scene {name!r}; available: {', '.join(SCENES)}")
    if name not in _CACHE:
        _CACHE[name] = _BUILDERS[name]()
    return _CACHE[name]


# ---------------------------------------------------------------------------
# oracles used for plan building and 2D evaluation
# ---------------------------------------------------------------------------

def _pixel_surface_points(view: ViewGeometry) -> np.ndarray:
    """(H, W, 3) world surface point per pixel (max-weight depth sample)."""
    cam = view.camera
    h, w = view.z_surface.shape
    xs = (np.arange(w) + 0.5 - cam.cx) / cam.fx
    ys = (cam.cy - (np.arange(h) + 0.5)) / cam.fy
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([gx, gy, -np.ones_like(gx)], axis=-1)
    d_world = d_cam @ cam.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    return cam.position + d_world * view.z_surface[..., None].astype(np.float64)


def surface_object_ids(scene: SceneModel, view: ViewGeometry) -> np.ndarray:
    """(H, W) object id of the visible surface per pixel, 0 where empty.

    "Surface" is the maximum-weight sample along each ray, i.e. the point
    a prompt would back-project to; use this to decide where prompts land.
    """
    pts = _pixel_surface_points(view).reshape(-1, 3)
    best = np.zeros(len(pts))
    ids = np.zeros(len(pts), dtype=np.int32)
    for pr in scene.primitives:
        d = pr.density_at(pts)
        better = d > best
        best = np.where(better, d, best)
        ids = np.where(better, pr.object_id, ids)
    out = ids.reshape(view.z_surface.shape)
    out[~view.valid] = 0
    return out


def _ray_hit_t(pr: ScenePrimitive, origins, dirs) -> np.ndarray:
    """First positive intersection distance with a primitive, inf on miss.

    Exact geometric intersections (sphere quadratic, box slabs, capsule as
    clamped-segment distance via bisection-free quadratic on the cylinder
    plus end caps); vectorized over rays.
    """
    inf = np.inf
    if pr.kind == "sphere":
        c = np.asarray(pr.params["center"], dtype=np.float64)
        r = float(pr.params["radius"])
        oc = origins - c
        b = np.einsum("ij,ij->i", oc, dirs)
        q = np.einsum("ij,ij->i", oc, oc) - r * r
        disc = b * b - q
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, inf))
        return np.where(hit, t, inf)
    if pr.kind == "box":
        c = np.asarray(pr.params["center"], dtype=np.float64)
        h = np.asarray(pr.params["half_extents"], dtype=np.float64)
        lo = c - h
        hi = c + h
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (lo - origins) * inv
            tb = (hi - origins) * inv
        tmin = np.nanmax(np.minimum(ta, tb), axis=1)
        tmax = np.nanmin(np.maximum(ta, tb), axis=1)
        ok = (tmax >= tmin) & (tmax > 1e-9)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where(ok, t, inf)
    # capsule: infinite cylinder about the axis, clamped, plus end spheres
    a = np.asarray(pr.params["p0"], dtype=np.float64)
    bb = np.asarray(pr.params["p1"], dtype=np.float64)
    r = float(pr.params["radius"])
    axis = bb - a
    alen2 = float(axis @ axis)
    best = np.full(len(origins), inf)
    if alen2 > 0:
        oa = origins - a
        dd = np.einsum("ij,ij->i", dirs, dirs)
        da = dirs @ axis
        oa_ax = oa @ axis
        aq = dd - da * da / alen2
        bq = np.einsum("ij,ij->i", oa, dirs) - da * oa_ax / alen2
        cq = np.einsum("ij,ij->i", oa, oa) - oa_ax * oa_ax / alen2 - r * r
        disc = bq * bq - aq * cq
        valid = (disc >= 0) & (np.abs(aq) > 1e-12)
        sq = np.sqrt(np.where(valid, disc, 0.0))
        for sgn in (-1.0, 1.0):
            t = np.where(valid, (-bq + sgn * sq) / np.where(valid, aq, 1.0), inf)
            s = oa_ax + t * da  # axial coordinate of the hit, in [0, alen2]?
            on_seg = (t > 1e-9) & (s >= 0) & (s <= alen2)
            best = np.where(on_seg & (t < best), t, best)
    for cap_c in (a, bb):
        oc = origins - cap_c
        b2 = np.einsum("ij,ij->i", oc, dirs)
        q2 = np.einsum("ij,ij->i", oc, oc) - r * r
        disc = b2 * b2 - q2
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        for sgn in (-1.0, 1.0):
            t = np.where(hit, -b2 + sgn * sq, inf)
            best = np.where((t > 1e-9) & (t < best), t, best)
    return best


def first_hit_ids(scene: SceneModel, camera) -> np.ndarray:
    """(H, W) object id of the geometrically first-hit primitive per pixel.

    Renderer-independent visibility oracle: every primitive is treated as
    an opaque solid and the nearest intersection wins.
    """
    h, w = camera.height, camera.width
    xs = (np.arange(w) + 0.5 - camera.cx) / camera.fx
    ys = (camera.cy - (np.arange(h) + 0.5)) / camera.fy
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([gx, gy, -np.ones_like(gx)], axis=-1).reshape(-1, 3)
    dirs = d_cam @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape)
    best_t = np.full(len(dirs), np.inf)
    ids = np.zeros(len(dirs), dtype=np.int32)
    for pr in scene.primitives:
        t = _ray_hit_t(pr, origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        ids = np.where(closer, pr.object_id, ids)
    return ids.reshape(h, w)


def silhouette_mask(scene: SceneModel, view: ViewGeometry, target_ids) -> np.ndarray:
    """Boolean mask of pixels whose first geometric hit is a target object."""
    ids = first_hit_ids(scene, view.camera)
    out = np.zeros_like(ids, dtype=bool)
    for t in target_ids:
        out |= ids == t
    return out


def pick_prompts(scene: SceneModel, view: ViewGeometry, target_ids,
                 k: int = 2) -> list:
    """Deterministically pick k well-separated interior prompt pixels.

    The first prompt is the most interior pixel of the promptable region
    (pixels whose back-projection surface belongs to the target); the rest
    are farthest-point samples among sufficiently interior pixels.
    """
    ids = surface_object_ids(scene, view)
    sil = np.zeros_like(ids, dtype=bool)
    for t in target_ids:
        sil |= ids == t
    if sil.sum() < k:
        raise ValueError("target too small in this view to place prompts")
    interior = ndimage.distance_transform_edt(sil)
    d_floor = min(2.0, interior.max() / 2.0)
    cand = np.argwhere(interior >= max(d_floor, 1.0))
    order = np.lexsort((cand[:, 1], cand[:, 0]))
    cand = cand[order]
    first = np.unravel_index(int(np.argmax(interior)), interior.shape)
    chosen = [first]
    for _ in range(1, k):
        dists = np.full(len(cand), np.inf)
        for cy, cx in chosen:
            d = (cand[:, 0] - cy) ** 2 + (cand[:, 1] - cx) ** 2
            dists = np.minimum(dists, d)
        chosen.append(tuple(cand[int(np.argmax(dists))]))
    return [(int(cx), int(cy)) for cy, cx in chosen]  # (px, py) order


def build_plan(profile: SceneProfile, mode: str = "fibonacci", n: int = None,
               k_top: int = None, prompts_per_anchor: int = 2,
               zoom: float = None, manual_indices=None) -> dict:
    """Scripted-session plan: anchors with prompt pixels and zoom factors."""
    n = n or profile.n_views
    k_top = k_top or profile.k_top
    zoom = zoom or profile.zoom_default
    cams = profile.rig_cameras(n)
    if mode == "fibonacci":
        if n < k_top:
            raise ValueError("pool smaller than the requested anchor count")
        scores = rank_views(cams)
        anchor_idx = [s.index for s in scores[:k_top]]
    elif mode == "manual":
        if not manual_indices:
            raise ValueError("manual mode needs explicit view indices")
        anchor_idx = [int(i) for i in manual_indices]
    else:
        raise ValueError(f"unknown plan mode {mode!r}")
    anchors = []
    for idx in anchor_idx:
        vg = render_view(profile.scene, cams[idx], profile.render)
        prompts = pick_prompts(profile.scene, vg, profile.target_ids,
                               prompts_per_anchor)
        anchors.append({"index": idx, "prompts": [list(p) for p in prompts]})
    return {
        "scene": profile.name,
        "mode": mode,
        "n_views": n,
        "k_top": k_top,
        "zoom": zoom,
        "anchors": anchors,
    }
