"""Analytic volumetric scenes: density primitives, grids and ground truth.

A scene is a list of soft-edged primitives (sphere / box / capsule), each
carrying a volumetric density, an RGB color and an integer object id.  The
density field is the pointwise max over per-primitive densities, where a
primitive contributes its full density inside its surface and a linear
ramp down to zero over `soft_edge` world units outside of it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import SceneBounds, VoxelGrid, contract

__all__ = [
    "ScenePrimitive", "SceneModel", "DensityGrid",
    "scene_density", "bake_density_grid", "ground_truth_voxels",
    "save_scene", "load_scene", "scene_to_dict", "scene_from_dict",
]

KIND_SPHERE = 0
KIND_BOX = 1
KIND_CAPSULE = 2
_KIND_NAMES = {"sphere": KIND_SPHERE, "box": KIND_BOX, "capsule": KIND_CAPSULE}
_KIND_CODES = {v: k for k, v in _KIND_NAMES.items()}


@dataclass(frozen=True)
class ScenePrimitive:
    """One density primitive.

    params by kind:
      sphere:  {center: (3,), radius: float, inner_radius: float = 0}
               (a positive inner_radius hollows the sphere into a shell)
      box:     {center: (3,), half_extents: (3,)}
      capsule: {p0: (3,), p1: (3,), radius: float}
    """

    kind: str
    params: dict
    density: float
    color: tuple
    object_id: int
    soft_edge: float = 0.0

    def __post_init__(self):
        if self.kind not in _KIND_NAMES:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.density < 0:
            raise ValueError("density must be >= 0")
        if self.soft_edge < 0:
            raise ValueError("soft edge width must be >= 0")
        if self.object_id < 1:
            raise ValueError("object ids start at 1")
        if self.kind == "sphere":
            if self.params["radius"] <= 0:
                raise ValueError("sphere radius must be positive")
            inner = self.params.get("inner_radius", 0.0)
            if inner < 0 or inner >= self.params["radius"]:
                raise ValueError("inner radius must lie in [0, radius)")
        if self.kind == "box" and np.any(np.asarray(self.params["half_extents"]) <= 0):
            raise ValueError("box half extents must be positive")
        if self.kind == "capsule" and self.params["radius"] <= 0:
            raise ValueError("capsule radius must be positive")

    def signed_distance(self, points) -> np.ndarray:
        """Signed distance to the primitive surface, vectorized over points."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.kind == "sphere":
            c = np.asarray(self.params["center"], dtype=np.float64)
            dist = np.linalg.norm(p - c, axis=-1)
            sd = dist - float(self.params["radius"])
            inner = float(self.params.get("inner_radius", 0.0))
            if inner > 0:
                sd = np.maximum(sd, inner - dist)
        elif self.kind == "box":
            c = np.asarray(self.params["center"], dtype=np.float64)
            h = np.asarray(self.params["half_extents"], dtype=np.float64)
            q = np.abs(p - c) - h
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(np.max(q, axis=-1), 0.0)
            sd = outside + inside
        else:  # capsule
            a = np.asarray(self.params["p0"], dtype=np.float64)
            b = np.asarray(self.params["p1"], dtype=np.float64)
            ab = b - a
            denom = float(ab @ ab)
            t = np.clip((p - a) @ ab / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(p))
            sd = np.linalg.norm(p - (a + t[:, None] * ab), axis=-1) - float(self.params["radius"])
        return sd if np.asarray(points).ndim > 1 else sd[0]

    def density_at(self, points) -> np.ndarray:
        """Density with the linear soft-edge ramp applied outside the surface."""
        sd = np.asarray(self.signed_distance(points))
        if self.soft_edge > 0:
            fall = np.clip(1.0 - sd / self.soft_edge, 0.0, 1.0)
        else:
            fall = (sd <= 0.0).astype(np.float64)
        return self.density * fall


@dataclass(frozen=True)
class SceneModel:
    """Primitives plus scene bounds and a background color."""

    primitives: tuple
    bounds: SceneBounds
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "background", tuple(float(c) for c in self.background))

    def object_ids(self):
        return sorted({p.object_id for p in self.primitives})

    def packed(self):
        """Flat array form consumed by the numba kernels.

        Returns (kinds u8, params (N,7) f64, densities f64, colors (N,3) f64,
        object_ids i32, soft_edges f64).
        """
        n = len(self.primitives)
        kinds = np.zeros(n, dtype=np.uint8)
        params = np.zeros((n, 7), dtype=np.float64)
        dens = np.zeros(n, dtype=np.float64)
        cols = np.zeros((n, 3), dtype=np.float64)
        oids = np.zeros(n, dtype=np.int32)
        soft = np.zeros(n, dtype=np.float64)
        for i, pr in enumerate(self.primitives):
            kinds[i] = _KIND_NAMES[pr.kind]
            if pr.kind == "sphere":
                params[i, :3] = pr.params["center"]
                params[i, 3] = pr.params["radius"]
                params[i, 4] = pr.params.get("inner_radius", 0.0)
            elif pr.kind == "box":
                params[i, :3] = pr.params["center"]
                params[i, 3:6] = pr.params["half_extents"]
            else:
                params[i, :3] = pr.params["p0"]
                params[i, 3:6] = pr.params["p1"]
                params[i, 6] = pr.params["radius"]
            dens[i] = pr.density
            cols[i] = pr.color
            oids[i] = pr.object_id
            soft[i] = pr.soft_edge
        return kinds, params, dens, cols, oids, soft


@dataclass
class DensityGrid:
    """Per-voxel density baked from a scene, on a VoxelGrid layout."""

    grid: VoxelGrid
    values: np.ndarray  # (G, G, G) float32, indexed [ix, iy, iz]

    def __post_init__(self):
        g = self.grid.resolution
        self.values = np.asarray(self.values, dtype=np.float32).reshape(g, g, g)
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("densities must be finite and >= 0")


def scene_density(scene: SceneModel, point):
    """(density, color, object_id) at a world point.

    The max-density primitive wins; empty space returns (0, background, 0).
    Ties keep the first primitive in scene order.
    """
    best = 0.0
    color = scene.background
    oid = 0
    for pr in scene.primitives:
        d = float(pr.density_at(point))
        if d > best:
            best = d
            color = pr.color
            oid = pr.object_id
    return best, color, oid


def _density_field(scene: SceneModel, points: np.ndarray) -> np.ndarray:
    """Vectorized max-density over primitives for an (N, 3) point array."""
    out = np.zeros(len(points), dtype=np.float64)
    for pr in scene.primitives:
        np.maximum(out, pr.density_at(points), out=out)
    return out


def bake_density_grid(scene: SceneModel, grid: VoxelGrid) -> DensityGrid:
    """Sample scene density at voxel centers (contracted when unbounded)."""
    centers = grid.centers().reshape(-1, 3)
    if scene.bounds.unbounded:
        centers = np.stack([contract(c, scene.bounds) for c in centers])
    vals = _density_field(scene, centers)
    g = grid.resolution
    return DensityGrid(grid, vals.reshape(g, g, g).astype(np.float32))


def ground_truth_voxels(scene: SceneModel, grid: VoxelGrid, object_ids) -> np.ndarray:
    """Boolean (G,G,G) grid: voxel centers inside any primitive with a listed id."""
    ids = set(object_ids)
    g = grid.resolution
    out = np.zeros((g, g, g), dtype=bool)
    if not ids:
        return out
    centers = grid.centers().reshape(-1, 3)
    flat = out.reshape(-1)
    for pr in scene.primitives:
        if pr.object_id in ids:
            flat |= np.asarray(pr.signed_distance(centers)) <= 0.0
    return out


def scene_to_dict(scene: SceneModel) -> dict:
    prims = []
    for p in scene.primitives:
        params = {k: (list(v) if np.ndim(v) else float(v)) for k, v in p.params.items()}
        prims.append({
            "kind": p.kind, "params": params, "density": p.density,
            "color": list(p.color), "object_id": p.object_id,
            "soft_edge": p.soft_edge,
        })
    return {
        "primitives": prims,
        "bounds": {
            "min": list(scene.bounds.min), "max": list(scene.bounds.max),
            "unbounded": scene.bounds.unbounded,
        },
        "background": list(scene.background),
    }


def scene_from_dict(d: dict) -> SceneModel:
    prims = [
        ScenePrimitive(
            kind=p["kind"], params=p["params"], density=float(p["density"]),
            color=tuple(p["color"]), object_id=int(p["object_id"]),
            soft_edge=float(p.get("soft_edge", 0.0)),
        )
        for p in d["primitives"]
    ]
    b = d["bounds"]
    bounds = SceneBounds(np.asarray(b["min"]), np.asarray(b["max"]),
                         bool(b.get("unbounded", False)))
    return SceneModel(tuple(prims), bounds, tuple(d.get("background", (0.0, 0.0, 0.0))))


def save_scene(path, scene: SceneModel):
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene), f, indent=2)


def load_scene(path) -> SceneModel:
    with open(path) as f:
        return scene_from_dict(json.load(f))
