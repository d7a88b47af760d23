"""Pinhole cameras, rays, voxel grids and shared projection math.

Conventions, fixed for the whole package:

* right-handed world coordinates, +Y is "up" for look-at cameras
* camera frame: +X right, +Y up, the camera looks along -Z
* image coordinates: u to the right, v down, origin at the top-left
  corner; normalized coordinates u = pixel_x / width in [0, 1)
* pixel index = floor(width * u); rays are cast through pixel centers,
  i.e. u = (ix + 0.5) / width
* "depth" of a per-ray quantity means arc length along the unit ray
  direction; the camera-axis depth of a point (its forward z in the
  camera frame) is what `voxel_depth` returns
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Camera", "Ray", "VoxelGrid", "SceneBounds",
    "project", "unproject", "uv_to_ray", "look_at",
    "contract", "closest_point_on_ray", "voxel_depth",
    "camera_to_dict", "camera_from_dict", "save_camera", "load_camera",
]

_UP_FALLBACK_COS = math.cos(math.radians(1.0))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: intrinsics plus a rigid world_from_camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_from_camera: np.ndarray  # 4x4, rotation block orthonormal

    def __post_init__(self):
        m = np.asarray(self.world_from_camera, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "world_from_camera", m)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("rotation block is not orthonormal")

    @property
    def position(self) -> np.ndarray:
        return self.world_from_camera[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        """Columns are the camera's x/y/z axes expressed in world coords."""
        return self.world_from_camera[:3, :3]

    @property
    def forward(self) -> np.ndarray:
        """Viewing direction in world coordinates (camera looks along -Z)."""
        return -self.world_from_camera[:3, 2]


@dataclass(frozen=True)
class Ray:
    """Origin plus unit direction; direction is normalized on construction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0.0:
            raise ValueError("ray direction must be nonzero")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class VoxelGrid:
    """Cubic voxel grid: G voxels per axis over a box of half-extent B.

    `half_extents` holds one value per cascade level; only level 0 is used
    by the fusion pipeline.  `origin` is the world position of the grid's
    minimum corner.
    """

    resolution: int
    half_extents: tuple = (1.0,)
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if isinstance(self.half_extents, (int, float)):
            object.__setattr__(self, "half_extents", (float(self.half_extents),))
        else:
            object.__setattr__(self, "half_extents",
                               tuple(float(b) for b in self.half_extents))
        object.__setattr__(self, "origin",
                           np.asarray(self.origin, dtype=np.float64).reshape(3))
        if self.resolution < 1:
            raise ValueError("resolution must be a positive integer")
        if any(b <= 0 for b in self.half_extents):
            raise ValueError("half extent must be positive")

    @property
    def half_extent(self) -> float:
        return self.half_extents[0]

    def voxel_size(self, level: int = 0) -> float:
        return 2.0 * self.half_extents[level] / self.resolution

    @property
    def center(self) -> np.ndarray:
        return self.origin + self.half_extent

    def index_to_center(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.float64)
        return self.origin + (idx + 0.5) * self.voxel_size()

    def world_to_index(self, point) -> np.ndarray:
        rel = (np.asarray(point, dtype=np.float64) - self.origin) / self.voxel_size()
        return np.floor(rel).astype(np.int64)

    def contains_index(self, idx) -> bool:
        idx = np.asarray(idx)
        return bool(np.all(idx >= 0) and np.all(idx < self.resolution))

    def centers(self) -> np.ndarray:
        """(G, G, G, 3) array of voxel centers, indexed [ix, iy, iz]."""
        g = self.resolution
        ax = self.origin[None, 0] + (np.arange(g) + 0.5) * self.voxel_size()
        ay = self.origin[None, 1] + (np.arange(g) + 0.5) * self.voxel_size()
        az = self.origin[None, 2] + (np.arange(g) + 0.5) * self.voxel_size()
        gx, gy, gz = np.meshgrid(ax.ravel(), ay.ravel(), az.ravel(), indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


@dataclass(frozen=True)
class SceneBounds:
    """Axis-aligned scene box; `unbounded` enables spherical contraction."""

    min: np.ndarray
    max: np.ndarray
    unbounded: bool = False

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if not np.all(lo < hi):
            raise ValueError("bounds min must be strictly below max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def half(self) -> np.ndarray:
        return 0.5 * (self.max - self.min)


def project(camera: Camera, point) -> tuple:
    """Project a world point to normalized image coords.

    Returns (u, v, in_front).  When the point is at or behind the camera
    plane, in_front is False and (u, v) = (-1, -1), i.e. outside [0, 1).
    The pixel index mapping is ix = floor(width * u), iy = floor(height * v).
    """
    p = np.asarray(point, dtype=np.float64)
    rel = p - camera.position
    r = camera.rotation
    x = rel @ r[:, 0]
    y = rel @ r[:, 1]
    z = rel @ r[:, 2]
    d = -z  # camera looks along -Z
    if d <= 0.0:
        return -1.0, -1.0, False
    u = (camera.fx * (x / d) + camera.cx) / camera.width
    v = (camera.cy - camera.fy * (y / d)) / camera.height
    return float(u), float(v), True


def unproject(camera: Camera, u: float, v: float, depth: float) -> np.ndarray:
    """Point at arc-length `depth` along the ray through normalized (u, v)."""
    ray = uv_to_ray(camera, u, v)
    return ray.at(depth)


def uv_to_ray(camera: Camera, u: float, v: float) -> Ray:
    """World-space ray from the camera center through normalized (u, v)."""
    x = (u * camera.width - camera.cx) / camera.fx
    y = (camera.cy - v * camera.height) / camera.fy
    d_cam = np.array([x, y, -1.0])
    d_world = camera.rotation @ d_cam
    return Ray(camera.position.copy(), d_world)


def look_at(position, target, up=None) -> np.ndarray:
    """4x4 world_from_camera for a camera at `position` aimed at `target`.

    Up vector defaults to world +Y, falling back to +X when the view
    direction is within 1 degree of +/-Y.
    """
    pos = np.asarray(position, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    fwd = tgt - pos
    n = np.linalg.norm(fwd)
    if n == 0.0:
        raise ValueError("look_at target coincides with the camera position")
    fwd = fwd / n
    if up is None:
        up = np.array([0.0, 1.0, 0.0])
        if abs(fwd @ up) > _UP_FALLBACK_COS:
            up = np.array([1.0, 0.0, 0.0])
    up = np.asarray(up, dtype=np.float64)
    zaxis = -fwd
    xaxis = np.cross(up, zaxis)
    xaxis = xaxis / np.linalg.norm(xaxis)
    yaxis = np.cross(zaxis, xaxis)
    m = np.eye(4)
    m[:3, 0] = xaxis
    m[:3, 1] = yaxis
    m[:3, 2] = zaxis
    m[:3, 3] = pos
    return m


def contract(point, bounds: SceneBounds) -> np.ndarray:
    """Spherical contraction into the radius-2 ball, in bounds-normalized coords.

    Identity for bounded scenes and for points with normalized radius <= 1;
    otherwise x -> (2 - 1/|x|) * x/|x|, mapped back to world scale.
    """
    p = np.asarray(point, dtype=np.float64)
    if not bounds.unbounded:
        return p.copy()
    n = (p - bounds.center) / bounds.half
    r = np.linalg.norm(n)
    if r <= 1.0:
        return p.copy()
    n = (2.0 - 1.0 / r) * (n / r)
    return bounds.center + n * bounds.half


def closest_point_on_ray(ray: Ray, point, t_lo: float, t_hi: float) -> tuple:
    """Closest point to `point` on the ray segment t in [t_lo, t_hi].

    Returns (t_clamped, closest_point, distance).
    """
    if t_lo > t_hi:
        raise ValueError("t_lo must not exceed t_hi")
    p = np.asarray(point, dtype=np.float64)
    t = float((p - ray.origin) @ ray.direction)
    t_c = min(max(t, t_lo), t_hi)
    closest = ray.at(t_c)
    return t_c, closest, float(np.linalg.norm(p - closest))


def voxel_depth(camera: Camera, point) -> float:
    """Depth of a world point along the camera forward axis (z in cam frame)."""
    rel = np.asarray(point, dtype=np.float64) - camera.position
    return float(rel @ camera.forward)


def camera_to_dict(camera: Camera) -> dict:
    return {
        "fx": camera.fx, "fy": camera.fy,
        "cx": camera.cx, "cy": camera.cy,
        "width": camera.width, "height": camera.height,
        "world_from_camera": [float(x) for x in camera.world_from_camera.ravel()],
    }


def camera_from_dict(d: dict) -> Camera:
    return Camera(
        fx=float(d["fx"]), fy=float(d["fy"]),
        cx=float(d["cx"]), cy=float(d["cy"]),
        width=int(d["width"]), height=int(d["height"]),
        world_from_camera=np.asarray(d["world_from_camera"], dtype=np.float64).reshape(4, 4),
    )


def save_camera(path, camera: Camera):
    with open(path, "w") as f:
        json.dump(camera_to_dict(camera), f, indent=2)


def load_camera(path) -> Camera:
    with open(path) as f:
        return camera_from_dict(json.load(f))
