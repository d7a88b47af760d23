"""Volumetric ray marcher producing per-ray depth statistics.

Marching uses deterministic midpoint sampling: sample k sits at arc length
t_k = near + (k + 0.5) * dt along the unit ray direction.  Per sample the
standard transmittance weights w_k = T_k * (1 - exp(-sigma_k * dt)) are
accumulated; marching stops at the first sample where the cumulative
weight reaches the cutoff tau_cw.

Per-pixel outputs (all arc-length depths along the pixel ray):
  d_min      first sample depth where the cumulative weight exceeds the
             minimum-weight threshold
  d_max      depth of the cutoff sample; if the cutoff is never reached,
             the last sample with nonzero weight
  d_exp      weight-averaged depth over retained samples, clamped into
             [d_min, d_max]
  n_samples  number of retained samples with nonzero weight
  z_surface  depth of the maximum-weight sample (sharp surface estimate,
             used for prompt back-projection and mask refinement)

A pixel is valid iff the cumulative weight ever exceeds the minimum-weight
threshold; invalid pixels have all depth maps set to 0 and n_samples = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._nb import njit, prange
from .geometry import Camera, Ray
from .scene import SceneModel, KIND_SPHERE, KIND_BOX

__all__ = ["RenderConfig", "ViewGeometry", "RaySample", "march_ray", "render_view"]


@dataclass(frozen=True)
class RenderConfig:
    samples_per_ray: int = 192
    near: float = 0.05
    far: float = 8.0
    tau_cw: float = 0.75
    min_weight: float = 1e-4

    def __post_init__(self):
        if self.samples_per_ray < 1:
            raise ValueError("samples_per_ray must be positive")
        if not self.near < self.far:
            raise ValueError("near must be below far")
        if not 0.0 < self.tau_cw <= 1.0:
            raise ValueError("tau_cw must lie in (0, 1]")


@dataclass
class ViewGeometry:
    """One rendered view: image plus the per-ray statistics above."""

    camera: Camera
    rgb: np.ndarray        # (H, W, 3) float32
    d_min: np.ndarray      # (H, W) float32
    d_max: np.ndarray      # (H, W) float32
    d_exp: np.ndarray      # (H, W) float32
    n_samples: np.ndarray  # (H, W) int32
    z_surface: np.ndarray  # (H, W) float32

    @property
    def valid(self) -> np.ndarray:
        return self.n_samples > 0

    def check(self):
        """Assert the D-ordering invariant on every valid pixel."""
        v = self.valid
        assert np.all(self.d_min[v] <= self.d_exp[v] + 1e-6)
        assert np.all(self.d_exp[v] <= self.d_max[v] + 1e-6)
        inv = ~v
        for m in (self.d_min, self.d_max, self.d_exp, self.z_surface):
            assert np.all(m[inv] == 0.0)


@dataclass(frozen=True)
class RaySample:
    """march_ray output for a single ray."""

    rgb: tuple
    d_min: float
    d_max: float
    d_exp: float
    n_samples: int
    z_surface: float

    @property
    def valid(self) -> bool:
        return self.n_samples > 0


@njit(cache=True)
def _prim_density(px, py, pz, kinds, params, dens, soft):
    """(sigma, argmax primitive index) of the scene density field at a point."""
    best = 0.0
    best_i = -1
    for i in range(kinds.shape[0]):
        k = kinds[i]
        if k == KIND_SPHERE:
            dx = px - params[i, 0]
            dy = py - params[i, 1]
            dz = pz - params[i, 2]
            dist = math.sqrt(dx * dx + dy * dy + dz * dz)
            sd = dist - params[i, 3]
            if params[i, 4] > 0.0:  # hollow shell
                sd2 = params[i, 4] - dist
                if sd2 > sd:
                    sd = sd2
        elif k == KIND_BOX:
            qx = abs(px - params[i, 0]) - params[i, 3]
            qy = abs(py - params[i, 1]) - params[i, 4]
            qz = abs(pz - params[i, 2]) - params[i, 5]
            ox = qx if qx > 0.0 else 0.0
            oy = qy if qy > 0.0 else 0.0
            oz = qz if qz > 0.0 else 0.0
            outside = math.sqrt(ox * ox + oy * oy + oz * oz)
            mx = qx if qx > qy else qy
            if qz > mx:
                mx = qz
            inside = mx if mx < 0.0 else 0.0
            sd = outside + inside
        else:  # capsule
            ax, ay, az = params[i, 0], params[i, 1], params[i, 2]
            bx, by, bz = params[i, 3], params[i, 4], params[i, 5]
            abx, aby, abz = bx - ax, by - ay, bz - az
            denom = abx * abx + aby * aby + abz * abz
            if denom > 0.0:
                t = ((px - ax) * abx + (py - ay) * aby + (pz - az) * abz) / denom
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            else:
                t = 0.0
            cx = ax + t * abx
            cy = ay + t * aby
            cz = az + t * abz
            dx, dy, dz = px - cx, py - cy, pz - cz
            sd = math.sqrt(dx * dx + dy * dy + dz * dz) - params[i, 6]
        if soft[i] > 0.0:
            fall = 1.0 - sd / soft[i]
            if fall < 0.0:
                fall = 0.0
            elif fall > 1.0:
                fall = 1.0
        else:
            fall = 1.0 if sd <= 0.0 else 0.0
        d = dens[i] * fall
        if d > best:
            best = d
            best_i = i
    return best, best_i


@njit(cache=True)
def _march(ox, oy, oz, dx, dy, dz,
           near, far, n_steps, tau_cw, min_w,
           kinds, params, dens, cols, soft, bg):
    """March one unit-direction ray; see module docstring for semantics.

    Returns (r, g, b, d_min, d_max, d_exp, n_samples, z_surface, valid).
    """
    dt = (far - near) / n_steps
    transmittance = 1.0
    cum = 0.0
    d_min = 0.0
    have_min = False
    d_max = 0.0
    last_hit = 0.0
    w_peak = 0.0
    z_peak = 0.0
    wsum = 0.0
    wt = 0.0
    count = 0
    cr = 0.0
    cg = 0.0
    cb = 0.0
    stopped = False
    for k in range(n_steps):
        t = near + (k + 0.5) * dt
        px = ox + dx * t
        py = oy + dy * t
        pz = oz + dz * t
        sigma, pi = _prim_density(px, py, pz, kinds, params, dens, soft)
        if sigma > 0.0:
            a = 1.0 - math.exp(-sigma * dt)
        else:
            a = 0.0
        w = transmittance * a
        if w > 0.0:
            count += 1
            last_hit = t
            wsum += w
            wt += w * t
            if w > w_peak:
                w_peak = w
                z_peak = t
            cr += w * cols[pi, 0]
            cg += w * cols[pi, 1]
            cb += w * cols[pi, 2]
        cum += w
        transmittance *= (1.0 - a)
        if not have_min and cum > min_w:
            have_min = True
            d_min = t
        if cum >= tau_cw:
            d_max = t
            stopped = True
            break
    if not stopped:
        d_max = last_hit
    cr += (1.0 - cum) * bg[0]
    cg += (1.0 - cum) * bg[1]
    cb += (1.0 - cum) * bg[2]
    if not have_min:
        return cr, cg, cb, 0.0, 0.0, 0.0, 0, 0.0, False
    d_exp = wt / wsum
    if d_exp < d_min:
        d_exp = d_min
    elif d_exp > d_max:
        d_exp = d_max
    return cr, cg, cb, d_min, d_max, d_exp, count, z_peak, True


@njit(cache=True, parallel=True)
def _render(rot, pos, fx, fy, cx, cy, width, height,
            near, far, n_steps, tau_cw, min_w,
            kinds, params, dens, cols, soft, bg,
            rgb, d_min, d_max, d_exp, n_samp, z_surf):
    npix = width * height
    for p in prange(npix):
        iy = p // width
        ix = p - iy * width
        # ray through the pixel center, camera looks along -Z, +Y up
        xc = (ix + 0.5 - cx) / fx
        yc = (cy - (iy + 0.5)) / fy
        dxw = rot[0, 0] * xc + rot[0, 1] * yc - rot[0, 2]
        dyw = rot[1, 0] * xc + rot[1, 1] * yc - rot[1, 2]
        dzw = rot[2, 0] * xc + rot[2, 1] * yc - rot[2, 2]
        norm = math.sqrt(dxw * dxw + dyw * dyw + dzw * dzw)
        dxw /= norm
        dyw /= norm
        dzw /= norm
        r, g, b, dmn, dmx, dex, cnt, zp, ok = _march(
            pos[0], pos[1], pos[2], dxw, dyw, dzw,
            near, far, n_steps, tau_cw, min_w,
            kinds, params, dens, cols, soft, bg)
        rgb[iy, ix, 0] = r
        rgb[iy, ix, 1] = g
        rgb[iy, ix, 2] = b
        d_min[iy, ix] = dmn
        d_max[iy, ix] = dmx
        d_exp[iy, ix] = dex
        n_samp[iy, ix] = cnt
        z_surf[iy, ix] = zp


def march_ray(scene: SceneModel, ray: Ray, cfg: RenderConfig) -> RaySample:
    """March a single ray through the scene."""
    kinds, params, dens, cols, _oids, soft = scene.packed()
    bg = np.asarray(scene.background, dtype=np.float64)
    r, g, b, dmn, dmx, dex, cnt, zp, _ok = _march(
        ray.origin[0], ray.origin[1], ray.origin[2],
        ray.direction[0], ray.direction[1], ray.direction[2],
        cfg.near, cfg.far, cfg.samples_per_ray, cfg.tau_cw, cfg.min_weight,
        kinds, params, dens, cols, soft, bg)
    return RaySample((float(r), float(g), float(b)),
                     float(dmn), float(dmx), float(dex), int(cnt), float(zp))


def render_view(scene: SceneModel, camera: Camera, cfg: RenderConfig) -> ViewGeometry:
    """Render every pixel-center ray of a camera; deterministic."""
    h, w = camera.height, camera.width
    kinds, params, dens, cols, _oids, soft = scene.packed()
    bg = np.asarray(scene.background, dtype=np.float64)
    rgb = np.empty((h, w, 3), dtype=np.float32)
    d_min = np.empty((h, w), dtype=np.float32)
    d_max = np.empty((h, w), dtype=np.float32)
    d_exp = np.empty((h, w), dtype=np.float32)
    n_samp = np.empty((h, w), dtype=np.int32)
    z_surf = np.empty((h, w), dtype=np.float32)
    _render(np.ascontiguousarray(camera.rotation), camera.position,
            camera.fx, camera.fy, camera.cx, camera.cy, w, h,
            cfg.near, cfg.far, cfg.samples_per_ray, cfg.tau_cw, cfg.min_weight,
            kinds, params, dens, cols, soft, bg,
            rgb, d_min, d_max, d_exp, n_samp, z_surf)
    return ViewGeometry(camera, rgb, d_min, d_max, d_exp, n_samp, z_surf)
