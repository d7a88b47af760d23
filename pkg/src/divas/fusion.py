"""Data-parallel fusion of multi-view confidence masks into a voxel grid.

Per (voxel, view) pair the kernel projects the voxel center into the view,
samples the refined mask, and routes the pair down one of two paths:

* thick path: mask gate (m >= 0.5) and density gate, then ray-alignment
  and depth-consistency checks; passing pairs contribute a mask vote with
  a Gaussian depth weight.
* thin path: pairs failing the mask gate or the thick checks become thin
  candidates when the view resolves the voxel at pixel scale, the mask is
  non-trivial (> 0.1) and the voxel density clears the higher thin
  threshold; the voxel's projected 2D footprint is scanned for supportive
  pixels and scored by consistent coverage.

Final probability per voxel: (sum of thick votes + sum of accepted thin
scores) / (sum of thick weights + accepted thin count), 0 if the
denominator is negligible.  Per-voxel contributions are accumulated in
value-sorted order, which makes the result exactly invariant under
permutations of the view list, and each voxel is owned by exactly one
worker, which makes it exactly invariant under the worker count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, replace

import numpy as np

from ._nb import njit, prange, set_workers
from .geometry import Camera, SceneBounds, VoxelGrid
from .render import ViewGeometry
from .scene import DensityGrid
from .segmenter import ConfidenceMask

__all__ = [
    "FusionParams", "OccupancyGrid", "ThickPathDecision", "ThinPathDecision",
    "depth_gradient", "depth_weight", "thick_check", "thin_check",
    "fuse", "project_grid_overlay",
]

_N_CHUNKS = 512


@dataclass(frozen=True)
class FusionParams:
    """Kernel hyperparameters; fixed per scene profile.

    The numeric defaults are implementation profile values tuned on the
    bundled synthetic scenes, overridable per scene.
    """

    base_tolerance_multiplier: float = 1.5   # gamma: base depth-tolerance scale
    per_sample_bonus: float = 0.5            # beta: relaxation per depth sample
    max_bonus: float = 16.0                  # cap on the accumulated bonus
    depth_range_factor: float = 0.1          # lambda_range in the spatial tolerance
    density_thresh: float = 0.5              # minimum density for a valid voxel
    thin_density_thresh: float = 2.0         # higher density gate for thin candidates
    thin_percent_cover: float = 0.5          # footprint coverage for full credit
    depth_falloff: float = 4.0               # alpha1 in the Gaussian depth weight
    thin_accept: float = 0.6                 # minimum thin score that may vote
    eps: float = 1e-8
    mask_threshold: float = 0.5
    thin_mask_floor: float = 0.1
    grad_kappa: float = 1.0                  # steepness of the depth-gradient factor
    enable_thin: bool = True                 # ablation switch for the thin path

    def __post_init__(self):
        for name in ("base_tolerance_multiplier", "per_sample_bonus", "max_bonus",
                     "depth_range_factor", "density_thresh", "thin_density_thresh",
                     "thin_percent_cover", "depth_falloff", "eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.thin_accept < 1.0:
            raise ValueError("thin acceptance threshold must lie in (0, 1)")
        if self.mask_threshold != 0.5:
            raise ValueError("mask threshold is fixed at 0.5")

    def as_vector(self) -> np.ndarray:
        return np.array([
            self.base_tolerance_multiplier, self.per_sample_bonus, self.max_bonus,
            self.depth_range_factor, self.density_thresh, self.thin_density_thresh,
            self.thin_percent_cover, self.depth_falloff, self.thin_accept,
            self.eps, self.mask_threshold, self.thin_mask_floor, self.grad_kappa,
            1.0 if self.enable_thin else 0.0,
        ], dtype=np.float64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionParams":
        return cls(**d)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path) -> "FusionParams":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def with_overrides(self, **kw) -> "FusionParams":
        return replace(self, **kw)


@dataclass
class OccupancyGrid:
    """Fused segmentation probabilities on a VoxelGrid layout."""

    grid: VoxelGrid
    probs: np.ndarray  # (G, G, G) float64, indexed [ix, iy, iz]
    version: int = 0

    def __post_init__(self):
        g = self.grid.resolution
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(g, g, g)

    def check(self):
        assert np.all(np.isfinite(self.probs))
        assert self.probs.min() >= 0.0 and self.probs.max() <= 1.0


@dataclass
class ThickPathDecision:
    """Trace record for one (voxel, view) thick-path evaluation."""

    voxel: tuple
    view: int
    stage: str  # passed | frustum | no-surface | mask-gate | density-gate | spatial | depth
    m: float = 0.0
    delta: float = 0.0
    g: float = 0.0
    tau_spatial: float = 0.0
    tau_depth: float = 0.0
    t_proj: float = 0.0
    t_clamped: float = 0.0
    x_d: float = 0.0
    mu_d: float = 0.0
    h_d: float = 0.0
    r: float = 0.0
    w_depth: float = 0.0


@dataclass
class ThinPathDecision:
    """Trace record for one (voxel, view) thin-path evaluation."""

    voxel: tuple
    view: int
    candidate: bool
    x_start: int = 0
    x_end: int = -1
    y_start: int = 0
    y_end: int = -1
    support_count: int = 0
    n_pixels: int = 0
    p_covered: float = 0.0
    m_max: float = 0.0
    t: float = 0.0


# ---------------------------------------------------------------------------
# njit scalar helpers; the parallel kernel, the traced path and the public
# per-pair operations all run exactly this arithmetic.
# ---------------------------------------------------------------------------

@njit(cache=True)
def _project_px(rot, pos, fx, fy, cx, cy, w, h, px, py, pz):
    """Normalized image coords of a world point. Returns (u, v, in_front, depth)."""
    relx = px - pos[0]
    rely = py - pos[1]
    relz = pz - pos[2]
    zc = rot[0, 2] * relx + rot[1, 2] * rely + rot[2, 2] * relz
    d = -zc
    if d <= 0.0:
        return -1.0, -1.0, False, d
    xc = rot[0, 0] * relx + rot[1, 0] * rely + rot[2, 0] * relz
    yc = rot[0, 1] * relx + rot[1, 1] * rely + rot[2, 1] * relz
    u = (fx * (xc / d) + cx) / w
    v = (cy - fy * (yc / d)) / h
    return u, v, True, d


@njit(cache=True)
def _pixel_index(u, n):
    i = int(math.floor(u * n))
    if i > n - 1:
        i = n - 1
    return i


@njit(cache=True)
def _grad_at(d_exp, d_min, d_max, ix, iy, eps, kappa):
    """Depth-gradient factor g in [0, 1): high on flat depth, low at edges.

    The local relative gradient is the max absolute d_exp step to the
    4-neighborhood, normalized by the pixel's own depth range; border
    neighbors are skipped, invalid neighbors enter at their encoded 0.
    """
    h, w = d_exp.shape
    center = d_exp[iy, ix]
    rng = d_max[iy, ix] - d_min[iy, ix] + eps
    gmax = 0.0
    if ix > 0:
        s = abs(d_exp[iy, ix - 1] - center) / rng
        if s > gmax:
            gmax = s
    if ix < w - 1:
        s = abs(d_exp[iy, ix + 1] - center) / rng
        if s > gmax:
            gmax = s
    if iy > 0:
        s = abs(d_exp[iy - 1, ix] - center) / rng
        if s > gmax:
            gmax = s
    if iy < h - 1:
        s = abs(d_exp[iy + 1, ix] - center) / rng
        if s > gmax:
            gmax = s
    g = 1.0 / (1.0 + kappa * gmax)
    hi = 1.0 - eps
    if g > hi:
        g = hi
    if g < 0.0:
        g = 0.0
    return g


@njit(cache=True)
def _gradient_map(d_exp, d_min, d_max, valid, eps, kappa, out):
    h, w = d_exp.shape
    for iy in range(h):
        for ix in range(w):
            if valid[iy, ix] != 0:
                out[iy, ix] = _grad_at(d_exp, d_min, d_max, ix, iy, eps, kappa)
            else:
                out[iy, ix] = 0.0


@njit(cache=True)
def _contract_pt(px, py, pz, bc, bh, unbounded):
    if unbounded == 0:
        return px, py, pz
    nx = (px - bc[0]) / bh[0]
    ny = (py - bc[1]) / bh[1]
    nz = (pz - bc[2]) / bh[2]
    r = math.sqrt(nx * nx + ny * ny + nz * nz)
    if r <= 1.0:
        return px, py, pz
    s = (2.0 - 1.0 / r) / r
    return bc[0] + nx * s * bh[0], bc[1] + ny * s * bh[1], bc[2] + nz * s * bh[2]


@njit(cache=True)
def _thick_pair(xc0, xc1, xc2, rot, pos, fx, fy, cx, cy, w, h,
                u, v, x_d, dmin, dmax, dexp, nsamp, g, dx_vox,
                gamma, beta, bmax, lam, alpha1, eps,
                bc, bh, unbounded):
    """Thick-path geometric checks for one (voxel, view) pair.

    Gates (mask, density) are the caller's job.  Returns
    (ok, delta, tau_spatial, tau_depth, t_proj, t_clamped, mu_d, h_d, r, w_depth).
    """
    # ray through the exact projected coordinates of the voxel center
    rx = (u * w - cx) / fx
    ry = (cy - v * h) / fy
    ddx = rot[0, 0] * rx + rot[0, 1] * ry - rot[0, 2]
    ddy = rot[1, 0] * rx + rot[1, 1] * ry - rot[1, 2]
    ddz = rot[2, 0] * rx + rot[2, 1] * ry - rot[2, 2]
    norm = math.sqrt(ddx * ddx + ddy * ddy + ddz * ddz)
    ddx /= norm
    ddy /= norm
    ddz /= norm
    t_proj = ((xc0 - pos[0]) * ddx + (xc1 - pos[1]) * ddy + (xc2 - pos[2]) * ddz)
    t_c = t_proj
    if t_c < dmin:
        t_c = dmin
    elif t_c > dmax:
        t_c = dmax
    pcx = pos[0] + ddx * t_c
    pcy = pos[1] + ddy * t_c
    pcz = pos[2] + ddz * t_c
    pcx, pcy, pcz = _contract_pt(pcx, pcy, pcz, bc, bh, unbounded)
    dx = xc0 - pcx
    dy = xc1 - pcy
    dz = xc2 - pcz
    delta = math.sqrt(dx * dx + dy * dy + dz * dz)
    tau_sp = dx_vox * g + lam * (dmax - dmin)
    b = beta * nsamp
    if b > bmax:
        b = bmax
    tau_dp = (gamma + b) * dx_vox
    ok = delta <= tau_sp and abs(x_d - dexp) <= tau_dp
    mu = 0.5 * (dmin + dmax)
    hd = 0.5 * (dmax - dmin)
    if hd < eps:
        hd = eps
    r = abs(t_c - mu) / hd
    wd = math.exp(-alpha1 * r * r)
    return ok, delta, tau_sp, tau_dp, t_proj, t_c, mu, hd, r, wd


@njit(cache=True)
def _thin_pair(xc0, xc1, xc2, rot, pos, fx, fy, cx, cy, w, h,
               x_d, mask, dexp, nsamp, valid, dx_vox,
               gamma, beta, bmax, thin_pct):
    """Thin-path footprint scan for one (voxel, view) pair.

    Returns (ok_footprint, x_start, x_end, y_start, y_end, support, n_pixels,
    p_covered, m_max, t).
    """
    half = 0.5 * dx_vox
    umin = 1e30
    umax = -1e30
    vmin = 1e30
    vmax = -1e30
    for j in range(8):
        sx = -1.0 if (j & 1) == 0 else 1.0
        sy = -1.0 if (j & 2) == 0 else 1.0
        sz = -1.0 if (j & 4) == 0 else 1.0
        cu, cv, ok, _d = _project_px(rot, pos, fx, fy, cx, cy, w, h,
                                     xc0 + sx * half, xc1 + sy * half, xc2 + sz * half)
        if not ok:
            return False, 0, -1, 0, -1, 0, 0, 0.0, 0.0, 0.0
        if cu < umin:
            umin = cu
        if cu > umax:
            umax = cu
        if cv < vmin:
            vmin = cv
        if cv > vmax:
            vmax = cv
    wi = int(w)
    hi = int(h)
    xs = int(math.floor(umin * w))
    xe = int(math.floor(umax * w))
    ys = int(math.floor(vmin * h))
    ye = int(math.floor(vmax * h))
    if xe < 0 or xs > wi - 1 or ye < 0 or ys > hi - 1:
        return False, 0, -1, 0, -1, 0, 0, 0.0, 0.0, 0.0
    if xs < 0:
        xs = 0
    if ys < 0:
        ys = 0
    if xe > wi - 1:
        xe = wi - 1
    if ye > hi - 1:
        ye = hi - 1
    support = 0
    npix = 0
    m_max = 0.0
    for yy in range(ys, ye + 1):
        for xx in range(xs, xe + 1):
            npix += 1
            mv = mask[yy, xx]
            if mv > m_max:
                m_max = mv
            if mv > 0.5 and valid[yy, xx] != 0:
                b = beta * nsamp[yy, xx]
                if b > bmax:
                    b = bmax
                tau_d = (2.0 * gamma + b) * dx_vox
                if abs(x_d - dexp[yy, xx]) <= tau_d:
                    support += 1
    p_cov = support / npix
    t = m_max if p_cov >= thin_pct else p_cov
    return True, xs, xe, ys, ye, support, npix, p_cov, m_max, t


@njit(cache=True)
def _sorted_sum(values, n):
    """Sum the first n entries in ascending order (permutation-stable)."""
    for i in range(1, n):
        key = values[i]
        j = i - 1
        while j >= 0 and values[j] > key:
            values[j + 1] = values[j]
            j -= 1
        values[j + 1] = key
    s = 0.0
    for i in range(n):
        s += values[i]
    return s


@njit(cache=True)
def _sorted_sum_pairs(w, mw, n):
    """Sort (w, mw) pairs lexicographically and sum each; returns (sum_w, sum_mw)."""
    for i in range(1, n):
        kw = w[i]
        km = mw[i]
        j = i - 1
        while j >= 0 and (w[j] > kw or (w[j] == kw and mw[j] > km)):
            w[j + 1] = w[j]
            mw[j + 1] = mw[j]
            j -= 1
        w[j + 1] = kw
        mw[j + 1] = km
    sw = 0.0
    sm = 0.0
    for i in range(n):
        sw += w[i]
        sm += mw[i]
    return sw, sm


@njit(cache=True)
def _voxel_views(vi, g, origin, dx_vox, rho,
                 rots, poss, intr, masks, dmins, dmaxs, dexps, nsamps, valids,
                 gmaps, pv, bc, bh, unbounded, tw, tmw, tt):
    """Accumulate all view contributions for one voxel.

    Fills the scratch arrays tw/tmw (thick) and tt (thin); returns the
    voxel's fused probability.
    """
    gamma = pv[0]
    beta = pv[1]
    bmax = pv[2]
    lam = pv[3]
    rho_thr = pv[4]
    rho_thin = pv[5]
    thin_pct = pv[6]
    alpha1 = pv[7]
    thin_accept = pv[8]
    eps = pv[9]
    mask_thr = pv[10]
    thin_floor = pv[11]
    enable_thin = pv[13] != 0.0
    gg = g * g
    ix = vi // gg
    rem = vi - ix * gg
    iy = rem // g
    iz = rem - iy * g
    xc0 = origin[0] + (ix + 0.5) * dx_vox
    xc1 = origin[1] + (iy + 0.5) * dx_vox
    xc2 = origin[2] + (iz + 0.5) * dx_vox
    n_thick = 0
    n_thin = 0
    nv = rots.shape[0]
    for view in range(nv):
        fx = intr[view, 0]
        fy = intr[view, 1]
        cx = intr[view, 2]
        cy = intr[view, 3]
        w = intr[view, 4]
        h = intr[view, 5]
        rot = rots[view]
        pos = poss[view]
        u, v, infront, x_d = _project_px(rot, pos, fx, fy, cx, cy, w, h,
                                         xc0, xc1, xc2)
        if not infront or u < 0.0 or u >= 1.0 or v < 0.0 or v >= 1.0:
            continue
        px = _pixel_index(u, int(w))
        py = _pixel_index(v, int(h))
        if valids[view, py, px] == 0:
            continue
        m = masks[view, py, px]
        routed_thick = False
        if m >= mask_thr and rho >= rho_thr:
            ok, _dl, _ts, _td, _tp, t_c, _mu, _hd, _r, wd = _thick_pair(
                xc0, xc1, xc2, rot, pos, fx, fy, cx, cy, w, h,
                u, v, x_d, dmins[view, py, px], dmaxs[view, py, px],
                dexps[view, py, px], nsamps[view, py, px],
                gmaps[view, py, px], dx_vox,
                gamma, beta, bmax, lam, alpha1, eps, bc, bh, unbounded)
            if ok:
                tw[n_thick] = wd
                tmw[n_thick] = m * wd
                n_thick += 1
                routed_thick = True
        if not routed_thick and enable_thin:
            fmax = fx if fx > fy else fy
            if (m > thin_floor and rho >= rho_thin
                    and x_d > 0.0 and dx_vox * fmax / x_d >= 1.0):
                okf, _xs, _xe, _ys, _ye, _sup, npix, _pc, _mm, t = _thin_pair(
                    xc0, xc1, xc2, rot, pos, fx, fy, cx, cy, w, h,
                    x_d, masks[view], dexps[view], nsamps[view], valids[view],
                    dx_vox, gamma, beta, bmax, thin_pct)
                if okf and npix > 0 and t >= thin_accept:
                    tt[n_thin] = t
                    n_thin += 1
    sw, smw = _sorted_sum_pairs(tw, tmw, n_thick)
    st = _sorted_sum(tt, n_thin)
    denom = sw + n_thin
    if denom > eps:
        return (smw + st) / denom
    return 0.0


@njit(cache=True, parallel=True)
def _fuse_kernel(g, origin, dx_vox, density,
                 rots, poss, intr, masks, dmins, dmaxs, dexps, nsamps, valids,
                 gmaps, pv, bc, bh, unbounded, n_chunks, out):
    nvox = g * g * g
    nv = rots.shape[0]
    for c in prange(n_chunks):
        lo = c * nvox // n_chunks
        hi = (c + 1) * nvox // n_chunks
        tw = np.empty(nv, dtype=np.float64)
        tmw = np.empty(nv, dtype=np.float64)
        tt = np.empty(nv, dtype=np.float64)
        for vi in range(lo, hi):
            out[vi] = _voxel_views(vi, g, origin, dx_vox, density[vi],
                                   rots, poss, intr, masks, dmins, dmaxs,
                                   dexps, nsamps, valids, gmaps, pv,
                                   bc, bh, unbounded, tw, tmw, tt)


# ---------------------------------------------------------------------------
# public per-pair operations (also the building blocks of the traced path)
# ---------------------------------------------------------------------------

def depth_gradient(view: ViewGeometry, pixel, eps: float = 1e-8,
                   kappa: float = 1.0) -> float:
    """Depth-gradient factor g in [0, 1) at a valid pixel."""
    ix, iy = int(pixel[0]), int(pixel[1])
    return float(_grad_at(view.d_exp, view.d_min, view.d_max, ix, iy, eps, kappa))


def depth_weight(t_clamped: float, d_min: float, d_max: float,
                 alpha1: float, eps: float = 1e-8) -> float:
    """Gaussian depth weight around the midpoint of [d_min, d_max]."""
    if d_min > d_max:
        raise ValueError("d_min must not exceed d_max")
    mu = 0.5 * (d_min + d_max)
    hd = max(0.5 * (d_max - d_min), eps)
    r = abs(t_clamped - mu) / hd
    return math.exp(-alpha1 * r * r)


def _cam_arrays(camera: Camera):
    rot = np.ascontiguousarray(camera.rotation)
    pos = np.ascontiguousarray(camera.position)
    intr = (camera.fx, camera.fy, camera.cx, camera.cy,
            float(camera.width), float(camera.height))
    return rot, pos, intr


def _bounds_arrays(bounds):
    if bounds is None or not bounds.unbounded:
        return np.zeros(3), np.ones(3), 0
    return (np.ascontiguousarray(bounds.center),
            np.ascontiguousarray(bounds.half), 1)


def thick_check(voxel_center, voxel_size: float, rho: float,
                view: ViewGeometry, mask: ConfidenceMask,
                params: FusionParams, bounds: SceneBounds = None,
                voxel_index=(0, 0, 0), view_index: int = 0):
    """Evaluate the thick path for one voxel against one view.

    Returns (passed, ThickPathDecision); the decision record carries every
    intermediate quantity for tracing.
    """
    xc = np.asarray(voxel_center, dtype=np.float64)
    rot, pos, (fx, fy, cx, cy, w, h) = _cam_arrays(view.camera)
    bc, bh, unb = _bounds_arrays(bounds)
    dec = ThickPathDecision(voxel=tuple(voxel_index), view=view_index, stage="frustum")
    u, v, infront, x_d = _project_px(rot, pos, fx, fy, cx, cy, w, h,
                                     xc[0], xc[1], xc[2])
    if not infront or not (0.0 <= u < 1.0 and 0.0 <= v < 1.0):
        return False, dec
    px = _pixel_index(u, int(w))
    py = _pixel_index(v, int(h))
    if view.n_samples[py, px] <= 0:
        dec.stage = "no-surface"
        return False, dec
    m = float(mask.values[py, px])
    dec.m = m
    dec.x_d = x_d
    if m < params.mask_threshold:
        dec.stage = "mask-gate"
        return False, dec
    if rho < params.density_thresh:
        dec.stage = "density-gate"
        return False, dec
    g = float(_grad_at(view.d_exp, view.d_min, view.d_max, px, py,
                       params.eps, params.grad_kappa))
    ok, delta, tau_sp, tau_dp, t_proj, t_c, mu, hd, r, wd = _thick_pair(
        xc[0], xc[1], xc[2], rot, pos, fx, fy, cx, cy, w, h,
        u, v, x_d, float(view.d_min[py, px]), float(view.d_max[py, px]),
        float(view.d_exp[py, px]), float(view.n_samples[py, px]), g,
        voxel_size, params.base_tolerance_multiplier, params.per_sample_bonus,
        params.max_bonus, params.depth_range_factor, params.depth_falloff,
        params.eps, bc, bh, unb)
    dec.delta = delta
    dec.g = g
    dec.tau_spatial = tau_sp
    dec.tau_depth = tau_dp
    dec.t_proj = t_proj
    dec.t_clamped = t_c
    dec.mu_d = mu
    dec.h_d = hd
    dec.r = r
    dec.w_depth = wd
    if not ok:
        dec.stage = "spatial" if delta > tau_sp else "depth"
        return False, dec
    dec.stage = "passed"
    return True, dec


def thin_check(voxel_center, voxel_size: float, rho: float,
               view: ViewGeometry, mask: ConfidenceMask,
               params: FusionParams, voxel_index=(0, 0, 0), view_index: int = 0):
    """Evaluate the thin path for one voxel against one view.

    Candidacy requires a close/zoomed view (the voxel spans at least one
    pixel), a non-trivial mask value at the center pixel, and density above
    the thin threshold.  Returns a ThinPathDecision with the score t.
    """
    xc = np.asarray(voxel_center, dtype=np.float64)
    rot, pos, (fx, fy, cx, cy, w, h) = _cam_arrays(view.camera)
    dec = ThinPathDecision(voxel=tuple(voxel_index), view=view_index, candidate=False)
    u, v, infront, x_d = _project_px(rot, pos, fx, fy, cx, cy, w, h,
                                     xc[0], xc[1], xc[2])
    if not infront or not (0.0 <= u < 1.0 and 0.0 <= v < 1.0):
        return dec
    px = _pixel_index(u, int(w))
    py = _pixel_index(v, int(h))
    if view.n_samples[py, px] <= 0:
        return dec
    m = float(mask.values[py, px])
    fmax = max(fx, fy)
    if not (m > params.thin_mask_floor and rho >= params.thin_density_thresh
            and x_d > 0.0 and voxel_size * fmax / x_d >= 1.0):
        return dec
    okf, xs, xe, ys, ye, sup, npix, p_cov, m_max, t = _thin_pair(
        xc[0], xc[1], xc[2], rot, pos, fx, fy, cx, cy, w, h,
        x_d, mask.values, view.d_exp, view.n_samples,
        view.valid.astype(np.uint8), voxel_size,
        params.base_tolerance_multiplier, params.per_sample_bonus,
        params.max_bonus, params.thin_percent_cover)
    if not okf:
        return dec
    dec.candidate = True
    dec.x_start, dec.x_end, dec.y_start, dec.y_end = xs, xe, ys, ye
    dec.support_count = sup
    dec.n_pixels = npix
    dec.p_covered = p_cov
    dec.m_max = m_max
    dec.t = t
    return dec


# ---------------------------------------------------------------------------
# fuse
# ---------------------------------------------------------------------------

def _pack_views(views):
    cams = [vg.camera for vg, _m in views]
    hmax = max(c.height for c in cams)
    wmax = max(c.width for c in cams)
    nv = len(views)
    rots = np.zeros((nv, 3, 3))
    poss = np.zeros((nv, 3))
    intr = np.zeros((nv, 6))
    masks = np.zeros((nv, hmax, wmax), dtype=np.float32)
    dmins = np.zeros((nv, hmax, wmax), dtype=np.float32)
    dmaxs = np.zeros((nv, hmax, wmax), dtype=np.float32)
    dexps = np.zeros((nv, hmax, wmax), dtype=np.float32)
    nsamps = np.zeros((nv, hmax, wmax), dtype=np.int32)
    valids = np.zeros((nv, hmax, wmax), dtype=np.uint8)
    for i, (vg, m) in enumerate(views):
        c = vg.camera
        if m.shape != (c.height, c.width):
            raise ValueError("mask and view dimensions differ")
        rots[i] = c.rotation
        poss[i] = c.position
        intr[i] = (c.fx, c.fy, c.cx, c.cy, float(c.width), float(c.height))
        sl = np.s_[i, :c.height, :c.width]
        masks[sl] = m.values
        dmins[sl] = vg.d_min
        dmaxs[sl] = vg.d_max
        dexps[sl] = vg.d_exp
        nsamps[sl] = vg.n_samples
        valids[sl] = vg.valid
    return rots, poss, intr, masks, dmins, dmaxs, dexps, nsamps, valids


def _gradient_maps(dexps, dmins, dmaxs, valids, eps, kappa):
    nv, h, w = dexps.shape
    out = np.zeros((nv, h, w), dtype=np.float64)
    for i in range(nv):
        _gradient_map(dexps[i], dmins[i], dmaxs[i], valids[i], eps, kappa, out[i])
    return out


def fuse(grid: VoxelGrid, density: DensityGrid, views, params: FusionParams,
         bounds: SceneBounds = None, workers: int = None,
         trace_path=None) -> OccupancyGrid:
    """Fuse refined multi-view masks into an occupancy grid.

    `views` is a list of (ViewGeometry, ConfidenceMask) pairs.  With
    `trace_path` set, a slower traced execution writes one JSON line per
    (voxel, view) decision; its output grid is identical to the kernel's.
    """
    if density.grid.resolution != grid.resolution or \
            not np.allclose(density.grid.origin, grid.origin) or \
            density.grid.half_extents != grid.half_extents:
        raise ValueError("density grid layout does not match the fusion grid")
    g = grid.resolution
    if not views:
        return OccupancyGrid(grid, np.zeros((g, g, g)))
    packed = _pack_views(views)
    rots, poss, intr, masks, dmins, dmaxs, dexps, nsamps, valids = packed
    pv = params.as_vector()
    gmaps = _gradient_maps(dexps, dmins, dmaxs, valids, params.eps, params.grad_kappa)
    bc, bh, unb = _bounds_arrays(bounds)
    if workers is not None:
        set_workers(workers)
    if trace_path is not None:
        probs = _fuse_traced(grid, density, views, params, bounds, trace_path)
        return OccupancyGrid(grid, probs)
    out = np.zeros(g * g * g, dtype=np.float64)
    dens_flat = np.ascontiguousarray(density.values, dtype=np.float32).ravel()
    _fuse_kernel(g, np.ascontiguousarray(grid.origin), grid.voxel_size(),
                 dens_flat, rots, poss, intr, masks, dmins, dmaxs, dexps,
                 nsamps, valids, gmaps, pv, bc, bh, unb,
                 min(_N_CHUNKS, g * g * g), out)
    return OccupancyGrid(grid, out.reshape(g, g, g))


def _fuse_traced(grid, density, views, params, bounds, trace_path):
    """Python execution of the kernel semantics, one trace line per decision."""
    g = grid.resolution
    dx_vox = grid.voxel_size()
    probs = np.zeros((g, g, g))
    dens = density.values
    with open(trace_path, "w") as out:
        for ix in range(g):
            for iy in range(g):
                for iz in range(g):
                    xc = grid.index_to_center((ix, iy, iz))
                    rho = float(dens[ix, iy, iz])
                    tw, tmw, tt = [], [], []
                    for view_i, (vg, m) in enumerate(views):
                        passed, dec = thick_check(
                            xc, dx_vox, rho, vg, m, params, bounds,
                            voxel_index=(ix, iy, iz), view_index=view_i)
                        if dec.stage not in ("frustum", "no-surface"):
                            out.write(json.dumps({"path": "thick", **asdict(dec)}) + "\n")
                        if passed:
                            tw.append(dec.w_depth)
                            tmw.append(dec.m * dec.w_depth)
                            continue
                        if dec.stage in ("frustum", "no-surface") or not params.enable_thin:
                            continue
                        tdec = thin_check(xc, dx_vox, rho, vg, m, params,
                                          voxel_index=(ix, iy, iz), view_index=view_i)
                        if tdec.candidate:
                            out.write(json.dumps({"path": "thin", **asdict(tdec)}) + "\n")
                            if tdec.n_pixels > 0 and tdec.t >= params.thin_accept:
                                tt.append(tdec.t)
                    order = sorted(range(len(tw)), key=lambda k: (tw[k], tmw[k]))
                    sw = sum(tw[k] for k in order)
                    smw = sum(tmw[k] for k in order)
                    st = sum(sorted(tt))
                    denom = sw + len(tt)
                    probs[ix, iy, iz] = (smw + st) / denom if denom > params.eps else 0.0
    return probs


# ---------------------------------------------------------------------------
# overlay projection
# ---------------------------------------------------------------------------

@njit(cache=True, parallel=True)
def _overlay_kernel(rot, pos, fx, fy, cx, cy, width, height,
                    dmin, dmax, valid, probs, g, origin, dx_vox,
                    bc, bh, unbounded, threshold, step, out):
    for p in prange(width * height):
        iy = p // width
        ix = p - iy * width
        xc = (ix + 0.5 - cx) / fx
        yc = (cy - (iy + 0.5)) / fy
        ddx = rot[0, 0] * xc + rot[0, 1] * yc - rot[0, 2]
        ddy = rot[1, 0] * xc + rot[1, 1] * yc - rot[1, 2]
        ddz = rot[2, 0] * xc + rot[2, 1] * yc - rot[2, 2]
        norm = math.sqrt(ddx * ddx + ddy * ddy + ddz * ddz)
        ddx /= norm
        ddy /= norm
        ddz /= norm
        if valid[iy, ix] != 0:
            # pad by one voxel: fused bands extend one spatial tolerance
            # beyond the surface corridor, and degenerate corridors would
            # otherwise sample a single point
            t0 = dmin[iy, ix] - dx_vox
            if t0 < 0.0:
                t0 = 0.0
            t1 = dmax[iy, ix] + dx_vox
        else:
            # march the segment where the ray crosses the grid box
            t0 = 0.0
            t1 = 1e30
            for ax in range(3):
                if ax == 0:
                    o, d = pos[0], ddx
                elif ax == 1:
                    o, d = pos[1], ddy
                else:
                    o, d = pos[2], ddz
                lo = origin[ax]
                hi = origin[ax] + g * dx_vox
                if abs(d) < 1e-12:
                    if o < lo or o > hi:
                        t1 = -1.0
                        break
                else:
                    ta = (lo - o) / d
                    tb = (hi - o) / d
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t0:
                        t0 = ta
                    if tb < t1:
                        t1 = tb
            if t1 < t0:
                out[iy, ix] = 0
                continue
        hit = 0
        n = int((t1 - t0) / step) + 1
        for i in range(n + 1):
            t = t0 + i * step
            if t > t1:
                t = t1
            px = pos[0] + ddx * t
            py = pos[1] + ddy * t
            pz = pos[2] + ddz * t
            px, py, pz = _contract_pt(px, py, pz, bc, bh, unbounded)
            gx = int(math.floor((px - origin[0]) / dx_vox))
            gy = int(math.floor((py - origin[1]) / dx_vox))
            gz = int(math.floor((pz - origin[2]) / dx_vox))
            if 0 <= gx < g and 0 <= gy < g and 0 <= gz < g:
                if probs[gx, gy, gz] >= threshold:
                    hit = 1
                    break
            if t >= t1:
                break
        out[iy, ix] = hit


def project_grid_overlay(ogrid: OccupancyGrid, view: ViewGeometry,
                         threshold: float = 0.5,
                         bounds: SceneBounds = None) -> np.ndarray:
    """Binary 2D mask: pixels whose ray meets a voxel with p >= threshold.

    Valid pixels march their [d_min, d_max] surface interval; pixels with
    no surface march the ray's intersection with the grid box.
    """
    cam = view.camera
    out = np.zeros((cam.height, cam.width), dtype=np.uint8)
    bc, bh, unb = _bounds_arrays(bounds)
    step = 0.5 * ogrid.grid.voxel_size()
    _overlay_kernel(np.ascontiguousarray(cam.rotation), cam.position,
                    cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
                    view.d_min, view.d_max, view.valid.astype(np.uint8),
                    ogrid.probs, ogrid.grid.resolution,
                    np.ascontiguousarray(ogrid.grid.origin),
                    ogrid.grid.voxel_size(), bc, bh, unb,
                    threshold, step, out)
    return out.astype(bool)
