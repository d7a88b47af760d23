"""Single-worker brute-force fusion used as the oracle for the fast kernel.

Everything is recomputed per (voxel, view) pair in one naive triple loop
(voxels, views, footprint pixels) with no precomputation and no shared code
with the production kernel beyond the numeric contract it implements.
"""

from __future__ import annotations

import math

import numpy as np

from ._nb import njit
from .fusion import FusionParams, OccupancyGrid
from .geometry import SceneBounds, VoxelGrid
from .scene import DensityGrid

__all__ = ["fuse_reference"]


@njit(cache=True)
def _ref_kernel(g, origin, dx_vox, density,
                rots, poss, intr, masks, dmins, dmaxs, dexps, nsamps, valids,
                pv, bc, bh, unbounded, out):
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
    kappa = pv[12]
    enable_thin = pv[13] != 0.0
    nv = rots.shape[0]
    for ix in range(g):
        for iy in range(g):
            for iz in range(g):
                xc0 = origin[0] + (ix + 0.5) * dx_vox
                xc1 = origin[1] + (iy + 0.5) * dx_vox
                xc2 = origin[2] + (iz + 0.5) * dx_vox
                rho = density[ix, iy, iz]
                sum_w = 0.0
                sum_mw = 0.0
                sum_t = 0.0
                n_thin = 0
                for view in range(nv):
                    fx = intr[view, 0]
                    fy = intr[view, 1]
                    cx = intr[view, 2]
                    cy = intr[view, 3]
                    w = intr[view, 4]
                    h = intr[view, 5]
                    wi = int(w)
                    hi = int(h)
                    # world -> camera, camera looks along -Z
                    relx = xc0 - poss[view, 0]
                    rely = xc1 - poss[view, 1]
                    relz = xc2 - poss[view, 2]
                    zc = (rots[view, 0, 2] * relx + rots[view, 1, 2] * rely
                          + rots[view, 2, 2] * relz)
                    depth = -zc
                    if depth <= 0.0:
                        continue
                    xcam = (rots[view, 0, 0] * relx + rots[view, 1, 0] * rely
                            + rots[view, 2, 0] * relz)
                    ycam = (rots[view, 0, 1] * relx + rots[view, 1, 1] * rely
                            + rots[view, 2, 1] * relz)
                    u = (fx * (xcam / depth) + cx) / w
                    v = (cy - fy * (ycam / depth)) / h
                    if u < 0.0 or u >= 1.0 or v < 0.0 or v >= 1.0:
                        continue
                    px = int(math.floor(u * w))
                    if px > wi - 1:
                        px = wi - 1
                    py = int(math.floor(v * h))
                    if py > hi - 1:
                        py = hi - 1
                    if valids[view, py, px] == 0:
                        continue
                    m = masks[view, py, px]
                    thick_ok = False
                    if m >= mask_thr and rho >= rho_thr:
                        dmin = dmins[view, py, px]
                        dmax = dmaxs[view, py, px]
                        dexp = dexps[view, py, px]
                        nsmp = nsamps[view, py, px]
                        # depth-gradient factor from the raw maps
                        center = dexps[view, py, px]
                        rng = dmax - dmin + eps
                        gmax = 0.0
                        if px > 0:
                            s = abs(dexps[view, py, px - 1] - center) / rng
                            if s > gmax:
                                gmax = s
                        if px < wi - 1:
                            s = abs(dexps[view, py, px + 1] - center) / rng
                            if s > gmax:
                                gmax = s
                        if py > 0:
                            s = abs(dexps[view, py - 1, px] - center) / rng
                            if s > gmax:
                                gmax = s
                        if py < hi - 1:
                            s = abs(dexps[view, py + 1, px] - center) / rng
                            if s > gmax:
                                gmax = s
                        grad = 1.0 / (1.0 + kappa * gmax)
                        if grad > 1.0 - eps:
                            grad = 1.0 - eps
                        if grad < 0.0:
                            grad = 0.0
                        # ray through the exact projected coordinates
                        rx = (u * w - cx) / fx
                        ry = (cy - v * h) / fy
                        ddx = (rots[view, 0, 0] * rx + rots[view, 0, 1] * ry
                               - rots[view, 0, 2])
                        ddy = (rots[view, 1, 0] * rx + rots[view, 1, 1] * ry
                               - rots[view, 1, 2])
                        ddz = (rots[view, 2, 0] * rx + rots[view, 2, 1] * ry
                               - rots[view, 2, 2])
                        dn = math.sqrt(ddx * ddx + ddy * ddy + ddz * ddz)
                        ddx /= dn
                        ddy /= dn
                        ddz /= dn
                        t_proj = relx * ddx + rely * ddy + relz * ddz
                        t_c = t_proj
                        if t_c < dmin:
                            t_c = dmin
                        elif t_c > dmax:
                            t_c = dmax
                        pcx = poss[view, 0] + ddx * t_c
                        pcy = poss[view, 1] + ddy * t_c
                        pcz = poss[view, 2] + ddz * t_c
                        if unbounded != 0:
                            nx = (pcx - bc[0]) / bh[0]
                            ny = (pcy - bc[1]) / bh[1]
                            nz = (pcz - bc[2]) / bh[2]
                            rr = math.sqrt(nx * nx + ny * ny + nz * nz)
                            if rr > 1.0:
                                sc = (2.0 - 1.0 / rr) / rr
                                pcx = bc[0] + nx * sc * bh[0]
                                pcy = bc[1] + ny * sc * bh[1]
                                pcz = bc[2] + nz * sc * bh[2]
                        ex = xc0 - pcx
                        ey = xc1 - pcy
                        ez = xc2 - pcz
                        delta = math.sqrt(ex * ex + ey * ey + ez * ez)
                        tau_sp = dx_vox * grad + lam * (dmax - dmin)
                        bon = beta * nsmp
                        if bon > bmax:
                            bon = bmax
                        tau_dp = (gamma + bon) * dx_vox
                        if delta <= tau_sp and abs(depth - dexp) <= tau_dp:
                            mu = 0.5 * (dmin + dmax)
                            hd = 0.5 * (dmax - dmin)
                            if hd < eps:
                                hd = eps
                            r = abs(t_c - mu) / hd
                            wd = math.exp(-alpha1 * r * r)
                            sum_w += wd
                            sum_mw += m * wd
                            thick_ok = True
                    if thick_ok or not enable_thin:
                        continue
                    fmx = fx if fx > fy else fy
                    if not (m > thin_floor and rho >= rho_thin
                            and dx_vox * fmx / depth >= 1.0):
                        continue
                    # project the eight voxel corners for the 2D footprint
                    umin = 1e30
                    umax = -1e30
                    vmin = 1e30
                    vmax = -1e30
                    behind = False
                    half = 0.5 * dx_vox
                    for cix in range(8):
                        ox = xc0 + (half if (cix & 1) else -half)
                        oy = xc1 + (half if (cix & 2) else -half)
                        oz = xc2 + (half if (cix & 4) else -half)
                        crx = ox - poss[view, 0]
                        cry = oy - poss[view, 1]
                        crz = oz - poss[view, 2]
                        czc = (rots[view, 0, 2] * crx + rots[view, 1, 2] * cry
                               + rots[view, 2, 2] * crz)
                        cd = -czc
                        if cd <= 0.0:
                            behind = True
                            break
                        cxc = (rots[view, 0, 0] * crx + rots[view, 1, 0] * cry
                               + rots[view, 2, 0] * crz)
                        cyc = (rots[view, 0, 1] * crx + rots[view, 1, 1] * cry
                               + rots[view, 2, 1] * crz)
                        cu = (fx * (cxc / cd) + cx) / w
                        cv = (cy - fy * (cyc / cd)) / h
                        if cu < umin:
                            umin = cu
                        if cu > umax:
                            umax = cu
                        if cv < vmin:
                            vmin = cv
                        if cv > vmax:
                            vmax = cv
                    if behind:
                        continue
                    xs = int(math.floor(umin * w))
                    xe = int(math.floor(umax * w))
                    ys = int(math.floor(vmin * h))
                    ye = int(math.floor(vmax * h))
                    if xe < 0 or xs > wi - 1 or ye < 0 or ys > hi - 1:
                        continue
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
                            mv = masks[view, yy, xx]
                            if mv > m_max:
                                m_max = mv
                            if mv > 0.5 and valids[view, yy, xx] != 0:
                                bon = beta * nsamps[view, yy, xx]
                                if bon > bmax:
                                    bon = bmax
                                tau_d = (2.0 * gamma + bon) * dx_vox
                                if abs(depth - dexps[view, yy, xx]) <= tau_d:
                                    support += 1
                    if npix == 0:
                        continue
                    p_cov = support / npix
                    t = m_max if p_cov >= thin_pct else p_cov
                    if t >= thin_accept:
                        sum_t += t
                        n_thin += 1
                denom = sum_w + n_thin
                if denom > eps:
                    out[ix, iy, iz] = (sum_mw + sum_t) / denom
                else:
                    out[ix, iy, iz] = 0.0


def fuse_reference(grid: VoxelGrid, density: DensityGrid, views,
                   params: FusionParams, bounds: SceneBounds = None) -> OccupancyGrid:
    """Oracle twin of `fuse`: same contract, straightforward sequential code."""
    if density.grid.resolution != grid.resolution or \
            not np.allclose(density.grid.origin, grid.origin) or \
            density.grid.half_extents != grid.half_extents:
        raise ValueError("density grid layout does not match the fusion grid")
    g = grid.resolution
    out = np.zeros((g, g, g), dtype=np.float64)
    if not views:
        return OccupancyGrid(grid, out)
    nv = len(views)
    hmax = max(vg.camera.height for vg, _ in views)
    wmax = max(vg.camera.width for vg, _ in views)
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
    if bounds is not None and bounds.unbounded:
        bc = np.ascontiguousarray(bounds.center)
        bh = np.ascontiguousarray(bounds.half)
        unb = 1
    else:
        bc = np.zeros(3)
        bh = np.ones(3)
        unb = 0
    _ref_kernel(g, np.ascontiguousarray(grid.origin), grid.voxel_size(),
                density.values.astype(np.float32), rots, poss, intr,
                masks, dmins, dmaxs, dexps, nsamps, valids,
                params.as_vector(), bc, bh, unb, out)
    return OccupancyGrid(grid, out)
