"""Binary file formats: float maps (.fmap) and occupancy grids (.vgrid).

fmap:  magic "DIVASFM1", u32 width, u32 height, u32 channels (little
       endian), then width*height*channels float32 LE values, row-major.
vgrid: magic "DIVASVG1", u32 G, 6x float32 bounds (min xyz, max xyz),
       u8 unbounded flag, then G^3 float32 LE probabilities, x-fastest.
"""

from __future__ import annotations

import struct

import numpy as np

from .fusion import OccupancyGrid
from .geometry import VoxelGrid

__all__ = ["write_fmap", "read_fmap", "write_vgrid", "read_vgrid"]

FMAP_MAGIC = b"DIVASFM1"
VGRID_MAGIC = b"DIVASVG1"


def _open(path_or_file, mode):
    if hasattr(path_or_file, "read" if "r" in mode else "write"):
        import contextlib
        return contextlib.nullcontext(path_or_file)
    return open(path_or_file, mode)


def write_fmap(path, array):
    """Write a (H, W) or (H, W, C) float map to a path or binary file."""
    a = np.asarray(array, dtype=np.float32)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError("fmap arrays must be HxW or HxWxC")
    h, w, c = a.shape
    with _open(path, "wb") as f:
        f.write(FMAP_MAGIC)
        f.write(struct.pack("<III", w, h, c))
        f.write(a.astype("<f4").tobytes(order="C"))


def read_fmap(path) -> np.ndarray:
    """Read an fmap; single-channel maps come back as (H, W)."""
    with _open(path, "rb") as f:
        magic = f.read(8)
        if magic != FMAP_MAGIC:
            raise ValueError(f"{path}: not an fmap file")
        w, h, c = struct.unpack("<III", f.read(12))
        data = np.frombuffer(f.read(w * h * c * 4), dtype="<f4")
    if data.size != w * h * c:
        raise ValueError(f"{path}: truncated fmap")
    a = data.reshape(h, w, c)
    return a[:, :, 0] if c == 1 else a


def write_vgrid(path, ogrid: OccupancyGrid, unbounded: bool = False):
    g = ogrid.grid
    lo = g.origin
    hi = g.origin + 2.0 * g.half_extent
    with _open(path, "wb") as f:
        f.write(VGRID_MAGIC)
        f.write(struct.pack("<I", g.resolution))
        f.write(struct.pack("<6f", lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]))
        f.write(struct.pack("<B", 1 if unbounded else 0))
        # file order is x-fastest; memory layout is [ix, iy, iz]
        f.write(ogrid.probs.astype("<f4").transpose(2, 1, 0).tobytes(order="C"))


def read_vgrid(path) -> tuple:
    """Returns (OccupancyGrid, unbounded flag)."""
    with _open(path, "rb") as f:
        magic = f.read(8)
        if magic != VGRID_MAGIC:
            raise ValueError(f"{path}: not a vgrid file")
        (res,) = struct.unpack("<I", f.read(4))
        bounds = struct.unpack("<6f", f.read(24))
        (unb,) = struct.unpack("<B", f.read(1))
        data = np.frombuffer(f.read(res ** 3 * 4), dtype="<f4")
    if data.size != res ** 3:
        raise ValueError(f"{path}: truncated vgrid")
    lo = np.array(bounds[:3], dtype=np.float64)
    hi = np.array(bounds[3:], dtype=np.float64)
    half = float(hi[0] - lo[0]) / 2.0
    grid = VoxelGrid(resolution=res, half_extents=(half,), origin=lo)
    probs = data.reshape(res, res, res).transpose(2, 1, 0).astype(np.float64)
    return OccupancyGrid(grid, probs), bool(unb)
