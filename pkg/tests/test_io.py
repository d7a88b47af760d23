import io as _io
import struct

import numpy as np
import pytest

from divas.fusion import OccupancyGrid
from divas.geometry import VoxelGrid
from divas.io import (FMAP_MAGIC, VGRID_MAGIC, read_fmap, read_vgrid,
                      write_fmap, write_vgrid)


class TestFmap:
    def test_single_channel_roundtrip(self, tmp_path):
        a = np.random.default_rng(0).random((7, 5)).astype(np.float32)
        p = tmp_path / "a.fmap"
        write_fmap(p, a)
        assert np.array_equal(read_fmap(p), a)

    def test_multichannel_roundtrip(self, tmp_path):
        a = np.random.default_rng(1).random((4, 6, 3)).astype(np.float32)
        p = tmp_path / "b.fmap"
        write_fmap(p, a)
        assert np.array_equal(read_fmap(p), a)

    def test_header_layout(self, tmp_path):
        a = np.zeros((2, 3), dtype=np.float32)
        p = tmp_path / "c.fmap"
        write_fmap(p, a)
        raw = p.read_bytes()
        assert raw[:8] == FMAP_MAGIC
        w, h, c = struct.unpack("<III", raw[8:20])
        assert (w, h, c) == (3, 2, 1)
        assert len(raw) == 20 + 2 * 3 * 4

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.fmap"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 20)
        with pytest.raises(ValueError):
            read_fmap(p)

    def test_file_object_io(self):
        buf = _io.BytesIO()
        a = np.ones((3, 3), dtype=np.float32)
        write_fmap(buf, a)
        buf.seek(0)
        assert np.array_equal(read_fmap(buf), a)


class TestVgrid:
    def test_roundtrip(self, tmp_path):
        g = VoxelGrid(9, 1.3, origin=(-1.3, -0.3, -1.3))
        probs = np.random.default_rng(2).random((9, 9, 9))
        og = OccupancyGrid(g, probs)
        p = tmp_path / "g.vgrid"
        write_vgrid(p, og, unbounded=True)
        back, unb = read_vgrid(p)
        assert unb
        assert back.grid.resolution == 9
        assert np.allclose(back.grid.origin, g.origin)
        assert back.grid.half_extent == pytest.approx(1.3, rel=1e-6)
        assert np.allclose(back.probs, probs, atol=1e-7)

    def test_x_fastest_on_disk(self, tmp_path):
        g = VoxelGrid(2, 1.0, origin=(0, 0, 0))
        probs = np.arange(8, dtype=np.float64).reshape(2, 2, 2)  # [ix, iy, iz]
        p = tmp_path / "o.vgrid"
        write_vgrid(p, OccupancyGrid(g, probs))
        raw = p.read_bytes()
        assert raw[:8] == VGRID_MAGIC
        payload = np.frombuffer(raw[8 + 4 + 24 + 1:], dtype="<f4")
        # first two values walk x at y=z=0: probs[0,0,0], probs[1,0,0]
        assert payload[0] == probs[0, 0, 0]
        assert payload[1] == probs[1, 0, 0]
        assert payload[2] == probs[0, 1, 0]

    def test_truncated_rejected(self, tmp_path):
        g = VoxelGrid(4, 1.0)
        og = OccupancyGrid(g, np.zeros((4, 4, 4)))
        p = tmp_path / "t.vgrid"
        write_vgrid(p, og)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(ValueError):
            read_vgrid(p)
