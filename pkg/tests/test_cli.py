import json

import numpy as np
import pytest

from divas.cli import main
from divas.io import read_fmap, read_vgrid


@pytest.fixture(scope="module")
def plan_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("plans") / "plan.json"
    rc = main(["plan", "--scene", "sphere_on_plane", "--prompts", "2",
               "--out", str(path)])
    assert rc == 0
    return path


class TestScenes:
    def test_lists_bundled_scenes(self, capsys):
        assert main(["scenes"]) == 0
        out = capsys.readouterr().out
        for name in ("sphere_on_plane", "occluder", "rod_lattice", "two_object"):
            assert name in out


class TestPlan:
    def test_plan_contents(self, plan_file):
        plan = json.loads(plan_file.read_text())
        assert plan["scene"] == "sphere_on_plane"
        assert len(plan["anchors"]) == 5
        assert all(len(a["prompts"]) == 2 for a in plan["anchors"])

    def test_unknown_scene_errors(self, tmp_path, capsys):
        rc = main(["plan", "--scene", "nope", "--out", str(tmp_path / "x.json")])
        assert rc == 2
        assert "error" in capsys.readouterr().err


class TestRender:
    def test_writes_pngs_and_fmaps(self, tmp_path):
        rc = main(["render", "--scene", "sphere_on_plane", "--n-views", "2",
                   "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "view_00_rgb.png").exists()
        d = read_fmap(tmp_path / "view_00_dexp.fmap")
        assert d.shape == (160, 160)


class TestSegment:
    def test_writes_mask(self, tmp_path):
        out = tmp_path / "mask.fmap"
        rc = main(["segment", "--scene", "sphere_on_plane", "--view", "7",
                   "--px", "80", "--py", "80", "--out", str(out)])
        assert rc == 0
        m = read_fmap(out)
        assert m.max() <= 1.0 and m.max() > 0.5

    def test_bad_view_errors(self, tmp_path):
        rc = main(["segment", "--scene", "sphere_on_plane", "--view", "40",
                   "--px", "0", "--py", "0",
                   "--out", str(tmp_path / "m.fmap")])
        assert rc == 2


class TestFuseAndReplay:
    def test_batch_fuse_writes_grid(self, tmp_path, plan_file):
        out = tmp_path / "g.vgrid"
        rc = main(["fuse", "--scene", "sphere_on_plane", "--plan",
                   str(plan_file), "--grid-res", "32", "--workers", "2",
                   "--out", str(out)])
        assert rc == 0
        og, _unb = read_vgrid(out)
        assert og.grid.resolution == 32
        assert og.probs.max() > 0.5

    def test_session_replay_deterministic(self, tmp_path, plan_file):
        outs = []
        for i in (0, 1):
            out = tmp_path / f"r{i}.vgrid"
            rc = main(["session-replay", "--scene", "sphere_on_plane",
                       "--plan", str(plan_file), "--grid-res", "32",
                       "--workers", "2", "--out", str(out),
                       "--events", str(tmp_path / f"ev{i}.jsonl")])
            assert rc == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        events = [json.loads(l)
                  for l in (tmp_path / "ev0.jsonl").read_text().splitlines()]
        assert any(e["kind"] == "fusion-complete" for e in events)


class TestExportGrid:
    def test_ground_truth_grid(self, tmp_path):
        out = tmp_path / "gt.vgrid"
        rc = main(["export-grid", "--scene", "sphere_on_plane",
                   "--grid-res", "48", "--out", str(out)])
        assert rc == 0
        og, _ = read_vgrid(out)
        count = (og.probs > 0.5).sum()
        expected = 4 / 3 * np.pi * 0.5 ** 3 / og.grid.voxel_size() ** 3
        assert abs(count - expected) / expected < 0.2


class TestAblateCli:
    def test_unknown_ablation_rejected_by_parser(self, tmp_path, plan_file):
        with pytest.raises(SystemExit) as exc:
            main(["ablate", "--scene", "sphere_on_plane", "--plan",
                  str(plan_file), "--ablation", "bogus",
                  "--out", str(tmp_path / "x.csv")])
        assert exc.value.code == 2
