import os
import subprocess
import sys

import numpy as np
import pytest

from faldoi.cli import main
from faldoi.flowio import FlowField, read_flo, write_flo
from faldoi.imgproc import load_image, save_png

from conftest import smooth_texture

DATA = os.path.join(os.path.dirname(__file__), "data")

FIG9 = """width=160
height=160
bg_motion=2,1
sprite=10,10,40,40,30,30
sprite=110,10,40,40,-25,25
sprite=10,110,40,40,20,-20
sprite=110,110,40,40,-15,-15
"""

FIG3 = """width=96
height=96
bg_motion=2,-1
bg_deform=3
sprite=30,34,30,24,20,12
seed=11
outliers=508
backward=yes
"""


@pytest.fixture
def frames(tmp_path):
    img = smooth_texture(32, 32, 9)
    save_png(img, tmp_path / "a.png")
    save_png(img, tmp_path / "b.png")
    (tmp_path / "m.txt").write_text("16 16 16 16\n")
    return tmp_path


def test_estimate_identical_frames(frames, capsys):
    d = frames
    rc = main(["estimate", str(d / "a.png"), str(d / "b.png"), str(d / "m.txt"), str(d / "o.flo"),
               "--png", str(d / "o.png"), "--event-log", str(d / "ev.txt")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "energy: data_term=l1" in out and "pipeline: patch_size=11" in out
    assert "final_energy=" in out and "wall_time=" in out
    flow = read_flo(d / "o.flo")
    assert np.abs(flow.u).max() < 1e-3
    assert os.path.getsize(d / "o.png") > 0
    assert len((d / "ev.txt").read_text().splitlines()) == 32 * 32


def test_estimate_iterated_and_overrides(frames, capsys):
    d = frames
    rc = main(["estimate", str(d / "a.png"), str(d / "b.png"), str(d / "m.txt"), str(d / "o.flo"),
               "--mode", "iterated", "--backward-matches", str(d / "m.txt"), "--max-it", "2",
               "--energy", "tv-csad", "--patch-size", "7", "--global-warps", "1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "data_term=csad" in out and "max_it=2" in out and "patch_size=7" in out
    assert np.abs(read_flo(d / "o.flo").u).max() < 1e-3


def test_estimate_errors(frames, capsys):
    d = frames
    (d / "empty.txt").write_text("")
    rc = main(["estimate", str(d / "a.png"), str(d / "b.png"), str(d / "empty.txt"), str(d / "o.flo")])
    assert rc != 0 and "no seeds after pruning" in capsys.readouterr().err
    rc = main(["estimate", str(d / "a.png"), str(d / "nope.png"), str(d / "m.txt"), str(d / "o.flo")])
    assert rc != 0 and "missing input" in capsys.readouterr().err
    rc = main(["estimate", str(d / "a.png"), str(d / "b.png"), str(d / "m.txt"), str(d / "o.flo"),
               "--mode", "iterated"])
    assert rc != 0 and "backward" in capsys.readouterr().err
    rc = main(["estimate", str(d / "a.png"), str(d / "b.png"), str(d / "m.txt"), str(d / "o.flo"),
               "--patch-size", "8"])
    assert rc != 0 and "patch_size" in capsys.readouterr().err
    assert not os.path.exists(d / "o.flo")


def test_evaluate(tmp_path, capsys):
    write_flo(FlowField.constant(4, 4, (3, 4)), tmp_path / "f.flo")
    write_flo(FlowField.constant(4, 4, (0, 0)), tmp_path / "g.flo")
    assert main(["evaluate", str(tmp_path / "g.flo"), str(tmp_path / "g.flo")]) == 0
    line = capsys.readouterr().out
    assert "epe_all=0.000000" in line and "epe_matched=0.000000" in line
    csv = tmp_path / "m.csv"
    for _ in range(2):
        assert main(["evaluate", str(tmp_path / "f.flo"), str(tmp_path / "g.flo"), "--csv", str(csv),
                     "--label", "run"]) == 0
    assert "epe_all=5.000000" in capsys.readouterr().out
    assert len(csv.read_text().splitlines()) == 3  # header + one row per call
    assert main(["evaluate", str(tmp_path / "x.flo"), str(tmp_path / "g.flo")]) != 0


def test_evaluate_with_masks(tmp_path, capsys):
    write_flo(FlowField.constant(2, 2, (3, 4)), tmp_path / "f.flo")
    write_flo(FlowField.constant(2, 2, (0, 0)), tmp_path / "g.flo")
    occ = np.array([[1.0, 0], [0, 0]])
    save_png(occ, tmp_path / "occ.png")
    assert main(["evaluate", str(tmp_path / "f.flo"), str(tmp_path / "g.flo"), "--occlusion",
                 str(tmp_path / "occ.png")]) == 0
    out = capsys.readouterr().out
    assert "n_matched=3" in out and "n_unmatched=1" in out


def test_synth_fig9(tmp_path, capsys):
    spec = tmp_path / "s.txt"
    spec.write_text(FIG9)
    assert main(["synth", str(spec), str(tmp_path / "out")]) == 0
    assert sorted(os.listdir(tmp_path / "out")) == ["A.png", "B.png", "gt.flo", "occlusion.png", "seeds.txt"]
    assert len((tmp_path / "out" / "seeds.txt").read_text().splitlines()) == 5
    assert load_image(tmp_path / "out" / "A.png").shape == (160, 160)


def test_synth_fig3_outliers(tmp_path):
    spec = tmp_path / "s.txt"
    spec.write_text(FIG3)
    assert main(["synth", str(spec), str(tmp_path / "out")]) == 0
    assert len((tmp_path / "out" / "seeds.txt").read_text().splitlines()) == 2 + 508
    assert len((tmp_path / "out" / "seeds_backward.txt").read_text().splitlines()) == 2 + 508


def test_synth_errors(tmp_path, capsys):
    spec = tmp_path / "s.txt"
    spec.write_text("")
    assert main(["synth", str(spec), str(tmp_path / "out")]) != 0
    assert "width" in capsys.readouterr().err
    assert main(["synth", str(tmp_path / "none.txt"), str(tmp_path / "out")]) != 0


def test_viz(tmp_path):
    write_flo(FlowField.constant(5, 6, (0, 0)), tmp_path / "z.flo")
    assert main(["viz", str(tmp_path / "z.flo"), str(tmp_path / "z.png")]) == 0
    assert np.all(load_image(tmp_path / "z.png") == 1.0)
    yy, xx = np.mgrid[0:16, 0:16].astype(float)
    write_flo(FlowField.from_array(np.stack([xx - 7.5, yy - 7.5], -1) / 2), tmp_path / "f.flo")
    assert main(["viz", str(tmp_path / "f.flo"), str(tmp_path / "f.png"), "--max-radius", "4"]) == 0
    golden = load_image(os.path.join(DATA, "viz_golden.png"))
    assert np.array_equal(load_image(tmp_path / "f.png"), golden)
    assert main(["viz", str(tmp_path / "missing.flo"), str(tmp_path / "m.png")]) != 0


def test_console_script_entry():
    r = subprocess.run([sys.executable, "-m", "faldoi.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "estimate" in r.stdout
