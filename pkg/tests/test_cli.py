import csv
import json

import numpy as np
import pytest

from p2sturb.cli import RunConfig, main, parse_config
from p2sturb.errors import ConfigError
from p2sturb.imageio import read_image, write_image


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# nothing here\n\n")
    cfg = parse_config(p)
    ref = RunConfig()
    assert cfg.grid == ref.grid and cfg.fried_parameter_m == ref.fried_parameter_m
    assert cfg.d_over_r0 == pytest.approx(2.0)


def test_flags_override_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("seed = 4\ngrid = 8  # trailing comment\n")
    cfg = parse_config(p, {"seed": 9})
    assert cfg.seed == 9 and cfg.grid == 8


def test_d_over_r0_key(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("d_over_r0 = 4\n")
    assert parse_config(p).fried_parameter_m == pytest.approx(0.025)
    p.write_text("d_over_r0 = 4\nfried_parameter_m = 0.05\n")
    with pytest.raises(ConfigError, match="contradicts"):
        parse_config(p)
    p.write_text("fried_parameter_m = 0.05\n")
    # flag layer wins over the file
    assert parse_config(p, {"d_over_r0": 5.0}).d_over_r0 == pytest.approx(5.0)


def test_aggregated_diagnostics(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("bogus = 1\ngrid = -2\npsf_size_px = 32\nseed = x\n")
    with pytest.raises(ConfigError) as info:
        parse_config(p)
    msg = str(info.value)
    assert "bogus" in msg and "seed" in msg
    p.write_text("grid = -2\npsf_size_px = 32\n")
    with pytest.raises(ConfigError) as info:
        parse_config(p)
    assert "grid" in str(info.value) and "psf_size_px" in str(info.value)


def test_exit_codes(tmp_path, capsys):
    assert main(["simulate", "--set", "nonsense=1", "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: code=2 kind=ConfigError")
    assert main(["simulate", "--out", str(tmp_path / "o"), "--input", str(tmp_path / "none.png")]) == 3
    assert "code=3" in capsys.readouterr().err


def test_image_round_trip(tmp_path):
    x = np.random.default_rng(0).random((10, 12))
    write_image(tmp_path / "a.png", x)
    assert np.allclose(read_image(tmp_path / "a.png"), x, atol=1 / 65535)
    rgb = np.random.default_rng(1).random((10, 12, 3))
    write_image(tmp_path / "b.png", rgb)
    assert np.allclose(read_image(tmp_path / "b.png"), rgb, atol=1 / 255)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """train-basis -> train-p2s on a tiny corpus."""
    root = tmp_path_factory.mktemp("cli")
    small = ["--set", "dataset_count=300", "--set", "basis_count=10", "--set", "epochs=3",
             "--set", "hidden=16,16", "--workers", "1"]
    assert main(["train-basis", "--out", str(root / "b"), *small]) == 0
    basis = root / "b" / "basis.p2sb"
    assert main(["train-p2s", "--out", str(root / "w1"), "--basis", str(basis), *small]) == 0
    assert main(["train-p2s", "--out", str(root / "w2"), "--basis", str(basis), *small]) == 0
    return root, small


def test_training_reproducible(pipeline):
    root, _ = pipeline
    a = (root / "w1" / "weights.p2sw").read_bytes()
    assert a == (root / "w2" / "weights.p2sw").read_bytes()
    man = json.loads((root / "w1" / "manifest.json").read_text())
    assert man["command"] == "train-p2s" and "basis" in man["assets"]
    assert (root / "w1" / "config.resolved").exists()


def test_simulate_frames_and_manifest(pipeline):
    root, small = pipeline
    write_image(root / "scene.png", np.random.default_rng(3).random((40, 40)))
    out = root / "sim"
    args = ["simulate", "--out", str(out), "--input", str(root / "scene.png"),
            "--basis", str(root / "b" / "basis.p2sb"), "--weights", str(root / "w1" / "weights.p2sw"),
            "--grid", "3", "--frames", "4", "--cov-cache", str(root / "cov.p2sc"), *small]
    assert main(args) == 0
    frames = sorted(out.glob("frame_*.png"))
    assert len(frames) == 4
    man = json.loads((out / "manifest.json").read_text())
    assert man["outputs"][1:] == [f.name for f in frames]
    assert man["assets"]["cov_cache"]["sha256"]
    # re-run into a fresh directory with the cached covariance reproduces the frames
    args2 = [a if a != str(out) else str(root / "sim2") for a in args]
    assert main(args2) == 0
    assert (root / "sim2" / "frame_0002.png").read_bytes() == frames[2].read_bytes()


def test_simulate_rejects_mismatched_cache(pipeline, capsys):
    root, small = pipeline
    write_image(root / "big.png", np.zeros((48, 48)))
    args = ["simulate", "--out", str(root / "sim3"), "--input", str(root / "big.png"),
            "--basis", str(root / "b" / "basis.p2sb"), "--weights", str(root / "w1" / "weights.p2sw"),
            "--grid", "3", "--frames", "1", "--cov-cache", str(root / "cov.p2sc"), *small]
    assert main(args) == 2
    assert "covariance" in capsys.readouterr().err


def test_validate_tilt_report(pipeline):
    root, _ = pipeline
    out = root / "val"
    assert main(["validate", "--out", str(out), "--grid", "3", "--set", "draws=300",
                 "--set", "image_size=32", "--set", "checks=tilt"]) == 0
    rows = list(csv.DictReader(open(out / "tilt_stats.csv")))
    assert float(rows[0]["separation_rad"]) == 0 and float(rows[0]["diff_tilt_var"]) == 0


def test_bench_table(pipeline):
    root, small = pipeline
    out = root / "bench"
    assert main(["bench", "--out", str(out), "--basis", str(root / "b" / "basis.p2sb"),
                 "--weights", str(root / "w1" / "weights.p2sw"), "--grid", "2", "--frames", "1",
                 "--set", "image_size=48", *small]) == 0
    text = (out / "bench.txt").read_text()
    assert "fast path" in text and "oracle" in text and "speedup" in text
