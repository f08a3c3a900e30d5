import subprocess
import sys

import numpy as np
import pytest

from ehdr import analyzer as A
from ehdr.cli import main
from ehdr.imageio import read_pfm, write_pfm, write_ppm
from ehdr.model import ModelConfig, build_model
from ehdr.weightfile import save_weights

from conftest import randomize_zero_heads

TINY = "base_channels = 4\nembed_dim = 8\nnum_blocks = 1\nheads = 2\n"


@pytest.fixture
def exposures(tmp_path, rng):
    base = rng.random((3, 12, 10))
    paths = {}
    for role, gain in (("under", 0.25), ("normal", 1.0), ("over", 4.0)):
        paths[role] = tmp_path / f"{role}.ppm"
        write_ppm(paths[role], np.clip(base * gain, 0, 1))
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    paths["config"] = cfg
    return paths


def fuse_args(p, out, *extra):
    return ["fuse", "--under", str(p["under"]), "--normal", str(p["normal"]), "--over", str(p["over"]),
            "--config", str(p["config"]), "--out", str(out), *extra]


# ---------------------------------------------------------------------------
# fuse


def test_fuse_default_weights_give_half(exposures, tmp_path, capsys):
    out = tmp_path / "o.pfm"
    assert main(fuse_args(exposures, out)) == 0
    captured = capsys.readouterr()
    assert captured.out.strip() == str(out)
    assert "transformer:" in captured.err
    img = read_pfm(out)
    assert img.shape == (3, 12, 10) and np.all(img == 0.5)


def test_fuse_with_weight_file_is_reproducible(exposures, tmp_path):
    cfg = ModelConfig(base_channels=4, embed_dim=8, num_blocks=1, heads=2)
    _, ws = build_model(cfg, 9)
    wpath = tmp_path / "w.bin"
    save_weights(randomize_zero_heads(ws), wpath)
    a, b = tmp_path / "a.pfm", tmp_path / "b.pfm"
    assert main(fuse_args(exposures, a, "--weights", str(wpath))) == 0
    assert main(fuse_args(exposures, b, "--weights", str(wpath), "--tile", "8", "--overlap", "2", "--workers", "2")) == 0
    assert main(fuse_args(exposures, tmp_path / "c.pfm", "--weights", str(wpath))) == 0
    assert a.read_bytes() == (tmp_path / "c.pfm").read_bytes()
    img = read_pfm(a)
    assert img.min() >= 0 and img.max() <= 1 and np.unique(img).size > 10
    assert read_pfm(b).shape == img.shape


def test_fuse_shape_mismatch_exits_3(exposures, tmp_path, capsys):
    write_ppm(exposures["over"], np.zeros((3, 12, 11)))
    assert main(fuse_args(exposures, tmp_path / "o.pfm")) == 3
    err = capsys.readouterr().err
    assert "under (3, 12, 10)" in err and "over (3, 12, 11)" in err


def test_fuse_bad_weights_exit_4(exposures, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not weights")
    assert main(fuse_args(exposures, tmp_path / "o.pfm", "--weights", str(bad))) == 4
    _, ws = build_model(ModelConfig(), 1)  # default-size weights against the tiny config
    save_weights(ws, bad)
    assert main(fuse_args(exposures, tmp_path / "o.pfm", "--weights", str(bad))) == 4


def test_fuse_io_errors_exit_2(exposures, tmp_path):
    missing = dict(exposures, under=tmp_path / "missing.ppm")
    assert main(fuse_args(missing, tmp_path / "o.pfm")) == 2
    assert main(fuse_args(exposures, tmp_path / "o.pfm", "--weights", str(tmp_path / "nope.bin"))) == 2
    exposures["config"].write_text("heads = 3\n")
    assert main(fuse_args(exposures, tmp_path / "o.pfm")) == 2


def test_fuse_clips_out_of_range_input(exposures, tmp_path, capsys):
    write_pfm(tmp_path / "hot.pfm", np.full((3, 12, 10), 2.0, np.float32))
    args = dict(exposures, over=tmp_path / "hot.pfm")
    assert main(fuse_args(args, tmp_path / "o.pfm")) == 0
    assert "clipped" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# analyze


def test_analyze_tsv_matches_library(capsys):
    assert main(["analyze", "--variant", "both", "--format", "tsv", "--height", "64", "--width", "64"]) == 0
    parsed = A.parse_tsv(capsys.readouterr().out)
    for v in ("main", "lite"):
        rep = A.count_model(ModelConfig(variant=v), 64, 64)
        assert parsed[v]["TOTAL"] == (rep.macs, rep.flops, rep.params)


def test_analyze_text_total_matches_tsv(capsys):
    main(["analyze", "--height", "64", "--width", "64"])
    text = capsys.readouterr().out
    main(["analyze", "--height", "64", "--width", "64", "--format", "tsv"])
    tsv = A.parse_tsv(capsys.readouterr().out)["main"]["TOTAL"]
    total = next(l for l in text.splitlines() if l.startswith("TOTAL")).split()[1:]
    assert tuple(int(t.replace(",", "")) for t in total) == tsv


def test_analyze_stride_compare(capsys):
    assert main(["analyze", "--stride-compare", "--format", "tsv"]) == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("REDUCTION"))
    assert float(line.split("\t")[-1]) >= 55.0
    assert main(["analyze", "--stride-compare"]) == 0
    assert "total MACs reduced by" in capsys.readouterr().out


def test_analyze_plot_writes_figure(tmp_path, capsys):
    fig = tmp_path / "cost.png"
    assert main(["analyze", "--variant", "both", "--height", "32", "--width", "32", "--plot", str(fig)]) == 0
    assert fig.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert main(["analyze", "--plot", str(tmp_path / "missing" / "x.png")]) == 2


def test_analyze_bad_input_size():
    assert main(["analyze", "--height", "1"]) == 2


# ---------------------------------------------------------------------------
# metrics


def test_metrics_self_and_offset(tmp_path, rng, capsys):
    ref = (rng.random((3, 16, 16)) * 0.8).astype(np.float32)
    write_pfm(tmp_path / "r.pfm", ref)
    assert main(["metrics", "--fused", str(tmp_path / "r.pfm"), "--reference", str(tmp_path / "r.pfm"), "--format", "tsv"]) == 0
    psnr_l, ssim_l, psnr_mu, ssim_mu = map(float, capsys.readouterr().out.split("\t"))
    assert psnr_l == psnr_mu == 99.0 and abs(ssim_l - 1) < 1e-9
    write_pfm(tmp_path / "f.pfm", ref + np.float32(0.1))
    assert main(["metrics", "--fused", str(tmp_path / "f.pfm"), "--reference", str(tmp_path / "r.pfm"), "--format", "tsv"]) == 0
    assert float(capsys.readouterr().out.split("\t")[0]) == pytest.approx(20.0, abs=1e-4)


def test_metrics_noise_levels_ordered(tmp_path, rng, capsys):
    ref = (rng.random((3, 24, 24)) * 0.6 + 0.2).astype(np.float32)
    write_pfm(tmp_path / "r.pfm", ref)
    noise = rng.standard_normal(ref.shape)
    scores = []
    for s in (0.01, 0.05, 0.1):
        write_pfm(tmp_path / "f.pfm", np.clip(ref + s * noise, 0, 1))
        main(["metrics", "--fused", str(tmp_path / "f.pfm"), "--reference", str(tmp_path / "r.pfm"), "--format", "tsv"])
        scores.append([float(v) for v in capsys.readouterr().out.split("\t")])
    for col in range(4):
        assert scores[0][col] > scores[1][col] > scores[2][col]


def test_metrics_errors(tmp_path):
    write_pfm(tmp_path / "a.pfm", np.zeros((3, 16, 16), np.float32))
    write_pfm(tmp_path / "b.pfm", np.zeros((3, 16, 12), np.float32))
    assert main(["metrics", "--fused", str(tmp_path / "a.pfm"), "--reference", str(tmp_path / "b.pfm")]) == 3
    assert main(["metrics", "--fused", str(tmp_path / "a.pfm"), "--reference", str(tmp_path / "c.pfm")]) == 2


# ---------------------------------------------------------------------------
# selftest / convert / module entry point


def test_selftest_passes_and_is_repeatable(capsys):
    assert main(["selftest"]) == 0
    first = capsys.readouterr().out
    assert main(["selftest"]) == 0
    assert capsys.readouterr().out == first
    lines = first.splitlines()
    assert len(lines) == 6 and all(l.startswith("PASS") for l in lines)


def test_selftest_detects_injected_fault(capsys):
    assert main(["selftest", "--inject-fault", "conv"]) == 1
    out = capsys.readouterr().out
    assert any(l.startswith("FAIL") and "conv-oracle" in l for l in out.splitlines())


def test_convert_round_trip(tmp_path, rng):
    img = rng.random((3, 5, 4)).astype(np.float32)
    write_ppm(tmp_path / "a.ppm", img)
    assert main(["convert", str(tmp_path / "a.ppm"), str(tmp_path / "a.pfm")]) == 0
    assert main(["convert", str(tmp_path / "a.pfm"), str(tmp_path / "b.ppm")]) == 0
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    assert main(["convert", str(tmp_path / "a.pfm"), str(tmp_path / "b.gif")]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ehdr", "analyze", "--height", "16", "--width", "16", "--format", "tsv"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.startswith("# report\tmain")
