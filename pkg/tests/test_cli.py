import json

import numpy as np
import pytest

from hicscan.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from hicscan.data import load_map, save_map, synthesize_map
from hicscan.network import load_checkpoint


def _synth(tmp_path, name="toy.coo", *extra):
    path = tmp_path / name
    assert main(["synth", "--n", "120", "--seed", "7", "--out", str(path), *extra]) == EXIT_OK
    return path


def test_synth_writes_map_and_is_deterministic(tmp_path):
    a = _synth(tmp_path, "a.coo")
    b = _synth(tmp_path, "b.coo")
    assert a.read_bytes() == b.read_bytes()
    assert load_map(a).n == 120


def test_synth_rejects_small_maps(tmp_path, capsys):
    assert main(["synth", "--n", "20", "--out", str(tmp_path / "x.coo")]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_unwritable_path(tmp_path):
    assert main(["synth", "--n", "60", "--out", str(tmp_path / "missing" / "x.coo")]) == EXIT_USAGE


def test_unknown_flag_and_missing_option(tmp_path):
    assert main(["synth", "--bogus", "1"]) == EXIT_USAGE
    assert main(["synth"]) == EXIT_USAGE


def test_unknown_config_key_names_the_key(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 3\nlearning_rate = 0.1\n")
    assert main(["flops", "--config", str(cfg)]) == EXIT_USAGE
    assert "learning_rate" in capsys.readouterr().err


def test_malformed_config_line(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 3\nthis line has no equals sign\n")
    assert main(["flops", "--config", str(cfg)]) == EXIT_USAGE
    assert "line 2" in capsys.readouterr().err


def test_flags_override_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# training\nlr = 0.5\nepochs = 3\n")
    assert main(["train", "--config", str(cfg), "--lr", "0.25", "--dump-config"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert "lr = 0.25" in lines and "epochs = 3" in lines


def test_dump_config_round_trips(tmp_path, capsys):
    assert main(["flops", "--config", "default", "--dump-config"]) == EXIT_OK
    dumped = capsys.readouterr().out
    cfg = tmp_path / "dumped.cfg"
    cfg.write_text(dumped)
    assert main(["flops", "--config", str(cfg), "--dump-config"]) == EXIT_OK
    assert capsys.readouterr().out == dumped


def test_flops_is_stable(capsys):
    assert main(["flops", "--config", "default"]) == EXIT_OK
    first = capsys.readouterr().out
    assert main(["flops", "--config", "default"]) == EXIT_OK
    assert capsys.readouterr().out == first
    assert len(first.split()) == 1 and float(first) > 0


def test_preprocess_manifest(tmp_path):
    src = tmp_path / "sample_chr4.coo"
    save_map(synthesize_map(120, seed=1, chrom="chr4"), src)
    out = tmp_path / "prep"
    assert main(["preprocess", "--in", str(src), "--out-dir", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["ratio"] == 0.0625
    entry = manifest["maps"][0]
    assert entry["split"] == "test" and entry["patches"] == 9 and len(entry["origins"]) == 9
    with np.load(out / entry["archive"]) as archive:
        assert archive["inputs"].shape == archive["targets"].shape == (9, 40, 40)


def test_preprocess_malformed_input(tmp_path):
    bad = tmp_path / "bad.coo"
    bad.write_text("3 100\n0 1 -2\n")
    assert main(["preprocess", "--in", str(bad), "--out-dir", str(tmp_path / "o")]) == EXIT_USAGE


def test_evaluate_identical_maps(tmp_path, capsys):
    path = _synth(tmp_path)
    csv_path = tmp_path / "metrics.csv"
    dist_path = tmp_path / "dist.csv"
    assert main(["evaluate", "--pred", str(path), "--target", str(path), "--out", str(csv_path),
                 "--distance-csv", str(dist_path)]) == EXIT_OK
    text = capsys.readouterr().out
    rows = dict(line.split(",", 1) for line in csv_path.read_text().splitlines()[1:])
    assert float(rows["ssim"]) == 1.0
    assert rows["psnr"] == "inf" and rows["psnr_infinite"] == "true"
    assert "inf" in text
    assert dist_path.read_text().startswith("distance_bins,pcc\n")


def test_loopscore_table(tmp_path, capsys):
    out = tmp_path / "loops.csv"
    assert main(["loopscore", "--counts", "151,67,50,44", "--totals", "708,344", "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    for value in ("0.523", "0.477", "0.356", "0.644"):
        assert value in text
    assert len(out.read_text().splitlines()) == 5
    assert main(["loopscore", "--counts", "1,2", "--totals", "708,344"]) == EXIT_USAGE


def test_erf_baseline_grid(tmp_path):
    out = tmp_path / "erf.csv"
    assert main(["erf", "--baseline", "--base-dim", "4", "--samples", "1", "--out", str(out)]) == EXIT_OK
    grid = np.loadtxt(out, delimiter=",")
    assert grid.shape == (40, 40) and grid.max() == 1.0


def _prepared(tmp_path):
    maps = []
    for i, chrom in enumerate(("chr1", "chr2")):
        path = tmp_path / f"{chrom}.coo"
        save_map(synthesize_map(80, seed=i, chrom=chrom), path)
        maps += ["--in", str(path)]
    out = tmp_path / "prep"
    assert main(["preprocess", *maps, "--out-dir", str(out)]) == EXIT_OK
    return out


TINY = ["--base-dim", "2", "--blocks-per-stage", "1", "--state-size", "2", "--batch-size", "2"]


def test_train_enhance_evaluate_pipeline(tmp_path):
    prep = _prepared(tmp_path)
    ckpt = tmp_path / "model.ckpt"
    history = tmp_path / "history.csv"
    assert main(["train", "--data", str(prep), "--out", str(ckpt), "--history", str(history), *TINY,
                 "--epochs", "2", "--checkpoint-every", "1", "--lr", "1e-3"]) == EXIT_OK
    assert load_checkpoint(ckpt).config.base_dim == 2
    assert (tmp_path / "model.ckpt.epoch1").exists() and (tmp_path / "model.ckpt.epoch2").exists()
    assert history.read_text().splitlines()[0] == "epoch,step,train_l1,val_l1"
    low = tmp_path / "chr1.coo"
    enhanced = tmp_path / "enhanced.coo"
    assert main(["enhance", "--checkpoint", str(ckpt), "--in", str(low), "--out", str(enhanced)]) == EXIT_OK
    out = load_map(enhanced)
    assert out.n == 80
    assert np.array_equal(out.counts, out.counts.T)
    assert out.counts.min() >= 0 and out.counts.max() <= 1
    first = enhanced.read_bytes()
    assert main(["enhance", "--checkpoint", str(ckpt), "--in", str(low), "--out", str(enhanced)]) == EXIT_OK
    assert enhanced.read_bytes() == first
    assert main(["evaluate", "--pred", str(enhanced), "--target", str(low)]) == EXIT_OK


def test_train_without_data(tmp_path):
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "m.ckpt")]) == EXIT_USAGE


def test_non_finite_loss_exits_one(tmp_path):
    prep = _prepared(tmp_path)
    manifest = json.loads((prep / "manifest.json").read_text())
    archive = prep / next(e["archive"] for e in manifest["maps"] if e["split"] == "train")
    with np.load(archive) as f:
        arrays = dict(f)
    arrays["targets"][0, 0, 0] = np.nan
    np.savez(archive, **arrays)
    assert main(["train", "--data", str(prep), "--out", str(tmp_path / "m.ckpt"), *TINY,
                 "--epochs", "1"]) == EXIT_NUMERIC


def test_bad_checkpoint(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"\x01garbage")
    src = _synth(tmp_path)
    assert main(["enhance", "--checkpoint", str(bad), "--in", str(src), "--out", str(tmp_path / "e.coo")]) \
        == EXIT_USAGE


@pytest.mark.parametrize("module_run", [True])
def test_python_module_entry(module_run):
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "hicscan", "loopscore", "--counts", "10,10,3,3",
                           "--totals", "100,100"], capture_output=True, text=True)
    assert proc.returncode == 0 and "0.500" in proc.stdout
