import json

import numpy as np
import pytest

from uec import cli, isp
from uec import model as M
from uec import tensor as tn


@pytest.fixture
def dataset(image_dir, tmp_path):
    out = tmp_path / "data"
    assert cli.main(["synth", "--input-dir", str(image_dir), "--output-dir", str(out)]) == 0
    return out


@pytest.fixture
def trained(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 3, "crop": 16, "batch_pairs": 2, "batch_triples": 2,
                               "checkpoint_every": 2}))
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(out)]) == 0
    return out


def test_synth_counts(dataset, capsys):
    man = json.loads((dataset / "manifest.json").read_text())
    assert sum(len(s["frames"]) for s in man["scenes"]) == 18


def test_synth_bad_grid(image_dir, tmp_path, capsys):
    code = cli.main(["synth", "--input-dir", str(image_dir), "--output-dir", str(tmp_path / "o"),
                     "--ev-grid", "-1,zero,1"])
    assert code == 2
    assert "ev-grid" in capsys.readouterr().err


def test_synth_jitter_repeatable(image_dir, tmp_path):
    for name in ("a", "b"):
        cli.main(["synth", "--input-dir", str(image_dir), "--output-dir", str(tmp_path / name),
                  "--jitter", "--seed", "5"])
    sums = [[f["sha256"] for s in json.loads((tmp_path / n / "manifest.json").read_text())["scenes"]
             for f in s["frames"]] for n in ("a", "b")]
    assert sums[0] == sums[1]


def test_train_writes_checkpoint(trained):
    assert (trained / "model.ueck").read_bytes()[:4] == b"UECK"
    assert (trained / "checkpoint_step2.ueck").exists()


def test_train_missing_manifest(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_train_resume_bit_identical(dataset, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"crop": 16, "batch_pairs": 2, "batch_triples": 2}))
    base = ["train", "--data", str(dataset), "--config", str(cfg)]
    assert cli.main(base + ["--out", str(tmp_path / "full"), "--steps", "20"]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "part"), "--steps", "10"]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "part"), "--steps", "20",
                            "--resume", str(tmp_path / "part")]) == 0
    assert (tmp_path / "full" / "model.ueck").read_bytes() == (tmp_path / "part" / "model.ueck").read_bytes()


def test_train_nonfinite_exit_3(dataset, tmp_path):
    model = M.init_model(0)
    model["corrector.2.conv2.bias"].data[:] = np.inf
    M.save(model, tmp_path / "model.ueck")
    import uec.training as T
    T.save_optimizer(T.AdamState(), 0, tmp_path / "optimizer.ueck")
    code = cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / "o"), "--steps", "2",
                     "--resume", str(tmp_path)])
    assert code == 3


def test_correct_identity_checkpoint(dataset, tmp_path):
    M.save(M.init_model(0), tmp_path / "id.ueck")
    inp = dataset / "img0" / "ev-1.00.png"
    ref = dataset / "img1" / "ev+0.00.png"
    out = tmp_path / "out.png"
    assert cli.main(["correct", "--checkpoint", str(tmp_path / "id.ueck"), "--reference", str(ref),
                     "--input", str(inp), "--output", str(out)]) == 0
    diff = np.abs(isp.read_image(out) - isp.read_image(inp))
    assert diff.max() < 1.5 / 255


def test_correct_cached_feature_matches(trained, dataset, tmp_path):
    ckpt = str(trained / "model.ueck")
    inp, ref = dataset / "img0" / "ev-2.00.png", dataset / "img2" / "ev+1.00.png"
    feat = tmp_path / "ref.uecf"
    assert cli.main(["correct", "--checkpoint", ckpt, "--reference", str(ref), "--save-ref-feature",
                     str(feat), "--input", str(inp), "--output", str(tmp_path / "a.png")]) == 0
    assert cli.main(["correct", "--checkpoint", ckpt, "--ref-feature", str(feat),
                     "--input", str(inp), "--output", str(tmp_path / "b.png")]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_correct_needs_exactly_one_reference(trained, dataset, tmp_path):
    inp = str(dataset / "img0" / "ev-2.00.png")
    code = cli.main(["correct", "--checkpoint", str(trained / "model.ueck"), "--input", inp,
                     "--output", str(tmp_path / "x.png")])
    assert code == 2


def test_correct_bad_checkpoint(dataset, tmp_path, capsys):
    (tmp_path / "bad.ueck").write_bytes(b"JUNKJUNKJUNK")
    inp = str(dataset / "img0" / "ev-2.00.png")
    code = cli.main(["correct", "--checkpoint", str(tmp_path / "bad.ueck"), "--reference", inp,
                     "--input", inp, "--output", str(tmp_path / "x.png")])
    assert code == 2
    assert "bad magic" in capsys.readouterr().err


def test_eval_writes_reports(trained, dataset, tmp_path, capsys):
    rep, csv = tmp_path / "rep.json", tmp_path / "rep.csv"
    assert cli.main(["eval", "--checkpoint", str(trained / "model.ueck"), "--test-manifest",
                     str(dataset / "manifest.json"), "--report", str(rep), "--csv", str(csv)]) == 0
    data = json.loads(rep.read_text())
    assert len(data["per_image"]) == 18 and "psnr_db" in data["aggregate"]
    assert "avg:" in capsys.readouterr().out


def test_eval_unknown_metric(trained, dataset, tmp_path):
    code = cli.main(["eval", "--checkpoint", str(trained / "model.ueck"), "--test-manifest",
                     str(dataset), "--metrics", "psnr,lpips", "--report", str(tmp_path / "r.json")])
    assert code == 2


def test_bench_arguments(capsys):
    assert cli.main(["bench", "--resolution", "64x32", "--iters", "10"]) == 0
    assert "64x32: median" in capsys.readouterr().out
    assert cli.main(["bench", "--iters", "5"]) == 2
    assert cli.main(["bench", "--resolution", "64by32"]) == 2


def test_usage_errors():
    assert cli.main([]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_gradcheck_negative_control(monkeypatch, capsys):
    real = tn._conv2d_backward

    def broken(*args, **kw):
        gx, gw, gb = real(*args, **kw)
        return gx, gw * 1.01, gb

    monkeypatch.setattr(tn, "_conv2d_backward", broken)
    assert cli.main(["gradcheck", "--seeds", "1"]) == 1
    cap = capsys.readouterr()
    assert "FAIL conv2d_3x3_s2" in cap.out and "PASS relu" in cap.out
    assert "worst op:" in cap.err


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "uec", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
