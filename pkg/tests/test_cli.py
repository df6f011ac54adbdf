"""End-to-end command-line behavior, run in-process through main()."""

import json
from pathlib import Path

import numpy as np
import pytest

from redi.autodiff import NumericError
from redi.cli import main
from redi.gradcheck import OP_CASES
from redi.pngio import load_png


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Corpus plus trained checkpoints, built once through the CLI itself."""
    root = tmp_path_factory.mktemp("cli")
    corpus = str(root / "corpus")
    rec = str(root / "rec.ckpt")
    disc = str(root / "disc.ckpt")
    assert main([
        "synth", "--out", corpus, "--seed", "3", "--size", "64",
        "--n-train", "12", "--n-test-normal", "3", "--n-test-anomalous", "3",
    ]) == 0
    assert main([
        "train-recover", "--corpus", corpus, "--out", rec,
        "--variant", "hip", "--epochs", "2", "--seed", "0", "--reproducible",
    ]) == 0
    assert main([
        "train-disc", "--corpus", corpus, "--out", disc,
        "--recover", rec, "--epochs", "2", "--seed", "0", "--reproducible",
    ]) == 0
    return {"root": root, "corpus": corpus, "rec": rec, "disc": disc}


def tree_bytes(base):
    return {
        str(p.relative_to(base)): p.read_bytes()
        for p in sorted(Path(base).rglob("*"))
        if p.is_file()
    }


# ---------------------------------------------------------------------------
# synth


def test_synth_deterministic(tmp_path, capsys):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    args = ["--seed", "5", "--size", "64", "--n-train", "3",
            "--n-test-normal", "1", "--n-test-anomalous", "1"]
    assert main(["synth", "--out", a] + args) == 0
    assert main(["synth", "--out", b] + args) == 0
    assert tree_bytes(a) == tree_bytes(b)
    # regeneration into an existing directory is allowed and idempotent
    assert main(["synth", "--out", a] + args) == 0
    assert tree_bytes(a) == tree_bytes(b)


def test_synth_rejects_bad_area(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--out", str(tmp_path / "x"), "--area-min", "0.5")
    assert code == 1
    assert "area" in err


def test_synth_rejects_unknown_texture(tmp_path, capsys):
    code = main(["synth", "--out", str(tmp_path / "x"), "--texture", "plaid"])
    capsys.readouterr()
    assert code == 1


# ---------------------------------------------------------------------------
# render-hog


def test_render_hog(workdir, tmp_path, capsys):
    src = str(Path(workdir["corpus"]) / "stripes" / "train" / "good" / "000.png")
    out = str(tmp_path / "sketch.png")
    code, stdout, _ = run(capsys, "render-hog", "--in", src, "--out", out)
    assert code == 0 and out in stdout
    img = load_png(out)
    assert img.shape == (64, 64)
    out2 = str(tmp_path / "sketch2.png")
    assert main(["render-hog", "--in", src, "--out", out2]) == 0
    assert Path(out).read_bytes() == Path(out2).read_bytes()


def test_render_hog_missing_input(tmp_path, capsys):
    code, _, err = run(capsys, "render-hog", "--in", str(tmp_path / "no.png"),
                       "--out", str(tmp_path / "o.png"))
    assert code == 1
    assert "no.png" in err


# ---------------------------------------------------------------------------
# training

def test_train_writes_history_sidecars(workdir):
    for ckpt in (workdir["rec"], workdir["disc"]):
        assert Path(ckpt).is_file()
        doc = json.loads(Path(ckpt + ".history.json").read_text())
        assert doc["epochs"] == 2
        assert len(doc["loss"]) == 2
        assert all(np.isfinite(v) for v in doc["loss"])


def test_flag_beats_config_file(workdir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"variant": "imi", "epochs": 3}))
    out = str(tmp_path / "r.ckpt")
    base = ["train-recover", "--corpus", workdir["corpus"],
            "--config", str(cfg), "--out", out]
    assert main(base + ["--epochs", "1"]) == 0
    capsys.readouterr()
    assert json.loads(Path(out + ".history.json").read_text())["epochs"] == 1
    assert main(base) == 0  # no flag: the file's value wins over the default
    capsys.readouterr()
    assert json.loads(Path(out + ".history.json").read_text())["epochs"] == 3


def test_train_reproducible_reruns_are_byte_identical(workdir, tmp_path, capsys):
    outs = []
    for name in ("r1.ckpt", "r2.ckpt"):
        out = str(tmp_path / name)
        assert main([
            "train-recover", "--corpus", workdir["corpus"], "--out", out,
            "--variant", "imi", "--epochs", "1", "--seed", "4", "--reproducible",
        ]) == 0
        outs.append(Path(out).read_bytes())
    capsys.readouterr()
    assert outs[0] == outs[1]


def test_train_disc_without_recover(workdir, tmp_path, capsys):
    out = str(tmp_path / "d.ckpt")
    code, stdout, _ = run(capsys, "train-disc", "--corpus", workdir["corpus"],
                          "--out", out, "--recover", "none", "--epochs", "1")
    assert code == 0
    assert "final_loss=" in stdout


def test_train_disc_size_mismatch(workdir, tmp_path, capsys):
    code, _, err = run(capsys, "train-disc", "--corpus", workdir["corpus"],
                       "--out", str(tmp_path / "d.ckpt"), "--recover", workdir["rec"],
                       "--epochs", "1", "--image-size", "32")
    assert code == 1
    assert "64px" in err and "32px" in err


def test_missing_corpus_is_usage_error(tmp_path, capsys):
    missing = str(tmp_path / "nowhere")
    code, _, err = run(capsys, "train-disc", "--corpus", missing,
                       "--out", str(tmp_path / "d.ckpt"), "--recover", "none")
    assert code == 1
    assert "nowhere" in err


def test_ambiguous_category(workdir, tmp_path, capsys):
    two = tmp_path / "two"
    (two / "catA").mkdir(parents=True)
    (two / "catB").mkdir()
    code, _, err = run(capsys, "eval", "--corpus", str(two), "--disc", workdir["disc"],
                       "--recover", workdir["rec"])
    assert code == 1
    assert "--category" in err


def test_scorer_variant_consistency(workdir, capsys):
    # the discriminator was trained on recovered images; silently scoring
    # raw ones would look healthy and measure something else entirely
    code, _, err = run(capsys, "eval", "--corpus", workdir["corpus"],
                       "--disc", workdir["disc"])
    assert code == 1
    assert "'hip'" in err and "'none'" in err


def test_numeric_failure_exit_code(workdir, tmp_path, capsys, monkeypatch):
    import redi.cli as cli

    def boom(*a, **k):
        raise NumericError("synthetic overflow")

    monkeypatch.setattr(cli, "train_recover", boom)
    code, _, err = run(capsys, "train-recover", "--corpus", workdir["corpus"],
                       "--out", str(tmp_path / "r.ckpt"), "--variant", "imi")
    assert code == 2
    assert "numeric failure" in err


def test_io_failure_exit_code(tmp_path, capsys, monkeypatch):
    import redi.cli as cli

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(cli, "generate_synthetic", boom)
    code, _, err = run(capsys, "synth", "--out", str(tmp_path / "x"))
    assert code == 3
    assert "I/O failure" in err


# ---------------------------------------------------------------------------
# inference and evaluation


def test_infer_writes_artifacts(workdir, tmp_path, capsys):
    test_dir = Path(workdir["corpus"]) / "stripes" / "test"
    img = str(sorted(p for p in test_dir.rglob("*.png") if p.parent.name != "good")[0])
    prefix = str(tmp_path / "q")
    code, stdout, _ = run(capsys, "infer", "--image", img, "--disc", workdir["disc"],
                          "--recover", workdir["rec"], "--out", prefix)
    assert code == 0
    score = float(stdout.split("score=")[1])
    assert np.isfinite(score) and score >= 0
    heat = load_png(prefix + ".heatmap.png")
    assert heat.shape == (64, 64)
    raw = np.frombuffer(Path(prefix + ".map.f32").read_bytes(), dtype="<f4")
    assert raw.size == 64 * 64
    assert abs(float(raw.max()) - score) < 1e-6


def test_infer_deterministic(workdir, tmp_path, capsys):
    img = str(Path(workdir["corpus"]) / "stripes" / "test" / "good" / "000.png")
    outs = []
    for name in ("p1", "p2"):
        prefix = str(tmp_path / name)
        assert main(["infer", "--image", img, "--disc", workdir["disc"],
                     "--recover", workdir["rec"], "--out", prefix]) == 0
        outs.append(Path(prefix + ".map.f32").read_bytes())
    capsys.readouterr()
    assert outs[0] == outs[1]


def test_infer_no_smooth_equals_sigma_zero(workdir, tmp_path, capsys):
    img = str(Path(workdir["corpus"]) / "stripes" / "test" / "good" / "001.png")
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["infer", "--image", img, "--disc", workdir["disc"],
                 "--recover", workdir["rec"], "--out", a, "--sigma", "0"]) == 0
    assert main(["infer", "--image", img, "--disc", workdir["disc"],
                 "--recover", workdir["rec"], "--out", b,
                 "--sigma", "2.0", "--no-smooth"]) == 0
    capsys.readouterr()
    assert Path(a + ".map.f32").read_bytes() == Path(b + ".map.f32").read_bytes()


def test_eval_report(workdir, tmp_path, capsys):
    report_path = str(tmp_path / "report.json")
    dump = str(tmp_path / "maps")
    code, stdout, _ = run(capsys, "eval", "--corpus", workdir["corpus"],
                          "--disc", workdir["disc"], "--recover", workdir["rec"],
                          "--out", report_path, "--dump-maps", dump)
    assert code == 0
    rep = json.loads(stdout)
    assert rep == json.loads(Path(report_path).read_text())
    assert rep["n_images"] == 6 and rep["n_anomalous_images"] == 3
    for key in ("auroc_det", "auroc_seg", "ap_seg", "pro_seg"):
        assert 0.0 <= rep[key] <= 1.0, key
    files = list(Path(dump).iterdir())
    assert len(files) == 12  # heatmap PNG and raw f32 per test image


def test_eval_per_image_seg(workdir, capsys):
    code, stdout, _ = run(capsys, "eval", "--corpus", workdir["corpus"],
                          "--disc", workdir["disc"], "--recover", workdir["rec"],
                          "--per-image-seg")
    assert code == 0
    assert 0.0 <= json.loads(stdout)["auroc_seg"] <= 1.0


def test_eval_empty_test_split(tmp_path, workdir, capsys):
    empty = str(tmp_path / "empty")
    assert main(["synth", "--out", empty, "--n-train", "2",
                 "--n-test-normal", "0", "--n-test-anomalous", "0"]) == 0
    code, _, err = run(capsys, "eval", "--corpus", empty, "--disc", workdir["disc"],
                       "--recover", workdir["rec"])
    assert code == 1
    assert "no test samples" in err


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_single_op(capsys):
    code, stdout, _ = run(capsys, "gradcheck", "--op", "conv2d", "--seeds", "2")
    assert code == 0
    assert "op:conv2d seed=0" in stdout and "op:conv2d seed=1" in stdout


def test_gradcheck_all_lists_every_op(capsys):
    code, stdout, _ = run(capsys, "gradcheck", "--all", "--seeds", "1")
    assert code == 0
    assert "PASS" in stdout
    for name in OP_CASES:
        assert name in stdout, name


def test_gradcheck_corrupt_negative_control(capsys):
    code, stdout, _ = run(capsys, "gradcheck", "--op", "conv2d", "--seeds", "2",
                          "--corrupt", "conv2d")
    assert code == 1
    assert "FAIL" in stdout


def test_gradcheck_usage_errors(capsys):
    code, _, err = run(capsys, "gradcheck")
    assert code == 1 and "--all" in err
    code, _, err = run(capsys, "gradcheck", "--all", "--corrupt", "nosuch")
    assert code == 1 and "nosuch" in err
