import csv

import numpy as np
import pytest
from PIL import Image

from dqlr.checkpoint import load_checkpoint
from dqlr.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from dqlr.metrics import read_metrics_csv
from dqlr.zstack import read_manifest

TINY = ["--set", "latent_dim=4;channels=4;k=4;window_n=2;batch=2;epochs=2;kmeans_iters=3;learning_rate=0.002"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--stacks", "3", "--depth", "3", "--size", "16", "--seed", "7", "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def run(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(corpus / "manifest.tsv"), "--seed", "1", "--out", str(out)] + TINY) == EXIT_OK
    return out


def test_synth_writes_stacks_and_manifest(corpus):
    entries = read_manifest(corpus / "manifest.tsv")
    assert [e[2] for e in entries] == ["train", "val", "test"]
    for sid, rel, _ in entries:
        assert (corpus / rel).exists()
        assert (corpus / f"{sid}.clean.tif").exists()


def test_synth_six_stacks_split(tmp_path):
    assert main(["synth", "--stacks", "6", "--depth", "2", "--size", "16", "--seed", "7", "--out", str(tmp_path)]) == 0
    splits = [e[2] for e in read_manifest(tmp_path / "manifest.tsv")]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (4, 1, 1)


def test_synth_is_byte_identical(corpus, tmp_path):
    main(["synth", "--stacks", "3", "--depth", "3", "--size", "16", "--seed", "7", "--out", str(tmp_path)])
    for f in corpus.iterdir():
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()


def test_synth_too_few_stacks(tmp_path):
    assert main(["synth", "--stacks", "2", "--out", str(tmp_path)]) == EXIT_USAGE


def test_train_outputs(run):
    with open(run / "loss_log.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "mse", "ssim", "quant", "total"]
    assert len(rows) == 3
    for row in rows[1:]:
        assert all(np.isfinite(float(v)) for v in row[1:])
    assert load_checkpoint(run / "checkpoint.dqlr").config.seed == 1


def test_train_no_quantizer_zero_column(corpus, tmp_path):
    args = ["train", "--data", str(corpus / "manifest.tsv"), "--no-quantizer", "--out", str(tmp_path)] + TINY
    assert main(args) == EXIT_OK
    with open(tmp_path / "loss_log.csv", newline="") as fh:
        assert all(float(r["quant"]) == 0.0 for r in csv.DictReader(fh))


def test_train_is_deterministic(corpus, run, tmp_path):
    main(["train", "--data", str(corpus / "manifest.tsv"), "--seed", "1", "--out", str(tmp_path)] + TINY)
    for name in ("loss_log.csv", "checkpoint.dqlr"):
        assert (tmp_path / name).read_bytes() == (run / name).read_bytes()


def test_train_config_file_and_unknown_key(corpus, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("latent_dim = 4\nchannels = 4\nk = 4\nwindow_n = 2\nepochs = 1\nlearnin_rate = 0.1\n")
    code = main(["train", "--data", str(corpus / "manifest.tsv"), "--config", str(cfg), "--out", str(tmp_path)])
    assert code == EXIT_USAGE


def test_unknown_flag_is_usage_error(corpus, tmp_path, capsys):
    assert main(["train", "--data", str(corpus / "manifest.tsv"), "--out", str(tmp_path), "--epochz", "3"]) == EXIT_USAGE
    assert "--epochz" in capsys.readouterr().err


def test_missing_manifest_is_data_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.tsv"), "--out", str(tmp_path)] + TINY) == EXIT_DATA


def test_infer_single_slice_with_predictions(run, corpus, tmp_path):
    src = tmp_path / "slice.png"
    Image.fromarray(np.full((16, 16), 80, dtype=np.uint8)).save(src)
    out = tmp_path / "out"
    code = main(["infer", "--checkpoint", str(run / "checkpoint.dqlr"), "--input", str(src), "--predict", "2",
                 "--compare", "--out", str(out)])
    assert code == EXIT_OK
    pngs = sorted(p.name for p in out.glob("*.png") if not p.name.startswith("comparison"))
    assert pngs == ["enhanced_0.png", "predicted_0_1.png", "predicted_0_2.png"]
    with Image.open(out / "enhanced_0.png") as im:
        assert im.mode == "L" and im.size == (16, 16)
    with Image.open(out / "comparison_0.png") as im:
        assert im.size == (32, 16)


def test_infer_stack(run, corpus, tmp_path):
    code = main(["infer", "--checkpoint", str(run / "checkpoint.dqlr"), "--input", str(corpus / "stack_02.tif"),
                 "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert len(list(tmp_path.glob("enhanced_*.png"))) == 3


def test_infer_incompatible_size(run, tmp_path):
    src = tmp_path / "odd.png"
    Image.fromarray(np.zeros((10, 16), dtype=np.uint8)).save(src)
    code = main(["infer", "--checkpoint", str(run / "checkpoint.dqlr"), "--input", str(src), "--out", str(tmp_path)])
    assert code == EXIT_DATA


def test_infer_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.dqlr"
    bad.write_bytes(b"XXXX0000")
    src = tmp_path / "s.png"
    Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(src)
    assert main(["infer", "--checkpoint", str(bad), "--input", str(src), "--out", str(tmp_path)]) == EXIT_DATA


def test_eval_writes_metrics(run, corpus, tmp_path):
    code = main(["eval", "--checkpoint", str(run / "checkpoint.dqlr"), "--data", str(corpus / "manifest.tsv"),
                 "--out", str(tmp_path)])
    assert code == EXIT_OK
    rows = read_metrics_csv(tmp_path / "metrics.csv")
    metrics = {m for _, _, m, _ in rows}
    assert {"model.psnr", "model.ssim", "model.laplacian_variance", "input.psnr"} <= metrics


def test_ablate_summary_and_determinism(corpus, tmp_path, capsys):
    args = ["ablate", "--data", str(corpus / "manifest.tsv"), "--seed", "3"] + TINY
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    summary = capsys.readouterr().out
    assert "quantized" in summary and "no_quantizer" in summary
    frac = float(summary.split("sharper on ")[1].split()[0])
    assert 0.0 <= frac <= 1.0
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_numeric_failure_exit_code(corpus, tmp_path):
    args = ["train", "--data", str(corpus / "manifest.tsv"), "--out", str(tmp_path),
            "--set", "latent_dim=4;channels=4;k=4;window_n=2;epochs=1;learning_rate=1e300"]
    assert main(args) == EXIT_NUMERIC


def test_threads_env_validated(corpus, tmp_path, monkeypatch):
    monkeypatch.setenv("DQLR_THREADS", "zero")
    assert main(["synth", "--stacks", "3", "--depth", "1", "--size", "16", "--out", str(tmp_path)]) == EXIT_USAGE
