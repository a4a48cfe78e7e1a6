"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict (printed again in the
terminal summary) before asserting, so a failing criterion still reports
its measured numbers.
"""

import dataclasses
import time

import numpy as np
import pytest

from conftest import kink_free_toy, naive_ssim, record
from dqlr import tensor as T
from dqlr.checkpoint import from_bytes, load_checkpoint, save_checkpoint, to_bytes
from dqlr.cli import main
from dqlr.config import TrainConfig
from dqlr.errors import CheckpointMagicError, CheckpointTruncatedError, CheckpointVersionError
from dqlr.evaluation import INPUT, NO_QUANTIZER, QUANTIZED, metric_values, run_ablation
from dqlr.losses import LossConfig, gaussian_window
from dqlr.metrics import psnr, ssim_index
from dqlr.quantizer import Codebook, kmeans_fit, nearest_code, quantize
from dqlr.tensor import Tensor, check_gradients
from dqlr.trainer import Trainer, infer
from dqlr.zstack import DatasetSplit, make_synthetic_dataset, membrane_phantom
from test_tensor import OP_CASES, _offset

# ablation-scale run shared by criteria 6 and 7
ABLATION_CONFIG = TrainConfig(channels=(32,), batch=4, epochs=30, seed=0)
ABLATION_CORPUS = dict(num_stacks=6, depth=16, size=64, seed=7)


# ---------------------------------------------------------------- 1

def test_criterion_1_gradients():
    t0 = time.perf_counter()
    errors = {}
    for i, name in enumerate(sorted(OP_CASES)):
        rng = np.random.default_rng(i)
        with T.precision(64):
            f, shape = OP_CASES[name](rng)
            errors[name] = check_gradients(f, _offset(rng, shape), 1e-3)
    seed, frozen, _, point = kink_free_toy()
    errors["end_to_end"] = check_gradients(frozen, point, eps=1e-3)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 60
    record(1, ok, f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e}, toy seed {seed}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_ssim():
    rng = np.random.default_rng(2)
    cfg = LossConfig()
    w = gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    worst = 0.0
    for _ in range(50):
        a, b = rng.uniform(size=(2, 32, 32))
        worst = max(worst, abs(ssim_index(a, b) - naive_ssim(a, b, w, cfg.c1, cfg.c2)))
    x = rng.uniform(size=(32, 32))
    self_err = abs(ssim_index(x, x) - 1.0)
    const_err = 0.0
    for a, b in [(0.2, 0.7), (0.0, 1.0), (0.5, 0.5), (0.9, 0.1), (0.33, 0.34)]:
        want = (2 * a * b + cfg.c1) / (a * a + b * b + cfg.c1)
        const_err = max(const_err, abs(ssim_index(np.full((32, 32), a), np.full((32, 32), b)) - want))
    ok = worst < 1e-6 and self_err < 1e-9 and const_err < 1e-9
    record(2, ok, f"oracle max diff {worst:.1e}, |ssim(x,x)-1| {self_err:.1e}, constant case {const_err:.1e}")
    assert ok


# ---------------------------------------------------------------- 3

def _quantizer_trial(rng) -> list[str]:
    failed = []
    k, d = int(rng.integers(2, 16)), int(rng.integers(1, 6))
    codes = rng.normal(size=(k, d))
    cb = Codebook.from_array(codes)
    y = Tensor(rng.normal(size=(d, 3, 4)), requires_grad=True)
    y_q, idx = quantize(y, cb)

    again, idx2 = quantize(Tensor(y_q.data), cb)
    if not (np.array_equal(again.data, y_q.data) and np.array_equal(idx, idx2)):
        failed.append("idempotence")

    rows = np.moveaxis(y_q.data, 0, -1).reshape(-1, d)
    if not np.array_equal(rows, cb.codes.data[idx.reshape(-1)]):
        failed.append("membership")

    # an exact duplicate of the nearest code must never win the tie
    j = int(rng.integers(0, k))
    dup = np.concatenate([codes, codes[j : j + 1]])
    probe = codes[j] + rng.normal(size=d) * 1e-3
    first = nearest_code(probe, Codebook.from_array(dup))[0]
    if first == k or first != nearest_code(probe, Codebook.from_array(dup))[0]:
        failed.append("tie-break")

    g = rng.normal(size=y.shape)
    T.backward(T.sum(y_q * Tensor(g)))
    if not np.array_equal(y.grad, g.astype(y.grad.dtype)):
        failed.append("straight-through")

    gaps = np.sqrt(((codes[:, None] - codes[None]) ** 2).sum(-1))
    half = gaps[~np.eye(k, dtype=bool)].min() / 2
    eps = rng.normal(size=d)
    eps *= 0.99 * half * rng.uniform() / np.linalg.norm(eps)
    if nearest_code(codes[j] + eps, cb)[0] != j:
        failed.append("noise-removal")
    return failed


def test_criterion_3_quantizer_invariants():
    rng = np.random.default_rng(3)
    failures: dict[str, int] = {}
    with T.precision(64):
        for _ in range(1000):
            for name in _quantizer_trial(rng):
                failures[name] = failures.get(name, 0) + 1
    # symmetric tie: the origin is equidistant from +v and -v
    v = np.array([1.0, -2.0])
    if nearest_code(np.zeros(2), Codebook.from_array([v, -v]))[0] != 0:
        failures["symmetric tie"] = 1
    ok = not failures
    record(3, ok, f"1000 trials, failures {failures or 'none'}")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_kmeans():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(12, 3))
    zero = kmeans_fit(pts, 12, iters=5, seed=0).fit_distortion[-1]
    a = rng.normal(0.0, 0.3, size=(100, 2))
    b = rng.normal(10.0, 0.3, size=(100, 2))
    centers = np.array(sorted(map(tuple, kmeans_fit(np.concatenate([a, b]), 2, iters=10, seed=1).codes.data)))
    mean_err = max(np.abs(centers[0] - a.mean(0)).max(), np.abs(centers[1] - b.mean(0)).max())
    monotone = True
    for seed in range(20):
        r = np.random.default_rng(seed)
        cloud = r.normal(size=(80, 3)) + r.integers(0, 3, size=(80, 1)) * 3.0
        hist = kmeans_fit(cloud, int(r.integers(1, 10)), iters=15, seed=seed).fit_distortion
        monotone &= all(y <= x for x, y in zip(hist, hist[1:]))
    ok = zero == 0.0 and mean_err < 0.1 and monotone
    record(4, ok, f"k=N distortion {zero}, two-cluster mean err {mean_err:.3f}, non-increasing {monotone}")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_overfit_harness():
    stack = membrane_phantom(8, 32, seed=1, source_id="overfit")
    t0 = time.perf_counter()
    tr = Trainer(TrainConfig(max_steps=500), DatasetSplit([stack]))
    tr.fit()
    elapsed = time.perf_counter() - t0
    first, last = tr.step_log[0]["total"], tr.step_log[-1]["total"]
    ck = tr.checkpoint()
    # single-slice reconstruction: encode, quantize, generate
    value = float(np.mean([psnr(infer(ck, s)[0], s) for s in stack.slices]))
    ratio = last / first
    ok = len(tr.step_log) == 500 and ratio <= 0.10 and value >= 30.0 and elapsed < 300
    record(5, ok, f"loss {first:.4f} -> {last:.4f} (ratio {ratio:.3f}, need <= 0.10), "
                  f"reconstruction PSNR {value:.2f} dB (need >= 30), {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- 6, 7

@pytest.fixture(scope="module")
def ablation():
    data = make_synthetic_dataset(**ABLATION_CORPUS)
    t0 = time.perf_counter()
    result = run_ablation(ABLATION_CONFIG, data)
    return result, time.perf_counter() - t0


def test_criterion_6_ablation_direction(ablation):
    result, elapsed = ablation
    q, n = result.mean_psnr[QUANTIZED], result.mean_psnr[NO_QUANTIZER]
    ok = result.fraction_sharper > 0.5 and q >= n - 0.5 and elapsed < 1800
    record(6, ok, f"quantized sharper on {result.fraction_sharper:.3f} of {result.slices} slices (need > 0.5); "
                  f"mean PSNR quantized {q:.2f} vs no-quantizer {n:.2f} dB (need >= {n - 0.5:.2f}); {elapsed:.0f}s")
    assert ok


def test_criterion_7_enhancement_direction(ablation):
    result, _ = ablation
    enhanced = np.mean(list(metric_values(result.rows, f"{QUANTIZED}.psnr").values()))
    degraded = np.mean(list(metric_values(result.rows, f"{INPUT}.psnr").values()))
    ok = enhanced > degraded
    record(7, ok, f"mean PSNR enhanced {enhanced:.3f} vs degraded {degraded:.3f} dB")
    assert ok


# ---------------------------------------------------------------- 8

TINY = ["--set", "latent_dim=4;channels=4;k=4;window_n=2;batch=2;epochs=2;kmeans_iters=3"]


def _cli_outputs(root) -> dict[str, bytes]:
    data, run, ev, inf, abl = (root / d for d in ("data", "run", "eval", "infer", "ablate"))
    codes = [
        main(["synth", "--stacks", "3", "--depth", "4", "--size", "16", "--seed", "3", "--out", str(data)]),
        main(["train", "--data", str(data / "manifest.tsv"), "--seed", "9", "--out", str(run)] + TINY),
        main(["eval", "--checkpoint", str(run / "checkpoint.dqlr"), "--data", str(data / "manifest.tsv"),
              "--out", str(ev)]),
        main(["infer", "--checkpoint", str(run / "checkpoint.dqlr"), "--input", str(data / "stack_02.tif"),
              "--predict", "1", "--compare", "--out", str(inf)]),
        main(["ablate", "--data", str(data / "manifest.tsv"), "--seed", "9", "--out", str(abl)] + TINY),
    ]
    assert codes == [0] * 5, codes
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_determinism(tmp_path):
    a = _cli_outputs(tmp_path / "a")
    b = _cli_outputs(tmp_path / "b")
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = set(a) == set(b) and not differing and any(k.endswith("loss_log.csv") for k in a)
    record(8, ok, f"{len(a)} files across synth/train/eval/infer/ablate, differing: {differing or 'none'}")
    assert ok


# ---------------------------------------------------------------- 9

def test_criterion_9_checkpoint_format(tmp_path):
    data = make_synthetic_dataset(3, 4, 16, seed=1)
    cfg = TrainConfig(latent_dim=4, channels=(4,), k=4, window_n=2, epochs=2, kmeans_iters=3, seed=2)
    ck = Trainer(cfg, data).fit()
    save_checkpoint(ck, tmp_path / "c.dqlr")
    back = load_checkpoint(tmp_path / "c.dqlr")
    lossless = (
        back.config == ck.config
        and list(back.tensors) == list(ck.tensors)
        and all(back.tensors[k].tobytes() == v.tobytes() for k, v in ck.tensors.items())
        and to_bytes(back) == (tmp_path / "c.dqlr").read_bytes()
    )

    buf = to_bytes(ck)
    errors = {}
    for label, corrupt in [
        ("magic", b"XXXX" + buf[4:]),
        ("truncated", buf[: len(buf) // 2]),
        ("version", to_bytes(dataclasses.replace(ck, version=ck.version + 1))),
    ]:
        try:
            from_bytes(corrupt)
            errors[label] = None
        except Exception as exc:  # noqa: BLE001 - the class is what is being checked
            errors[label] = exc
    kinds = {
        "magic": CheckpointMagicError,
        "truncated": CheckpointTruncatedError,
        "version": CheckpointVersionError,
    }
    typed = all(type(errors[k]) is cls for k, cls in kinds.items())
    named = typed and errors["truncated"].tensor_name in ck.tensors
    ok = lossless and typed and named
    got = {k: type(v).__name__ for k, v in errors.items()}
    record(9, ok, f"bitwise round trip {lossless}, errors {got}")
    assert ok
