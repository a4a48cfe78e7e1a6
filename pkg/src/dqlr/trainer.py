"""End-to-end optimization of encoder, propagator, codebook and generator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from dqlr import tensor as T
from dqlr.checkpoint import Checkpoint, snapshot_tensors
from dqlr.config import TrainConfig
from dqlr.errors import DimensionError, NumericError
from dqlr.losses import total_loss
from dqlr.models import Params, encode_batch, generate_batch, init_params, propagate
from dqlr.quantizer import Codebook, ema_update, kmeans_fit, lookup, quantize
from dqlr.tensor import Tensor
from dqlr.zstack import DatasetSplit, ZStack

log = logging.getLogger(__name__)

COMPONENTS = ("mse", "ssim", "quant", "total")


class Adam:
    """Adam over a name -> Tensor table; state is kept per name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def reset(self, name: str) -> None:
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.t.pop(name, None)

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            t = self.t.get(name, 0) + 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            # an overflow here surfaces as a non-finite loss on the next step
            with np.errstate(over="ignore", invalid="ignore"):
                p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
            self.m[name], self.v[name], self.t[name] = m, v, t


@dataclass(frozen=True)
class Window:
    """``n`` consecutive slices of a stack plus up to ``n_next`` following slices as prediction targets."""

    images: np.ndarray  # [n + n_next, 1, H, W]
    n: int
    n_next: int
    source_id: str
    start: int


def make_windows(stacks: list[ZStack], n: int, stride: int, n_predict: int) -> list[Window]:
    out = []
    for stack in stacks:
        arr = stack.as_array()
        length = min(n, len(stack))
        for start in range(0, len(stack) - length + 1, stride):
            n_next = min(n_predict, len(stack) - start - length)
            out.append(Window(arr[start : start + length + n_next], length, n_next, stack.source_id, start))
    return out


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class ForwardResult:
    total: Tensor
    components: dict[str, float]
    y: Tensor
    indices: np.ndarray | None
    recon: Tensor


QuantizeFn = Callable[[Tensor], tuple[Tensor, Tensor, np.ndarray]]


def codebook_quantizer(codebook: Codebook) -> QuantizeFn:
    """Returns ``(decoder input, codebook lookup, indices)`` for a latent batch."""

    def fn(y: Tensor):
        y_st, idx = quantize(y, codebook)
        return y_st, lookup(codebook, idx), idx

    return fn


def forward_windows(
    windows: list[Window],
    params: Params,
    cfg: TrainConfig,
    seeds: list[int],
    quantizer: QuantizeFn | None,
) -> ForwardResult:
    """Encode, propagate, (quantize), generate and score a batch of windows."""
    mcfg = cfg.model
    inputs = np.concatenate([w.images[: w.n] for w in windows])
    x = encode_batch(Tensor(inputs), params, mcfg)
    codes, targets = [], []
    offset = 0
    for w, seed in zip(windows, seeds):
        xs = [x[offset + i] for i in range(w.n)]
        offset += w.n
        codes.extend(propagate(xs, params, mcfg, h0_seed=seed, n_predict=w.n_next))
        targets.append(w.images)
    y = T.stack(codes)
    if quantizer is not None:
        decoder_in, y_code, indices = quantizer(y)
    else:
        decoder_in, y_code, indices = y, None, None
    recon = generate_batch(decoder_in, params, mcfg)
    target = Tensor(np.concatenate(targets))
    total, comps = total_loss(
        recon, target, y if quantizer is not None else None, y_code, cfg.loss
    )
    return ForwardResult(total, comps, y, indices, recon)


def _check_components(comps: dict[str, float], where: str) -> None:
    for name in COMPONENTS:
        if not math.isfinite(comps[name]):
            raise NumericError(f"non-finite {name} loss {where}")


class Trainer:
    """Stateful training run; :meth:`fit` returns the best-validation checkpoint."""

    def __init__(self, config: TrainConfig, data: DatasetSplit):
        if not data.train:
            raise ValueError("training split is empty")
        self.cfg = config
        self.data = data
        self.params = init_params(config.model, config.seed)
        self.codebook: Codebook | None = None
        self.optimizer = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
        n, stride, pred = config.window_n, config.window_stride, config.n_predict
        self.train_windows = make_windows(data.train, n, stride, pred)
        self.val_windows = make_windows(data.val, n, stride, pred)
        shape = self.train_windows[0].images.shape[-2:]
        scale = config.model.scale
        if shape[0] % scale or shape[1] % scale:
            raise DimensionError(f"slice size {shape} not divisible by {scale}")
        self.step_count = 0
        self.epoch = 0
        self.step_log: list[dict[str, float]] = []
        self.history: list[dict[str, float]] = []
        self.best: tuple[float, dict[str, np.ndarray], int, dict[str, float]] | None = None

    # -- codebook -------------------------------------------------------
    @property
    def quantizing(self) -> bool:
        return self.cfg.quantizer_enabled and self.codebook is not None

    def _trainable(self) -> dict[str, Tensor]:
        table = dict(self.params)
        if self.quantizing and self.cfg.codebook_mode == "kmeans-periodic":
            table["codebook.codes"] = self.codebook.codes
        return table

    def collect_latents(self) -> np.ndarray:
        """Site vectors of every training code under the current parameters."""
        rows = []
        with T.no_grad():
            for j, w in enumerate(self.train_windows):
                x = encode_batch(Tensor(w.images[: w.n]), self.params, self.cfg.model)
                ys = propagate([x[i] for i in range(w.n)], self.params, self.cfg.model, _seed(self.cfg.seed, 7, j), w.n_next)
                for y in ys:
                    rows.append(np.moveaxis(y.data, 0, -1).reshape(-1, y.shape[0]))
        return np.concatenate(rows)

    def fit_codebook(self) -> None:
        cfg = self.cfg
        samples = self.collect_latents().astype(np.float64)
        if samples.shape[0] < cfg.k:
            # too few sites for k distinct seeds: pad with jittered copies
            rng = np.random.default_rng(_seed(cfg.seed, 11, self.epoch))
            extra = samples[rng.integers(samples.shape[0], size=cfg.k - samples.shape[0])]
            samples = np.concatenate([samples, extra + rng.normal(0, 1e-3, size=extra.shape)])
        cb = kmeans_fit(samples, cfg.k, cfg.kmeans_iters, _seed(cfg.seed, 13, self.epoch))
        trainable = cfg.codebook_mode == "kmeans-periodic"
        cb.codes = Tensor(cb.codes.data, requires_grad=trainable)
        self.codebook = cb
        self.optimizer.reset("codebook.codes")
        log.info("codebook fitted: k=%d distortion %.5f", cfg.k, cb.fit_distortion[-1])

    # -- steps ----------------------------------------------------------
    def step(self, batch: list[Window]) -> dict[str, float]:
        seeds = [_seed(self.cfg.seed, 1, self.step_count, j) for j in range(len(batch))]
        quantizer = codebook_quantizer(self.codebook) if self.quantizing else None
        trainable = self._trainable()
        for p in trainable.values():
            p.grad = None
        try:
            out = forward_windows(batch, self.params, self.cfg, seeds, quantizer)
        except NumericError as exc:
            raise NumericError(f"step {self.step_count}: {exc}") from exc
        _check_components(out.components, f"at step {self.step_count}")
        T.backward(out.total)
        self.optimizer.step(trainable)
        if self.quantizing and self.cfg.codebook_mode == "ema":
            self.codebook = ema_update(self.codebook, out.y.data, out.indices, self.cfg.ema_decay)
            self.codebook.codes = Tensor(self.codebook.codes.data)
        self.step_count += 1
        self.step_log.append(dict(out.components))
        return out.components

    def evaluate(self, windows: list[Window]) -> dict[str, float]:
        """Mean loss components over ``windows`` without updating anything."""
        if not windows:
            return {}
        sums = dict.fromkeys(COMPONENTS, 0.0)
        quantizer = codebook_quantizer(self.codebook) if self.quantizing else None
        with T.no_grad():
            for j, w in enumerate(windows):
                out = forward_windows([w], self.params, self.cfg, [_seed(self.cfg.seed, 3, j)], quantizer)
                for k in COMPONENTS:
                    sums[k] += out.components[k]
        return {k: v / len(windows) for k, v in sums.items()}

    def _snapshot(self, val_total: float, comps: dict[str, float]) -> None:
        if self.best is None or val_total <= self.best[0]:
            self.best = (val_total, snapshot_tensors(self.params, self.codebook), self.epoch, dict(comps))

    def run_epoch(self) -> dict[str, float]:
        cfg = self.cfg
        if cfg.quantizer_enabled and self.codebook is None and self.epoch >= cfg.warmup_epochs:
            self.fit_codebook()
        order = np.random.default_rng(_seed(cfg.seed, 2, self.epoch)).permutation(len(self.train_windows))
        sums = dict.fromkeys(COMPONENTS, 0.0)
        steps = 0
        for start in range(0, len(order), cfg.batch):
            if cfg.max_steps and self.step_count >= cfg.max_steps:
                break
            batch = [self.train_windows[i] for i in order[start : start + cfg.batch]]
            comps = self.step(batch)
            for k in COMPONENTS:
                sums[k] += comps[k]
            steps += 1
        if self.quantizing and cfg.codebook_mode == "kmeans-periodic":
            self.fit_codebook()
        row = {k: v / max(steps, 1) for k, v in sums.items()}
        val = self.evaluate(self.val_windows)
        row["val_total"] = val.get("total", row["total"])
        row["epoch"] = self.epoch
        self.history.append(row)
        log.info(
            "epoch %d: mse %.5f ssim %.5f quant %.5f total %.5f val %.5f",
            self.epoch, row["mse"], row["ssim"], row["quant"], row["total"], row["val_total"],
        )
        # codebook-free warm-up epochs are not eligible as the returned model
        if not cfg.quantizer_enabled or self.codebook is not None:
            self._snapshot(row["val_total"], row)
        self.epoch += 1
        return row

    def done(self) -> bool:
        if self.cfg.max_steps:
            return self.step_count >= self.cfg.max_steps
        return self.epoch >= self.cfg.epochs

    def fit(self) -> Checkpoint:
        while not self.done():
            self.run_epoch()
        if self.best is None:
            if self.cfg.quantizer_enabled and self.codebook is None:
                self.fit_codebook()
            self._snapshot(math.inf, self.history[-1] if self.history else {})
        _, tensors, epoch, comps = self.best
        losses = {k: float(comps[k]) for k in COMPONENTS + ("val_total",) if k in comps}
        return Checkpoint(self.cfg, tensors, epoch, losses)

    def checkpoint(self) -> Checkpoint:
        """Current (not best) state."""
        comps = self.history[-1] if self.history else {}
        losses = {k: float(comps[k]) for k in COMPONENTS + ("val_total",) if k in comps}
        return Checkpoint(self.cfg, snapshot_tensors(self.params, self.codebook), self.epoch, losses)


def train(config: TrainConfig, data: DatasetSplit) -> Checkpoint:
    return Trainer(config, data).fit()


def _slice_batch(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    return arr.reshape((1, 1) + arr.shape[-2:])


def infer(ckpt: Checkpoint, image, n_predict: int = 0, previous=None) -> list[np.ndarray]:
    """Enhance one slice and predict ``n_predict`` following slices.

    ``previous`` is the slice directly above ``image``; its latent becomes the
    hidden state. Without it the hidden state is Gaussian noise seeded from the
    run seed. Returns ``1 + n_predict`` arrays of shape [1, H, W] in [0, 1].
    """
    cfg = ckpt.config
    mcfg = cfg.model
    arr = _slice_batch(image)
    h, w = arr.shape[-2:]
    if h % mcfg.scale or w % mcfg.scale:
        raise DimensionError(f"slice {h}x{w} not divisible by {mcfg.scale}")
    if previous is not None:
        prev = _slice_batch(previous)
        if prev.shape != arr.shape:
            raise DimensionError(f"previous slice {prev.shape[-2:]} != {arr.shape[-2:]}")
        arr = np.concatenate([prev, arr])
    params = ckpt.model_params()
    codebook = ckpt.codebook() if cfg.quantizer_enabled else None
    with T.no_grad():
        x = encode_batch(Tensor(arr), params, mcfg)
        ys = propagate([x[i] for i in range(x.shape[0])], params, mcfg, h0_seed=cfg.seed, n_predict=n_predict)
        y = T.stack(ys[-(1 + n_predict):])
        if codebook is not None:
            y, _ = quantize(y, codebook)
        images = generate_batch(y, params, mcfg)
    return [np.array(images.data[i], dtype=np.float64) for i in range(images.shape[0])]


def enhance_stack(ckpt: Checkpoint, stack: ZStack) -> ZStack:
    """Enhance a stack top to bottom, one slice at a time.

    Each slice is passed with the slice above it as recurrent context.
    """
    out = []
    for i, s in enumerate(stack.slices):
        out.append(infer(ckpt, s, 0, previous=stack.slices[i - 1] if i else None)[0])
    return ZStack(out, list(stack.depth_index), stack.source_id, stack.bit_depth)
