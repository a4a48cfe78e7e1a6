"""Evaluation of trained models on stacks, and the with/without-quantizer ablation."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from dqlr.checkpoint import Checkpoint
from dqlr.config import TrainConfig
from dqlr.metrics import laplacian_variance, psnr, ssim_index
from dqlr.trainer import Trainer, enhance_stack
from dqlr.zstack import DatasetSplit, ZStack

log = logging.getLogger(__name__)

Row = tuple[str, int, str, float]

QUANTIZED = "quantized"
NO_QUANTIZER = "no_quantizer"
INPUT = "input"


def stack_rows(model_id: str, stack: ZStack, clean: ZStack | None, cfg) -> list[Row]:
    rows: list[Row] = []
    for i, s in enumerate(stack.slices):
        rows.append((stack.source_id, i, f"{model_id}.laplacian_variance", laplacian_variance(s)))
        if clean is not None:
            ref = clean.slices[i]
            rows.append((stack.source_id, i, f"{model_id}.psnr", psnr(s, ref)))
            rows.append((stack.source_id, i, f"{model_id}.ssim", ssim_index(s, ref, cfg.loss)))
    return rows


def evaluate(ckpt: Checkpoint, stacks: list[ZStack], clean: dict[str, ZStack], model_id: str = "model") -> list[Row]:
    """Per-slice metrics of the enhanced stacks (and of the raw inputs, as ``input.*``)."""
    rows: list[Row] = []
    for stack in stacks:
        ref = clean.get(stack.source_id)
        rows += stack_rows(INPUT, stack, ref, ckpt.config)
        rows += stack_rows(model_id, enhance_stack(ckpt, stack), ref, ckpt.config)
    return rows


def metric_values(rows: list[Row], metric: str) -> dict[tuple[str, int], float]:
    return {(s, i): v for s, i, m, v in rows if m == metric}


@dataclass
class AblationResult:
    rows: list[Row]
    fraction_sharper: float
    mean_psnr: dict[str, float]
    slices: int
    checkpoints: dict[str, Checkpoint]

    @property
    def summary(self) -> str:
        text = (
            f"models {QUANTIZED},{NO_QUANTIZER}: {QUANTIZED} sharper on "
            f"{self.fraction_sharper:.4f} of {self.slices} test slices"
        )
        if self.mean_psnr:
            parts = ", ".join(f"{k}={v:.3f}" for k, v in self.mean_psnr.items())
            text += f"; mean PSNR {parts}"
        return text


def run_ablation(config: TrainConfig, data: DatasetSplit) -> AblationResult:
    """Train twin models that differ only in ``quantizer_enabled`` and compare them on the test split."""
    if not data.test:
        raise ValueError("ablation needs a non-empty test split")
    twins = {
        QUANTIZED: dataclasses.replace(config, quantizer_enabled=True),
        NO_QUANTIZER: dataclasses.replace(config, quantizer_enabled=False),
    }
    ckpts = {}
    for name, cfg in twins.items():
        log.info("training %s twin", name)
        ckpts[name] = Trainer(cfg, data).fit()

    rows: list[Row] = []
    for stack in data.test:
        ref = data.clean.get(stack.source_id)
        rows += stack_rows(INPUT, stack, ref, config)
        for name, ck in ckpts.items():
            rows += stack_rows(name, enhance_stack(ck, stack), ref, config)

    sharp_q = metric_values(rows, f"{QUANTIZED}.laplacian_variance")
    sharp_n = metric_values(rows, f"{NO_QUANTIZER}.laplacian_variance")
    wins = sum(sharp_q[key] > sharp_n[key] for key in sharp_q)
    mean_psnr = {}
    for name in (QUANTIZED, NO_QUANTIZER, INPUT):
        vals = list(metric_values(rows, f"{name}.psnr").values())
        if vals:
            mean_psnr[name] = float(np.mean(vals))
    return AblationResult(rows, wins / len(sharp_q), mean_psnr, len(sharp_q), ckpts)
