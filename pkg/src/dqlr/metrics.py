"""Image quality metrics for enhanced stacks."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable

import numpy as np

from dqlr import tensor as T
from dqlr.errors import DimensionError
from dqlr.losses import LossConfig, ssim_value

PSNR_CAP = 99.0
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
CSV_HEADER = ("stack_id", "slice_index", "metric", "value")


def _plane(x) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)
    return np.squeeze(arr) if arr.ndim > 2 else arr


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 99 dB."""
    x, y = np.asarray(_plane(a)), np.asarray(_plane(b))
    if x.shape != y.shape:
        raise DimensionError(f"psnr: shapes differ {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim_index(a, b, cfg: LossConfig = LossConfig()) -> float:
    """Mean Gaussian-window SSIM, evaluated in 64-bit."""
    with T.precision(64), T.no_grad():
        return ssim_value(_plane(a), _plane(b), cfg).item()


def laplacian_variance(image) -> float:
    """Variance of the 3x3 Laplacian response over valid pixels; higher is sharper."""
    x = _plane(image)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 3:
        raise DimensionError(f"laplacian_variance needs a 2-d image of at least 3x3, got {x.shape}")
    response = (
        x[:-2, 1:-1] + x[2:, 1:-1] + x[1:-1, :-2] + x[1:-1, 2:] - 4.0 * x[1:-1, 1:-1]
    )
    return float(response.var())


def write_metrics_csv(rows: Iterable[tuple[str, int, str, float]], path) -> None:
    """Write ``stack_id,slice_index,metric,value`` rows."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for stack_id, index, metric, value in rows:
            writer.writerow((stack_id, index, metric, repr(float(value))))


def read_metrics_csv(path) -> list[tuple[str, int, str, float]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return [(s, int(i), m, float(v)) for s, i, m, v in reader]
