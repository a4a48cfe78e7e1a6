"""Reconstruction objective: patchwise MSE, Gaussian-window SSIM and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from dqlr import tensor as T
from dqlr.errors import DimensionError
from dqlr.quantizer import vq_loss
from dqlr.tensor import Tensor

SSIM_FORMS = ("standard", "printed")


@dataclass(frozen=True)
class LossConfig:
    lambda_s: float = 1.0
    lambda_q: float = 1.0
    patch_size: int = 8
    ssim_sigma: float = 1.5
    ssim_window: int = 11
    c1: float = 0.01**2
    c2: float = 0.03**2
    beta: float = 0.25
    ssim_form: str = "standard"

    def __post_init__(self):
        if not (self.c1 < 1 and self.c2 < 1):
            raise ValueError("SSIM stabilizers C1 and C2 must be < 1")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("SSIM stabilizers must be positive")
        if self.lambda_s < 0 or self.lambda_q < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")
        if self.patch_size < 1 or self.ssim_window < 1 or self.ssim_sigma <= 0:
            raise ValueError("patch_size, ssim_window and ssim_sigma must be positive")
        if self.ssim_form not in SSIM_FORMS:
            raise ValueError(f"ssim_form must be one of {SSIM_FORMS}")


@lru_cache(maxsize=16)
def _window(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets**2) / (2.0 * sigma**2))
    g /= g.sum()
    w = np.outer(g, g)
    w.setflags(write=False)
    return w


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized ``size x size`` Gaussian weights (sums to one, radially symmetric)."""
    return _window(size, float(sigma)).copy()


def _images(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 2:
        return T.reshape(t, (1, 1) + t.shape)
    if t.ndim == 3:
        return T.reshape(t, (t.shape[0], 1) + t.shape[1:])
    if t.ndim == 4 and t.shape[1] == 1:
        return t
    raise DimensionError(f"expected grayscale images, got shape {t.shape}")


def _pair(pred, target) -> tuple[Tensor, Tensor]:
    a, b = _images(pred), _images(target)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse_loss(pred, target, patch_size: int = 8) -> Tensor:
    """Mean over non-overlapping patches of the per-patch mean squared error.

    Partial patches at the right/bottom edges are dropped. All patches have the
    same pixel count, so this equals the mean over the retained region.
    """
    a, b = _pair(pred, target)
    h, w = a.shape[-2:]
    ph, pw = (h // patch_size) * patch_size, (w // patch_size) * patch_size
    if ph == 0 or pw == 0:
        raise DimensionError(f"patch size {patch_size} exceeds image {h}x{w}")
    if (ph, pw) != (h, w):
        a, b = a[:, :, :ph, :pw], b[:, :, :ph, :pw]
    diff = a - b
    return T.mean(diff * diff)


def ssim_map(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """Per-window SSIM over every valid window position, shape [N,1,H-s+1,W-s+1]."""
    a, b = _pair(pred, target)
    size = cfg.ssim_window
    h, w = a.shape[-2:]
    if h < size or w < size:
        raise DimensionError(f"image {h}x{w} smaller than SSIM window {size}")
    n = a.shape[0]
    kernel = Tensor(_window(size, float(cfg.ssim_sigma)).reshape(1, 1, size, size))
    moments = T.conv2d(T.concat([a, b, a * a, b * b, a * b]), kernel)
    mu_a, mu_b = moments[0:n], moments[n : 2 * n]
    var_a = moments[2 * n : 3 * n] - mu_a * mu_a
    var_b = moments[3 * n : 4 * n] - mu_b * mu_b
    luminance = (2.0 * mu_a * mu_b + cfg.c1) / (mu_a * mu_a + mu_b * mu_b + cfg.c1)
    if cfg.ssim_form == "standard":
        cov = moments[4 * n : 5 * n] - mu_a * mu_b
        structure = (2.0 * cov + cfg.c2) / (var_a + var_b + cfg.c2)
    else:
        # two-factor form with 2*sigma_a*sigma_b; variances clipped before the root
        sd_a = T.sqrt(T.clip_min(var_a, 1e-12))
        sd_b = T.sqrt(T.clip_min(var_b, 1e-12))
        structure = (2.0 * sd_a * sd_b + cfg.c2) / (var_a + var_b + cfg.c2)
    return luminance * structure


def ssim_value(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    return T.mean(ssim_map(pred, target, cfg))


def ssim_loss(pred, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """``1 - mean SSIM``; lies in [0, 2]."""
    return 1.0 - ssim_value(pred, target, cfg)


def weighted_total(mse, ssim, quant, cfg: LossConfig):
    return mse + cfg.lambda_s * ssim + cfg.lambda_q * quant


def total_loss(recon, target, y=None, y_q=None, cfg: LossConfig = LossConfig()):
    """Weighted objective and its components.

    ``y_q`` must be the codebook lookup (see :func:`dqlr.quantizer.lookup`);
    pass ``y=None`` to drop the quantization term entirely.
    Returns ``(total, {"mse", "ssim", "quant", "total"})`` with float components.
    """
    l_mse = mse_loss(recon, target, cfg.patch_size)
    l_ssim = ssim_loss(recon, target, cfg)
    if y is None:
        l_quant = T.zeros(())
    else:
        l_quant = vq_loss(y, y_q, cfg.beta)
    total = weighted_total(l_mse, l_ssim, l_quant, cfg)
    components = {
        "mse": l_mse.item(),
        "ssim": l_ssim.item(),
        "quant": l_quant.item(),
        "total": total.item(),
    }
    return total, components
