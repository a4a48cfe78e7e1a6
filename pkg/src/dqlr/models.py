"""Encoder, recurrent latent propagator and generator.

Parameters live in a flat ``dict[str, Tensor]`` so they can be optimized,
checkpointed and swapped without any module objects. Names follow
``encoder.<layer>.weight``, ``rnn.<gate>``, ``generator.<layer>.bias``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dqlr import tensor as T
from dqlr.errors import DimensionError
from dqlr.tensor import Tensor

Params = dict[str, Tensor]

CELLS = ("gru", "tanh")
_GRU_GATES = ("z", "r", "n")


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 64
    channels: tuple[int, ...] = (32, 64)
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    in_channels: int = 1
    cell: str = "gru"

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ValueError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.latent_dim < 1 or any(c < 1 for c in self.channels):
            raise ValueError("channel counts must be positive")

    @property
    def depth(self) -> int:
        return len(self.channels) + 1

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.in_channels, *self.channels, self.latent_dim)

    @property
    def scale(self) -> int:
        return self.stride**self.depth


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """Uniform ``±1/sqrt(fan_in)`` init from a seeded generator."""
    rng = np.random.default_rng(seed)
    k = cfg.kernel
    params: Params = {}

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    widths = cfg.widths
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"encoder.{i}.weight"] = uniform((cout, cin, k, k), cin * k * k)
        params[f"encoder.{i}.bias"] = uniform((cout,), cin * k * k)

    d = cfg.latent_dim
    if cfg.cell == "gru":
        for gate in _GRU_GATES:
            params[f"rnn.w_{gate}"] = uniform((d, d), d)
            params[f"rnn.u_{gate}"] = uniform((d, d), d)
            params[f"rnn.b_{gate}"] = uniform((d,), d)
    else:
        params["rnn.w"] = uniform((d, d), d)
        params["rnn.u"] = uniform((d, d), d)
        params["rnn.b"] = uniform((d,), d)

    rev = widths[::-1]
    for i, (cin, cout) in enumerate(zip(rev[:-1], rev[1:])):
        params[f"generator.{i}.weight"] = uniform((cin, cout, k, k), cin * k * k)
        params[f"generator.{i}.bias"] = uniform((cout,), cin * k * k)
    return params


def _as_batch(images) -> Tensor:
    if isinstance(images, Tensor):
        t = images
    elif hasattr(images, "slices"):
        t = Tensor(np.stack([np.asarray(s) for s in images.slices]))
    elif isinstance(images, (list, tuple)):
        t = T.stack([s if isinstance(s, Tensor) else Tensor(s) for s in images])
    else:
        t = Tensor(images)
    if t.ndim == 3:
        # [n, H, W] slices without a channel axis
        t = T.reshape(t, (t.shape[0], 1) + t.shape[1:])
    if t.ndim != 4:
        raise DimensionError(f"expected images [N,1,H,W], got {t.shape}")
    return t


def encode_batch(images: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    """[N,1,H,W] -> [N,d,H/2^depth,W/2^depth]; relu between layers, none after the last."""
    _, c, h, w = images.shape
    if c != cfg.in_channels:
        raise DimensionError(f"encoder expects {cfg.in_channels} channels, got {c}")
    if h % cfg.scale or w % cfg.scale:
        raise DimensionError(f"image {h}x{w} not divisible by {cfg.scale} (depth {cfg.depth})")
    out = images
    for i in range(cfg.depth):
        out = T.conv2d(
            out,
            params[f"encoder.{i}.weight"],
            params[f"encoder.{i}.bias"],
            stride=cfg.stride,
            padding=cfg.padding,
        )
        if i < cfg.depth - 1:
            out = T.relu(out)
    return out


def encode(stack, params: Params, cfg: ModelConfig) -> list[Tensor]:
    """One latent grid ``x_i`` of shape [d,h,w] per slice of ``stack``."""
    latents = encode_batch(_as_batch(stack), params, cfg)
    return [latents[i] for i in range(latents.shape[0])]


def generate_batch(latents: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    """[N,d,h,w] -> [N,1,H,W] with a final sigmoid."""
    if latents.ndim != 4 or latents.shape[1] != cfg.latent_dim:
        raise DimensionError(f"generator expects [N,{cfg.latent_dim},h,w], got {latents.shape}")
    out = latents
    for i in range(cfg.depth):
        out = T.conv_transpose2d(
            out,
            params[f"generator.{i}.weight"],
            params[f"generator.{i}.bias"],
            stride=cfg.stride,
            padding=cfg.padding,
        )
        out = T.relu(out) if i < cfg.depth - 1 else T.sigmoid(out)
    return out


def generate(y_q: Sequence[Tensor], params: Params, cfg: ModelConfig) -> list[Tensor]:
    """One image [1,H,W] per latent grid."""
    if not y_q:
        return []
    images = generate_batch(T.stack(list(y_q)), params, cfg)
    return [images[i] for i in range(images.shape[0])]


def _to_rows(t: Tensor) -> Tensor:
    # [..., d, h, w] -> [sites, d]
    d = t.shape[-3]
    axes = tuple(range(t.ndim - 3)) + (t.ndim - 2, t.ndim - 1, t.ndim - 3)
    return T.reshape(T.transpose(t, axes), (-1, d))


def _from_rows(rows: Tensor, shape: tuple[int, ...]) -> Tensor:
    lead, (d, h, w) = shape[:-3], shape[-3:]
    moved = T.reshape(rows, lead + (h, w, d))
    n = len(lead)
    axes = tuple(range(n)) + (n + 2, n, n + 1)
    return T.transpose(moved, axes)


def rnn_cell(inp: Tensor, hidden: Tensor, params: Params, cell: str = "gru") -> Tensor:
    """One recurrent step over site rows ``[sites, d]``."""
    if cell == "tanh":
        return T.tanh(T.linear(inp, params["rnn.w"], params["rnn.b"]) + hidden @ params["rnn.u"])
    z = T.sigmoid(T.linear(inp, params["rnn.w_z"], params["rnn.b_z"]) + hidden @ params["rnn.u_z"])
    r = T.sigmoid(T.linear(inp, params["rnn.w_r"], params["rnn.b_r"]) + hidden @ params["rnn.u_r"])
    n = T.tanh(T.linear(inp, params["rnn.w_n"], params["rnn.b_n"]) + (r * hidden) @ params["rnn.u_n"])
    return (1.0 - z) * n + z * hidden


def initial_hidden(shape: tuple[int, ...], seed: int) -> Tensor:
    """Standard-Gaussian ``h_0`` of the given shape."""
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def propagate(
    x: Sequence[Tensor],
    params: Params,
    cfg: ModelConfig,
    h0_seed: int,
    n_predict: int = 0,
) -> list[Tensor]:
    """Correlated codes for every slice latent, then ``n_predict`` predicted codes.

    The cell runs independently at every spatial site with shared weights.
    Step ``i`` consumes input ``x_i`` with hidden state ``x_{i-1}`` (``h_0`` is
    Gaussian noise for the first step). Once the real latents run out, the
    previous output becomes the next input and the previous input becomes the
    hidden state.
    """
    if len(x) == 0:
        raise DimensionError("propagate needs at least one latent")
    if n_predict < 0:
        raise ValueError("n_predict must be >= 0")
    shape = x[0].shape
    for xi in x:
        if xi.shape != shape:
            raise DimensionError(f"latent shape {xi.shape} != {shape}")
    if shape[-3] != cfg.latent_dim:
        raise DimensionError(f"latent has {shape[-3]} channels, rnn expects {cfg.latent_dim}")

    rows = [_to_rows(xi) for xi in x]
    hidden = initial_hidden(rows[0].shape, h0_seed)
    outputs: list[Tensor] = []
    inp = rows[0]
    for i in range(len(x) + n_predict):
        if i > 0:
            hidden = inp
            inp = rows[i] if i < len(x) else outputs[-1]
        outputs.append(rnn_cell(inp, hidden, params, cfg.cell))
    return [_from_rows(o, shape) for o in outputs]
