"""Codebook learning and nearest-code quantization of latent grids.

Latents carry channels on axis -3 (``[d,h,w]`` or ``[B,d,h,w]``); each spatial
site is one ``d``-vector that snaps to its nearest codebook row. The residual
``y - y_q`` is what quantization discards.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from dqlr import tensor as T
from dqlr.errors import DimensionError
from dqlr.tensor import Tensor

_CHUNK = 512


@dataclass
class Codebook:
    codes: Tensor
    usage: np.ndarray
    ema_count: np.ndarray | None = None
    ema_sum: np.ndarray | None = None
    fit_distortion: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise DimensionError(f"codebook needs shape [k>=1, d], got {self.codes.shape}")

    @classmethod
    def from_array(cls, codes, requires_grad: bool = False) -> "Codebook":
        codes = Tensor(codes, requires_grad=requires_grad)
        return cls(codes=codes, usage=np.zeros(codes.shape[0], dtype=np.int64))

    @property
    def k(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]


def _sq_distances(vectors: np.ndarray, codes: np.ndarray) -> np.ndarray:
    # exact per-pair differences: the expanded |a|^2-2ab+|b|^2 form breaks ties
    out = np.empty((vectors.shape[0], codes.shape[0]), dtype=np.result_type(vectors, codes))
    for start in range(0, vectors.shape[0], _CHUNK):
        diff = vectors[start : start + _CHUNK, None, :] - codes[None, :, :]
        out[start : start + _CHUNK] = np.einsum("mkd,mkd->mk", diff, diff)
    return out


def assign(vectors: np.ndarray, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest code index (lowest index on ties) and squared distance per row."""
    if codes.shape[0] == 0:
        raise DimensionError("empty codebook")
    if vectors.shape[-1] != codes.shape[1]:
        raise DimensionError(f"vector dim {vectors.shape[-1]} != code dim {codes.shape[1]}")
    dist = _sq_distances(vectors, codes)
    idx = np.argmin(dist, axis=1)
    return idx, dist[np.arange(len(idx)), idx]


def nearest_code(v, codebook: Codebook) -> tuple[int, float]:
    vec = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64).reshape(1, -1)
    idx, dist = assign(vec, codebook.codes.data.astype(np.float64))
    return int(idx[0]), float(dist[0])


def _site_rows(y: np.ndarray) -> np.ndarray:
    if y.ndim < 3:
        raise DimensionError(f"latent grid needs [..., d, h, w], got {y.shape}")
    return np.moveaxis(y, -3, -1).reshape(-1, y.shape[-3])


def lookup(codebook: Codebook, indices: np.ndarray) -> Tensor:
    """Codebook rows at ``indices`` laid out as a latent grid [..., d, h, w].

    Differentiable w.r.t. the codes; this is the ``y_q`` that :func:`vq_loss` expects.
    """
    indices = np.asarray(indices)
    rows = T.gather_rows(codebook.codes, indices.reshape(-1))
    lead, (h, w) = indices.shape[:-2], indices.shape[-2:]
    grid = T.reshape(rows, lead + (h, w, codebook.dim))
    n = len(lead)
    return T.transpose(grid, tuple(range(n)) + (n + 2, n, n + 1))


def quantize(y: Tensor, codebook: Codebook) -> tuple[Tensor, np.ndarray]:
    """Snap every site of ``y`` to its nearest code.

    The returned grid holds exact codebook rows; its gradient flows to ``y``
    unchanged (straight-through). ``indices`` has shape ``y.shape[:-3] + (h, w)``.
    """
    if y.shape[-3] != codebook.dim:
        raise DimensionError(f"latent has {y.shape[-3]} channels, codebook has {codebook.dim}")
    idx, _ = assign(_site_rows(y.data), codebook.codes.data)
    indices = idx.reshape(y.shape[:-3] + y.shape[-2:])
    values = np.moveaxis(codebook.codes.data[indices], -1, -3)
    return T.straight_through(y, values), indices


def vq_loss(y: Tensor, y_q: Tensor, beta: float = 0.25) -> Tensor:
    """Codebook term ``|sg[y] - y_q|^2`` plus commitment ``beta * |y - sg[y_q]|^2``.

    Squared norms are taken over the channel vector of each site and averaged
    over sites, so a single vector gives the plain squared distance.
    """
    if y.shape != y_q.shape:
        raise DimensionError(f"vq_loss: {y.shape} != {y_q.shape}")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    sites = y.size // y.shape[-3] if y.ndim >= 3 else 1
    codebook_term = T.sum((T.detach(y) - y_q) * (T.detach(y) - y_q))
    commitment = T.sum((y - T.detach(y_q)) * (y - T.detach(y_q)))
    return (codebook_term + beta * commitment) * (1.0 / sites)


def _kmeans_pp(samples: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = samples.shape[0]
    centers = np.empty((k, samples.shape[1]), dtype=samples.dtype)
    centers[0] = samples[rng.integers(n)]
    closest = ((samples - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        centers[j] = samples[pick]
        closest = np.minimum(closest, ((samples - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans_fit(samples, k: int, iters: int = 20, seed: int = 0) -> Codebook:
    """Lloyd's algorithm from a seeded k-means++ start.

    Empty clusters are moved onto the samples farthest from their current
    centroid. ``fit_distortion`` records the mean squared distance after every
    assignment step; it never increases.
    """
    x = np.asarray(samples.data if isinstance(samples, Tensor) else samples, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"samples must be [N, d], got {x.shape}")
    if x.shape[0] < k:
        raise ValueError(f"k-means needs N >= k, got N={x.shape[0]}, k={k}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    history: list[float] = []
    for _ in range(iters):
        labels, dist = assign(x, centers)
        history.append(float(dist.mean()))
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            order = np.argsort(-dist, kind="stable")
            centers[empty] = x[order[: empty.size]]
    labels, dist = assign(x, centers)
    history.append(float(dist.mean()))
    usage = np.bincount(labels, minlength=k).astype(np.int64)
    return Codebook(
        codes=Tensor(centers),
        usage=usage,
        ema_count=usage.astype(np.float64).clip(min=1.0),
        ema_sum=centers * usage.astype(np.float64).clip(min=1.0)[:, None],
        fit_distortion=history,
    )


def ema_update(codebook: Codebook, batch_y, indices: np.ndarray, decay: float = 0.99) -> Codebook:
    """Move each assigned code toward the running mean of its assigned vectors.

    Codes with no assignment in this batch keep their value and statistics.
    Returns a new :class:`Codebook`.
    """
    if not 0.0 < decay < 1.0:
        raise ValueError("decay must be in (0, 1)")
    y = np.asarray(batch_y.data if isinstance(batch_y, Tensor) else batch_y, dtype=np.float64)
    rows = y if y.ndim == 2 else _site_rows(y)
    idx = np.asarray(indices).reshape(-1)
    if rows.shape[0] != idx.size:
        raise DimensionError(f"{rows.shape[0]} vectors but {idx.size} indices")

    codes = codebook.codes.data.astype(np.float64)
    count = codebook.ema_count if codebook.ema_count is not None else np.ones(codebook.k)
    total = codebook.ema_sum if codebook.ema_sum is not None else codes * count[:, None]
    count, total = count.astype(np.float64).copy(), total.astype(np.float64).copy()

    n = np.bincount(idx, minlength=codebook.k).astype(np.float64)
    sums = np.zeros_like(codes)
    np.add.at(sums, idx, rows)
    hit = n > 0
    count[hit] = decay * count[hit] + (1.0 - decay) * n[hit]
    total[hit] = decay * total[hit] + (1.0 - decay) * sums[hit]
    codes[hit] = total[hit] / count[hit, None]

    return replace(
        codebook,
        codes=Tensor(codes, requires_grad=codebook.codes.requires_grad),
        usage=codebook.usage + n.astype(np.int64),
        ema_count=count,
        ema_sum=total,
        fit_distortion=list(codebook.fit_distortion),
    )
