"""Z-stack ingestion, windowing, splitting and synthetic membrane phantoms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import tifffile
from PIL import Image
from scipy import ndimage
from scipy.spatial import cKDTree

from dqlr.errors import FormatError

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")
SPLITS = ("train", "val", "test")


@dataclass
class ZStack:
    """Ordered grayscale slices in [0, 1], each shaped [1, H, W]."""

    slices: list[np.ndarray]
    depth_index: list[int] = field(default_factory=list)
    source_id: str = "stack"
    bit_depth: int = 8

    def __post_init__(self):
        self.slices = [np.asarray(s, dtype=np.float64).reshape((1,) + np.shape(s)[-2:]) for s in self.slices]
        if not self.depth_index:
            self.depth_index = list(range(len(self.slices)))
        if len(self.depth_index) != len(self.slices):
            raise ValueError("depth_index length must match slice count")
        if any(b <= a for a, b in zip(self.depth_index, self.depth_index[1:])):
            raise ValueError("depth_index must be strictly increasing")
        shapes = {s.shape for s in self.slices}
        if len(shapes) > 1:
            raise FormatError(f"slices have mixed sizes: {sorted(shapes)}")
        for s in self.slices:
            if s.size and (s.min() < 0.0 or s.max() > 1.0):
                raise ValueError("slice values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.slices)

    @property
    def shape(self) -> tuple[int, int]:
        return self.slices[0].shape[-2:]

    def as_array(self) -> np.ndarray:
        """[n, 1, H, W] float64."""
        return np.stack(self.slices)


@dataclass
class DatasetSplit:
    train: list[ZStack]
    val: list[ZStack] = field(default_factory=list)
    test: list[ZStack] = field(default_factory=list)
    clean: dict[str, ZStack] = field(default_factory=dict)

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name in SPLITS:
            for stack in getattr(self, name):
                if stack.source_id in seen:
                    raise ValueError(
                        f"source_id {stack.source_id!r} appears in both {seen[stack.source_id]} and {name}"
                    )
                seen[stack.source_id] = name


def _normalize(page: np.ndarray, where: str) -> tuple[np.ndarray, int]:
    if page.dtype == np.uint8:
        bits = 8
    elif page.dtype == np.uint16:
        bits = 16
    else:
        raise FormatError(f"{where}: unsupported pixel type {page.dtype}")
    if page.ndim != 2:
        raise FormatError(f"{where}: expected a grayscale page, got shape {page.shape}")
    return page.astype(np.float64) / float(2**bits - 1), bits


def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() in (".tif", ".tiff"):
        return tifffile.imread(path)
    with Image.open(path) as im:
        if im.mode == "I;16":
            return np.asarray(im, dtype=np.uint16)
        if im.mode not in ("L", "I;16"):
            raise FormatError(f"{path.name}: not a grayscale image (mode {im.mode})")
        return np.asarray(im)


def load_stack(path, source_id: str | None = None) -> ZStack:
    """Read a multi-page grayscale TIFF, a single PNG, or a directory of PNG/TIFF slices.

    Directory slices are ordered lexicographically by file name. Pixels are
    scaled by ``2**bit_depth - 1``.
    """
    path = Path(path)
    sid = source_id or (path.stem.split(".")[0] if path.is_file() else path.name)
    pages: list[np.ndarray] = []
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise FormatError(f"{path}: no PNG/TIFF slices found")
        names = []
        for i, f in enumerate(files):
            try:
                pages.append(_read_image(f))
            except FormatError:
                raise
            except Exception as exc:
                raise FormatError(f"{path}: cannot read page {i} ({f.name}): {exc}") from exc
            names.append(f.name)
        sizes = {p.shape for p in pages}
        if len(sizes) > 1:
            desc = ", ".join(f"{n}: {p.shape[1]}x{p.shape[0]}" for n, p in zip(names, pages))
            raise FormatError(f"{path}: slices have mixed dimensions ({desc})")
    elif path.is_file() and path.suffix.lower() == ".png":
        try:
            pages.append(_read_image(path))
        except FormatError:
            raise
        except Exception as exc:
            raise FormatError(f"{path}: cannot read page 0: {exc}") from exc
    elif path.is_file():
        try:
            tif = tifffile.TiffFile(path)
        except Exception as exc:
            raise FormatError(f"{path}: not a readable TIFF: {exc}") from exc
        with tif:
            for i, page in enumerate(tif.pages):
                try:
                    pages.append(page.asarray())
                except Exception as exc:
                    raise FormatError(f"{path}: cannot read page {i}: {exc}") from exc
        sizes = {p.shape for p in pages}
        if len(sizes) > 1:
            raise FormatError(f"{path}: pages have mixed dimensions {sorted(sizes)}")
    else:
        raise FormatError(f"{path}: no such file or directory")

    slices, depths = [], set()
    for i, page in enumerate(pages):
        s, bits = _normalize(page, f"{path} page {i}")
        slices.append(s)
        depths.add(bits)
    if len(depths) > 1:
        raise FormatError(f"{path}: mixed bit depths {sorted(depths)}")
    return ZStack(slices, source_id=sid, bit_depth=depths.pop())


def _quantize_pixels(stack: ZStack, bits: int) -> np.ndarray:
    scale = 2**bits - 1
    dtype = np.uint8 if bits == 8 else np.uint16
    return np.rint(stack.as_array()[:, 0] * scale).astype(dtype)


def save_stack(stack: ZStack, path, bit_depth: int | None = None) -> Path:
    """Write a ``.tif``/``.tiff`` multi-page file, or a directory of 8/16-bit PNGs."""
    bits = bit_depth or stack.bit_depth
    if bits not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    pixels = _quantize_pixels(stack, bits)
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        path.parent.mkdir(parents=True, exist_ok=True)
        tifffile.imwrite(path, pixels, photometric="minisblack")
    else:
        path.mkdir(parents=True, exist_ok=True)
        for i, page in enumerate(pixels):
            save_png(page, path / f"slice_{i:03d}.png")
    return path


def save_png(pixels: np.ndarray, path) -> None:
    """Save a 2-d array; floats in [0, 1] become 8-bit grayscale."""
    arr = np.asarray(pixels)
    if arr.ndim > 2:
        arr = arr.reshape(arr.shape[-2:])
    if arr.dtype.kind == "f":
        arr = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    mode = "I;16" if arr.dtype == np.uint16 else "L"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


def window(stack: ZStack, n: int, stride: int = 1) -> list[ZStack]:
    """Overlapping runs of ``n`` consecutive slices, starting every ``stride`` slices."""
    if n < 1 or stride < 1:
        raise ValueError("n and stride must be >= 1")
    if n > len(stack):
        raise ValueError(f"window length {n} exceeds stack length {len(stack)}")
    return [
        ZStack(
            stack.slices[s : s + n],
            depth_index=stack.depth_index[s : s + n],
            source_id=stack.source_id,
            bit_depth=stack.bit_depth,
        )
        for s in range(0, len(stack) - n + 1, stride)
    ]


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.array(image, dtype=np.float64)
    return ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma, mode="reflect")


def synth_degrade(
    clean: ZStack,
    sigma0: float = 0.0,
    sigma_slope: float = 0.0,
    noise_std: float = 0.0,
    seed: int = 0,
) -> ZStack:
    """Depth-dependent Gaussian blur then seeded Gaussian noise, clamped to [0, 1].

    Slice ``i`` (position in the stack) is blurred with ``sigma0 + sigma_slope * i``.
    """
    if min(sigma0, sigma_slope, noise_std) < 0:
        raise ValueError("degradation parameters must be >= 0")
    rng = np.random.default_rng(seed)
    out = []
    for i, s in enumerate(clean.slices):
        img = gaussian_blur(s[0], sigma0 + sigma_slope * i)
        if noise_std > 0:
            img = img + rng.normal(0.0, noise_std, size=img.shape)
        out.append(np.clip(img, 0.0, 1.0)[None])
    return ZStack(out, list(clean.depth_index), clean.source_id, clean.bit_depth)


def membrane_phantom(
    depth: int,
    size: int,
    seed: int,
    cell_size: float = 16.0,
    membrane: float = 0.9,
    background: float = 0.1,
    source_id: str = "phantom",
) -> ZStack:
    """Cross-sections of a seeded 3-d Voronoi tessellation with bright cell walls.

    Wall pixels (label changes between 4-neighbours) are dilated by one pixel.
    Consecutive slices are one voxel apart, so neighbouring slices share most walls.
    """
    rng = np.random.default_rng(seed)
    margin = cell_size
    extent = np.array([depth + 2 * margin, size + 2 * margin, size + 2 * margin])
    count = max(4, int(round(np.prod(extent) / cell_size**3)))
    seeds = rng.uniform(0.0, 1.0, size=(count, 3)) * extent - margin
    zz, yy, xx = np.meshgrid(np.arange(depth), np.arange(size), np.arange(size), indexing="ij")
    _, labels = cKDTree(seeds).query(np.stack([zz, yy, xx], axis=-1).reshape(-1, 3))
    labels = labels.reshape(depth, size, size)
    slices = []
    for lab in labels:
        wall = np.zeros(lab.shape, dtype=bool)
        wall[:-1, :] |= lab[:-1, :] != lab[1:, :]
        wall[:, :-1] |= lab[:, :-1] != lab[:, 1:]
        wall = ndimage.binary_dilation(wall)
        slices.append(np.where(wall, membrane, background)[None])
    return ZStack(slices, source_id=source_id)


@dataclass(frozen=True)
class Degradation:
    sigma0: float = 0.0
    sigma_slope: float = 0.05
    noise_std: float = 0.2


def split_sizes(num_stacks: int) -> tuple[int, int, int]:
    """4:1:1 proportions with at least one stack per split."""
    if num_stacks < 3:
        raise ValueError("need at least 3 stacks for a train/val/test split")
    held = max(1, int(math.floor(num_stacks / 6 + 0.5)))
    return num_stacks - 2 * held, held, held


def make_synthetic_dataset(
    num_stacks: int,
    depth: int,
    size: int,
    seed: int,
    degradation: Degradation = Degradation(),
) -> DatasetSplit:
    """Seeded phantom stacks, degraded with depth, split 4:1:1 in source order."""
    n_train, n_val, _ = split_sizes(num_stacks)
    clean, degraded = {}, []
    for i in range(num_stacks):
        sid = f"stack_{i:02d}"
        c = membrane_phantom(depth, size, seed=seed * 1000 + i, source_id=sid)
        clean[sid] = c
        degraded.append(
            synth_degrade(c, degradation.sigma0, degradation.sigma_slope, degradation.noise_std, seed * 1000 + 500 + i)
        )
    return DatasetSplit(
        train=degraded[:n_train],
        val=degraded[n_train : n_train + n_val],
        test=degraded[n_train + n_val :],
        clean=clean,
    )


def write_manifest(entries: Sequence[tuple[str, str, str]], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for sid, p, split in entries:
            fh.write(f"{sid}\t{p}\t{split}\n")


def read_manifest(path) -> list[tuple[str, str, str]]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in SPLITS:
            raise FormatError(f"{path}:{lineno}: expected 'source_id<TAB>path<TAB>split'")
        entries.append((parts[0], parts[1], parts[2]))
    return entries


def clean_path(path: Path) -> Path:
    """Location of the clean oracle stored next to a synthetic stack."""
    return path.with_name(path.stem + ".clean" + path.suffix)


def load_dataset(manifest) -> DatasetSplit:
    """Load every stack named in a manifest; clean oracles are picked up when present."""
    manifest = Path(manifest)
    groups: dict[str, list[ZStack]] = {s: [] for s in SPLITS}
    clean = {}
    for sid, rel, split in read_manifest(manifest):
        p = Path(rel)
        if not p.is_absolute():
            p = manifest.parent / p
        stack = load_stack(p, source_id=sid)
        groups[split].append(stack)
        cp = clean_path(p)
        if cp.exists():
            clean[sid] = load_stack(cp, source_id=sid)
    return DatasetSplit(groups["train"], groups["val"], groups["test"], clean=clean)
