"""Dataset ingestion and 64x64 patch extraction.

Datasets live under a root directory with ``images/``, ``masks/`` and
optionally ``fov/`` subdirectories; files are paired by sorted filename
order. Named layouts (drive, stare, chase_db1) additionally validate the
declared resolution of every file.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError

PATCH_SIZE = 64

IMAGE_EXTENSIONS = (".png", ".tif", ".tiff", ".gif", ".jpg", ".jpeg", ".ppm")

# (height, width) constants for the named public layouts.
DATASET_RESOLUTIONS = {
    "drive": (584, 565),
    "stare": (605, 700),
    "chase_db1": (960, 999),
}

KNOWN_LAYOUTS = ("drive", "stare", "chase_db1", "synthetic", "generic")


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable catalogue of one dataset: paths, pairing and resolution."""

    name: str
    image_paths: tuple[str, ...]
    mask_paths: Optional[tuple[str, ...]]
    fov_paths: Optional[tuple[str, ...]]
    resolution: tuple[int, int]
    bit_depth: int

    def __len__(self) -> int:
        return len(self.image_paths)

    def has_mask(self, i: int) -> bool:
        return self.mask_paths is not None and self.mask_paths[i] is not None

    def without_masks(self) -> "DatasetIndex":
        """Copy with mask paths withheld (used for cross-domain targets)."""
        return replace(self, mask_paths=None)


@dataclass
class PatchBatch:
    """Batch of 64x64 patches: the unit flowing through every network.

    ``pixels`` is (batch, channels, 64, 64); values produced by extraction
    are normalized to [-1, 1], but noised copies may exceed that range.
    """

    pixels: torch.Tensor
    source_ids: np.ndarray
    crop_origins: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[-2:] != (PATCH_SIZE, PATCH_SIZE):
            raise ValueError(
                f"patch batch must be (B, C, {PATCH_SIZE}, {PATCH_SIZE}), got {tuple(self.pixels.shape)}"
            )

    @classmethod
    def synthetic(cls, pixels: torch.Tensor) -> "PatchBatch":
        """Wrap generated pixels that have no source image or crop origin."""
        n = pixels.shape[0]
        return cls(
            pixels=pixels,
            source_ids=np.full(n, -1, dtype=np.int64),
            crop_origins=np.zeros((n, 2), dtype=np.int64),
        )

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass
class LabelMaskBatch:
    """Per-pixel class labels for a patch batch; entries in {0, ..., K-1}."""

    classes: torch.Tensor  # (B, 64, 64) int64
    num_classes: int = 2

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes (background, vessel)")
        if int(self.classes.max()) >= self.num_classes:
            raise ValueError(
                f"label {int(self.classes.max())} out of range for {self.num_classes} classes"
            )


@dataclass(frozen=True)
class SemiSplit:
    """Partition of dataset indices into labelled and unlabelled pools."""

    labelled: tuple[int, ...]
    unlabelled: tuple[int, ...]
    n_labelled: int = field(default=0)

    def __post_init__(self):
        object.__setattr__(self, "n_labelled", len(self.labelled))
        if set(self.labelled) & set(self.unlabelled):
            raise ValueError("labelled and unlabelled index sets overlap")


def normalize_pixels(raw: np.ndarray) -> np.ndarray:
    """Map 8-bit intensities [0, 255] to float32 [-1, 1]."""
    return (raw.astype(np.float32) - 127.5) / 127.5


def denormalize_pixels(norm: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize_pixels`, back to [0, 255] floats."""
    return np.asarray(norm, dtype=np.float32) * 127.5 + 127.5


def _list_images(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )


def _probe(path: Path) -> tuple[tuple[int, int], int]:
    """Return ((height, width), bit_depth) without fully decoding."""
    try:
        with Image.open(path) as im:
            w, h = im.size
            depth = 16 if im.mode.startswith("I") else 8
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image: {path}") from exc
    return (h, w), depth


def _pair_by_order(images: list[Path], others: list[Path], kind: str) -> None:
    if len(images) != len(others):
        longer = images if len(images) > len(others) else others
        extra = ", ".join(p.name for p in longer[min(len(images), len(others)):])
        raise DataError(
            f"image/{kind} count mismatch ({len(images)} images vs "
            f"{len(others)} {kind}s); unpaired: {extra}"
        )


def load_dataset(root: str | Path, layout: str) -> DatasetIndex:
    """Index the dataset under ``root`` following the named ``layout``.

    drive/stare/chase_db1 validate every file against the known resolution;
    synthetic and generic infer the resolution from the first image.
    """
    layout = str(layout).lower()
    if layout not in KNOWN_LAYOUTS:
        raise ConfigError(f"unknown dataset layout '{layout}'; expected one of {KNOWN_LAYOUTS}")
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root does not exist: {root}")

    image_dir = root / "images"
    if not image_dir.is_dir():
        raise ConfigError(f"dataset root has no images/ subdirectory: {root}")
    images = _list_images(image_dir)
    if not images:
        raise ConfigError(f"no images found under {image_dir}")

    masks: Optional[list[Path]] = None
    mask_dir = root / "masks"
    if mask_dir.is_dir():
        found = _list_images(mask_dir)
        if found:
            _pair_by_order(images, found, "mask")
            masks = found

    fov: Optional[list[Path]] = None
    fov_dir = root / "fov"
    if fov_dir.is_dir():
        found = _list_images(fov_dir)
        if found:
            _pair_by_order(images, found, "fov")
            fov = found

    if layout in DATASET_RESOLUTIONS:
        resolution = DATASET_RESOLUTIONS[layout]
        bit_depth = 8
    else:
        resolution, bit_depth = _probe(images[0])

    for path in images + (masks or []) + (fov or []):
        size, _ = _probe(path)
        if size != resolution:
            raise DataError(
                f"{path} decodes to {size}, expected {resolution} for layout '{layout}'"
            )

    return DatasetIndex(
        name=layout if layout != "generic" else root.name,
        image_paths=tuple(str(p) for p in images),
        mask_paths=tuple(str(p) for p in masks) if masks else None,
        fov_paths=tuple(str(p) for p in fov) if fov else None,
        resolution=resolution,
        bit_depth=bit_depth,
    )


def split_semi(index: DatasetIndex, n_labelled: int, seed: int) -> SemiSplit:
    """Deterministically pick ``n_labelled`` masked images; rest are unlabelled."""
    if n_labelled < 1:
        raise ConfigError(f"n_labelled must be >= 1, got {n_labelled}")
    if n_labelled > len(index):
        raise ConfigError(
            f"n_labelled={n_labelled} exceeds dataset size {len(index)}"
        )
    with_mask = [i for i in range(len(index)) if index.has_mask(i)]
    if n_labelled > len(with_mask):
        raise ConfigError(
            f"n_labelled={n_labelled} exceeds the {len(with_mask)} images with masks"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(index))
    labelled: list[int] = []
    for i in order:
        if len(labelled) == n_labelled:
            break
        if index.has_mask(int(i)):
            labelled.append(int(i))
    taken = set(labelled)
    remaining = [int(i) for i in order if int(i) not in taken]
    return SemiSplit(labelled=tuple(labelled), unlabelled=tuple(remaining))


@functools.lru_cache(maxsize=64)
def _load_image_u8(path: str) -> np.ndarray:
    """Decode to (H, W, C) uint8; grayscale keeps a single channel."""
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "I;16", "I"):
                arr = np.asarray(im.convert("L"))[:, :, None]
            elif im.mode == "1":
                arr = (np.asarray(im, dtype=np.uint8) * 255)[:, :, None]
            else:
                arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image: {path}") from exc
    return np.ascontiguousarray(arr, dtype=np.uint8)


@functools.lru_cache(maxsize=64)
def _load_mask_bool(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode mask: {path}") from exc
    return arr > 127


def extract_patches(
    index: DatasetIndex,
    which: Sequence[int],
    count: int,
    seed: int,
) -> tuple[PatchBatch, Optional[LabelMaskBatch]]:
    """Randomly crop ``count`` 64x64 patches from the images in ``which``.

    Labels come back only when every selected image has a mask. Crops are
    uniform over valid origins and deterministic in ``seed``.
    """
    if count < 1:
        raise ConfigError(f"patch count must be >= 1, got {count}")
    if not which:
        raise ConfigError("no images selected for patch extraction")
    rng = np.random.default_rng(seed)
    with_masks = all(index.has_mask(i) for i in which)

    pixels = None
    labels = np.zeros((count, PATCH_SIZE, PATCH_SIZE), dtype=np.int64) if with_masks else None
    source_ids = np.zeros(count, dtype=np.int64)
    origins = np.zeros((count, 2), dtype=np.int64)

    for k in range(count):
        img_idx = int(which[int(rng.integers(len(which)))])
        img = _load_image_u8(index.image_paths[img_idx])
        h, w = img.shape[:2]
        if h < PATCH_SIZE or w < PATCH_SIZE:
            raise DataError(
                f"image {index.image_paths[img_idx]} is {h}x{w}, smaller than a "
                f"{PATCH_SIZE}x{PATCH_SIZE} patch"
            )
        r = int(rng.integers(h - PATCH_SIZE + 1))
        c = int(rng.integers(w - PATCH_SIZE + 1))
        crop = normalize_pixels(img[r:r + PATCH_SIZE, c:c + PATCH_SIZE])
        if pixels is None:
            pixels = np.zeros((count, crop.shape[2], PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
        pixels[k] = crop.transpose(2, 0, 1)
        source_ids[k] = img_idx
        origins[k] = (r, c)
        if with_masks:
            mask = _load_mask_bool(index.mask_paths[img_idx])
            labels[k] = mask[r:r + PATCH_SIZE, c:c + PATCH_SIZE].astype(np.int64)

    batch = PatchBatch(
        pixels=torch.from_numpy(pixels),
        source_ids=source_ids,
        crop_origins=origins,
    )
    label_batch = LabelMaskBatch(classes=torch.from_numpy(labels)) if with_masks else None
    return batch, label_batch


def add_input_noise(batch: PatchBatch, noise_lambda: float, seed: int) -> PatchBatch:
    """Add lambda-scaled standard-normal noise per pixel (teacher path).

    The result is intentionally not re-clipped to [-1, 1]: clipping would
    bias the perturbation, so networks must tolerate slightly out-of-range
    inputs.
    """
    if not 0.0 < noise_lambda < 1.0:
        raise ConfigError(f"noise lambda must lie in (0, 1), got {noise_lambda}")
    gen = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(batch.pixels.shape, generator=gen, dtype=batch.pixels.dtype)
    return replace(batch, pixels=batch.pixels + noise_lambda * noise)
