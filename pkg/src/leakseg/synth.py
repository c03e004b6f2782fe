"""Built-in synthetic vessel corpus: branching curves on textured canvases.

Stands in for fundus photographs at desk scale. Each image is a grayscale
canvas with dark vessel trees; the mask is the exact binary render of the
curves, so ground truth is perfect by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError

MIN_CANVAS = 64


@dataclass(frozen=True)
class SynthParams:
    """Knobs for one synthetic image.

    ``contrast`` is the signed foreground-minus-background intensity gap
    (vessels default darker, as in fundus photographs). ``intensity_shift``
    moves the whole canvas, emulating cross-domain appearance drift.
    ``*_jitter`` ranges are sampled per image when writing a corpus.
    """

    canvas: int = 96
    depth: int = 3
    width_range: tuple[float, float] = (1.0, 4.0)
    n_roots: int = 2
    background_level: float = 0.62
    background_jitter: float = 0.0
    contrast: float = -0.35
    contrast_jitter: float = 0.0
    noise_level: float = 0.03
    intensity_shift: float = 0.0
    blur_sigma: float = 0.7

    def validate(self) -> None:
        if self.canvas < MIN_CANVAS:
            raise ConfigError(f"canvas must be >= {MIN_CANVAS}, got {self.canvas}")
        if self.depth < 1:
            raise ConfigError(f"branch depth must be >= 1, got {self.depth}")
        lo, hi = self.width_range
        if lo < 1.0 or hi < lo:
            raise ConfigError(f"vessel width range must satisfy 1 <= min <= max, got {self.width_range}")
        if self.n_roots < 1:
            raise ConfigError("need at least one root vessel")


def _stamp_disk(mask: np.ndarray, y: float, x: float, radius: float) -> None:
    """Set all pixels whose centers lie within ``radius`` of (y, x)."""
    size = mask.shape[0]
    r0 = max(0, int(math.floor(y - radius)))
    r1 = min(size - 1, int(math.ceil(y + radius)))
    c0 = max(0, int(math.floor(x - radius)))
    c1 = min(size - 1, int(math.ceil(x + radius)))
    if r0 > r1 or c0 > c1:
        return
    yy, xx = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    mask[r0:r1 + 1, c0:c1 + 1] |= (yy - y) ** 2 + (xx - x) ** 2 <= radius ** 2


def _walk_vessel(
    mask: np.ndarray,
    rng: np.random.Generator,
    y: float,
    x: float,
    heading: float,
    width: float,
    depth: int,
    params: SynthParams,
) -> None:
    """Draw one meandering vessel and recursively spawn thinner branches."""
    size = params.canvas
    length = int(rng.integers(size // 2, size + size // 2))
    branch_points: list[tuple[float, float, float]] = []
    step = 0.5  # sub-pixel stepping keeps strokes gap-free
    for i in range(int(length / step)):
        _stamp_disk(mask, y, x, width / 2.0)
        heading += rng.normal(0.0, 0.08)
        y += step * math.sin(heading)
        x += step * math.cos(heading)
        if not (-width <= y <= size + width and -width <= x <= size + width):
            break
        # occasionally remember a spot where a child vessel may sprout
        if depth > 1 and rng.random() < 0.015:
            branch_points.append((y, x, heading))
    for by, bx, bh in branch_points[:2]:
        child_heading = bh + rng.choice([-1.0, 1.0]) * rng.uniform(0.4, 1.1)
        child_width = max(1.0, width * rng.uniform(0.5, 0.75))
        _walk_vessel(mask, rng, by, bx, child_heading, child_width, depth - 1, params)


def synth_vessel_image(params: SynthParams, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render one (image, mask) pair; deterministic in ``seed``.

    Returns an 8-bit grayscale image (H, W) and a boolean vessel mask.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    size = params.canvas
    mask = np.zeros((size, size), dtype=bool)

    lo, hi = params.width_range
    for _ in range(params.n_roots):
        edge = rng.integers(4)
        t = float(rng.uniform(0.15, 0.85)) * size
        if edge == 0:
            y, x, heading = 0.0, t, rng.uniform(0.25 * math.pi, 0.75 * math.pi)
        elif edge == 1:
            y, x, heading = float(size - 1), t, rng.uniform(-0.75 * math.pi, -0.25 * math.pi)
        elif edge == 2:
            y, x, heading = t, 0.0, rng.uniform(-0.25 * math.pi, 0.25 * math.pi)
        else:
            y, x, heading = t, float(size - 1), rng.uniform(0.75 * math.pi, 1.25 * math.pi)
        width = float(rng.uniform(lo, hi))
        _walk_vessel(mask, rng, y, x, heading, width, params.depth, params)

    background = params.background_level + params.intensity_shift
    image = np.full((size, size), background, dtype=np.float64)
    if params.noise_level > 0:
        image += params.noise_level * rng.standard_normal((size, size))
    foreground = mask.astype(np.float64)
    if params.blur_sigma > 0:
        foreground = gaussian_filter(foreground, params.blur_sigma)
    image += params.contrast * foreground
    image = np.clip(image, 0.0, 1.0)
    return np.round(image * 255.0).astype(np.uint8), mask


def write_synthetic_corpus(
    out_dir: str | Path,
    count: int,
    params: SynthParams,
    seed: int,
) -> Path:
    """Emit ``count`` PNG pairs plus a manifest; returns the manifest path.

    Per-image background/contrast jitter is sampled here so a corpus shows
    appearance variation across images, not only across crops.
    """
    if count < 1:
        raise ConfigError(f"corpus count must be >= 1, got {count}")
    params.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        image_seed = int(rng.integers(2**31 - 1))
        per_image = params
        if params.background_jitter or params.contrast_jitter:
            per_image = SynthParams(
                **{
                    **asdict(params),
                    "background_level": params.background_level
                    + float(rng.uniform(-params.background_jitter, params.background_jitter)),
                    "contrast": params.contrast
                    + float(rng.uniform(-params.contrast_jitter, params.contrast_jitter)),
                    "background_jitter": 0.0,
                    "contrast_jitter": 0.0,
                }
            )
        image, mask = synth_vessel_image(per_image, image_seed)
        image_rel = f"images/synth_{i:04d}.png"
        mask_rel = f"masks/synth_{i:04d}.png"
        Image.fromarray(image, mode="L").save(out_dir / image_rel)
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out_dir / mask_rel)
        entries.append(
            {"image": image_rel, "mask": mask_rel, "seed": image_seed, "params": asdict(per_image)}
        )

    manifest = {
        "layout": "synthetic",
        "resolution": [params.canvas, params.canvas],
        "corpus_seed": seed,
        "images": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path
