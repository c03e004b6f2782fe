"""Whole-image prediction by patch stitching, Se/Sp/Acc metrics, difference
maps and report emission."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .data import PATCH_SIZE, normalize_pixels
from .discriminator import UNetDiscriminator, renormalized_posterior, VESSEL_CLASS
from .errors import ConfigError, DataError

REPORT_SCHEMA_VERSION = 1

# Difference-map palette (RGB).
COLOR_TRUE_POSITIVE = (255, 255, 255)
COLOR_TRUE_NEGATIVE = (0, 0, 0)
COLOR_FALSE_POSITIVE = (0, 0, 255)   # blue
COLOR_FALSE_NEGATIVE = (255, 255, 0)  # yellow


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


@dataclass(frozen=True)
class MetricsEntry:
    """Se/Sp/Acc from one confusion matrix; degenerate rates are None."""

    acc: float
    sp: Optional[float]
    se: Optional[float]


def _window_starts(length: int, stride: int) -> list[int]:
    starts = list(range(0, length - PATCH_SIZE + 1, stride))
    if starts[-1] != length - PATCH_SIZE:
        starts.append(length - PATCH_SIZE)
    return starts


def predict_full_image(
    model: UNetDiscriminator,
    image: np.ndarray,
    stride: int = 32,
    threshold: float = 0.5,
    window_batch: int = 32,
) -> tuple[np.ndarray, np.ndarray]:
    """Tile the image with 64x64 windows, average overlapping vessel
    posteriors, and threshold to a binary mask.

    ``image`` is an 8-bit array, (H, W) or (H, W, C); edge windows are
    aligned to the border; leaking is disabled at inference.
    """
    if not 1 <= stride <= PATCH_SIZE:
        raise ConfigError(f"stride must lie in [1, {PATCH_SIZE}], got {stride}")
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    if image.ndim == 2:
        image = image[:, :, None]
    h, w = image.shape[:2]
    if h < PATCH_SIZE or w < PATCH_SIZE:
        raise DataError(f"image {h}x{w} is smaller than a {PATCH_SIZE}x{PATCH_SIZE} patch")

    norm = normalize_pixels(image).transpose(2, 0, 1)
    dtype = next(model.parameters()).dtype
    origins = [(r, c) for r in _window_starts(h, stride) for c in _window_starts(w, stride)]

    prob_sum = np.zeros((h, w), dtype=np.float64)
    counts = np.zeros((h, w), dtype=np.float64)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for i in range(0, len(origins), window_batch):
                chunk = origins[i:i + window_batch]
                windows = np.stack(
                    [norm[:, r:r + PATCH_SIZE, c:c + PATCH_SIZE] for r, c in chunk]
                )
                logits, _ = model(
                    torch.from_numpy(windows).to(dtype), use_leak=False
                )
                p_vessel = renormalized_posterior(logits)[:, VESSEL_CLASS].cpu().numpy()
                for (r, c), p in zip(chunk, p_vessel):
                    prob_sum[r:r + PATCH_SIZE, c:c + PATCH_SIZE] += p
                    counts[r:r + PATCH_SIZE, c:c + PATCH_SIZE] += 1.0
    finally:
        model.train(was_training)

    prob = prob_sum / counts
    return prob, prob > threshold


def confusion_counts(
    pred: np.ndarray, gt: np.ndarray, fov: Optional[np.ndarray] = None
) -> ConfusionCounts:
    """Pixel confusion counts, restricted to fov==1 when a FOV mask is given."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if fov is not None:
        fov = np.asarray(fov, dtype=bool)
        if fov.shape != gt.shape:
            raise ValueError(f"fov shape {fov.shape} differs from masks {gt.shape}")
        pred, gt = pred[fov], gt[fov]
    return ConfusionCounts(
        tp=int(np.count_nonzero(pred & gt)),
        fp=int(np.count_nonzero(pred & ~gt)),
        tn=int(np.count_nonzero(~pred & ~gt)),
        fn=int(np.count_nonzero(~pred & gt)),
    )


def metrics(c: ConfusionCounts) -> MetricsEntry:
    """Se = TP/(TP+FN), Sp = TN/(TN+FP), Acc over all counted pixels.

    A rate with a zero denominator comes back as None (undefined marker);
    zero total pixels is an error.
    """
    if c.total == 0:
        raise ValueError("cannot compute metrics from all-zero confusion counts")
    se = c.tp / (c.tp + c.fn) if (c.tp + c.fn) > 0 else None
    sp = c.tn / (c.tn + c.fp) if (c.tn + c.fp) > 0 else None
    acc = (c.tp + c.tn) / c.total
    return MetricsEntry(acc=acc, sp=sp, se=se)


def difference_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """RGB rendering: TP white, TN black, FP blue, FN yellow."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    out[pred & gt] = COLOR_TRUE_POSITIVE
    out[pred & ~gt] = COLOR_FALSE_POSITIVE
    out[~pred & gt] = COLOR_FALSE_NEGATIVE
    return out


def format_metric_row(acc: float, sp: Optional[float], se: Optional[float]) -> str:
    """Table row with percentages at two decimals, e.g. '95.74 / 86.72 / 97.50'."""
    cells = [f"{100.0 * v:.2f}" if v is not None else "--" for v in (acc, sp, se)]
    return " / ".join(cells)


def emit_report(
    entries: Sequence[dict],
    setting: dict,
    out_dir: str | Path,
) -> Path:
    """Write report.json plus a plain-text Acc/Sp/Se table; returns the JSON path.

    Each entry carries a name and confusion counts; both pixel-pooled and
    per-image-mean aggregates are emitted and labelled. Images whose Se or
    Sp is undefined are excluded from that rate's per-image mean.
    """
    if not entries:
        raise ValueError("cannot emit a report from zero entries")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    per_image = []
    pooled = ConfusionCounts(0, 0, 0, 0)
    for e in entries:
        c = e["counts"] if isinstance(e["counts"], ConfusionCounts) else ConfusionCounts(**e["counts"])
        m = metrics(c)
        pooled = pooled + c
        per_image.append(
            {
                "name": e["name"],
                "counts": {"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn},
                "acc": m.acc,
                "sp": m.sp,
                "se": m.se,
                "fov_used": bool(e.get("fov_used", False)),
            }
        )

    pooled_m = metrics(pooled)

    def _mean(key):
        vals = [e[key] for e in per_image if e[key] is not None]
        return sum(vals) / len(vals) if vals else None

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "setting": setting,
        "per_image": per_image,
        "aggregate": {
            "pixel_pooled": {"acc": pooled_m.acc, "sp": pooled_m.sp, "se": pooled_m.se},
            "per_image_mean": {"acc": _mean("acc"), "sp": _mean("sp"), "se": _mean("se")},
        },
    }
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report, indent=2))

    lines = [
        "image | Acc(%) / Sp(%) / Se(%)",
        "------+-----------------------",
    ]
    for e in per_image:
        lines.append(f"{e['name']} | {format_metric_row(e['acc'], e['sp'], e['se'])}")
    lines.append(
        f"pixel-pooled | {format_metric_row(pooled_m.acc, pooled_m.sp, pooled_m.se)}"
    )
    mean_acc, mean_sp, mean_se = _mean("acc"), _mean("sp"), _mean("se")
    lines.append(f"per-image-mean | {format_metric_row(mean_acc, mean_sp, mean_se)}")
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")
    return json_path


def read_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def save_probability_map(prob: np.ndarray, path: str | Path) -> None:
    """16-bit grayscale PNG of a [0, 1] probability field."""
    arr = np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 65535.0).astype(np.uint16)).save(path)


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8) * 255, mode="L").save(path)


def save_difference_map(diff: np.ndarray, path: str | Path) -> None:
    Image.fromarray(diff, mode="RGB").save(path)
