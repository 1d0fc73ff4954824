"""Boundary-to-mask reconstruction, pyramid inference, pixel metrics, visualisations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import INPUT_HEIGHT, INPUT_WIDTH, BoundaryTargets, make_input, resize_mask
from .model import BoundaryPrediction, ModelParams, predict
from .tensor import interpolation_matrix


def mask_from_boundaries(pred: BoundaryPrediction | BoundaryTargets, width: int = INPUT_WIDTH,
                         height: int = INPUT_HEIGHT) -> np.ndarray:
    """Road = columns between the side bounds, rows below the per-column top, down to the bottom.

    A prediction supplies its own upsampled top curve.  Targets hold the highest
    road row of each bin, so every column of a bin gets that bin's value.
    """
    if isinstance(pred, BoundaryTargets):
        bins = np.asarray(pred.top, dtype=np.float64)
        if width % len(bins):
            raise ValueError(f"width {width} is not a multiple of {len(bins)} bins")
        p, top = pred, np.repeat(bins, width // len(bins))
    else:
        p = pred.numpy()
        top = np.asarray(p.top_upsampled, dtype=np.float64)
        if top.shape != (width,):
            top = interpolation_matrix(len(p.top), width) @ np.asarray(p.top, np.float64)
    first_col = int(np.round(float(p.left) * width))
    last_col = width - 1 - int(np.round(float(p.right) * width))
    first_row = height - np.round(top * height).astype(int)  # per column
    cols = np.arange(width)
    in_span = (cols >= first_col) & (cols <= last_col)
    rows = np.arange(height)[:, None]
    return (rows >= first_row[None, :]) & in_span[None, :]


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "MetricsCounts") -> "MetricsCounts":
        return MetricsCounts(self.tp + other.tp, self.fp + other.fp,
                             self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    counts: MetricsCounts
    precision: float
    recall: float
    f1: float
    ap: float
    fpr: float
    fnr: float
    degenerate: frozenset = field(default_factory=frozenset)

    COLUMNS = ("F1", "AP", "PRE", "REC", "FPR", "FNR")

    def row(self) -> tuple[float, ...]:
        return (self.f1, self.ap, self.precision, self.recall, self.fpr, self.fnr)


def confusion_counts(pred_mask, gt_mask) -> MetricsCounts:
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return MetricsCounts(tp, fp, pred.size - tp - fp - fn, fn)


def report_from_counts(c: MetricsCounts) -> MetricsReport:
    degenerate = set()

    def ratio(num, den, name):
        if den == 0:
            degenerate.add(name)
            return 0.0
        return num / den

    precision = ratio(c.tp, c.tp + c.fp, "precision")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    ap = ratio(c.tp + c.tn, c.total, "ap")
    fpr = ratio(c.fp, c.fp + c.tn, "fpr")
    fnr = ratio(c.fn, c.fn + c.tp, "fnr")
    return MetricsReport(c, precision, recall, f1, ap, fpr, fnr, frozenset(degenerate))


def compute_metrics(pred_mask, gt_mask) -> MetricsReport:
    """Precision, recall, F1, AP = pixel accuracy, FPR and FNR.

    Zero denominators yield 0 and are listed in ``degenerate``.
    """
    return report_from_counts(confusion_counts(pred_mask, gt_mask))


def format_table(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    header = f"{'image':<24}" + "".join(f"{c:>9}" for c in MetricsReport.COLUMNS)
    lines = [header, "-" * len(header)]
    for name, rep in rows:
        lines.append(f"{name:<24}" + "".join(f"{100 * v:8.2f}%" for v in rep.row()))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# visualisation

GREEN = np.array([0, 255, 0], np.uint8)
BLUE = np.array([0, 0, 255], np.uint8)
RED = np.array([255, 0, 0], np.uint8)


def confusion_image(pred_mask, gt_mask, image: np.ndarray | None = None) -> np.ndarray:
    """TP green, FP blue, FN red; TN keeps the image pixel (black without one)."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if image is None:
        out = np.zeros(pred.shape + (3,), np.uint8)
    else:
        if image.shape[:2] != pred.shape:
            raise ValueError(f"image {image.shape[:2]} does not match masks {pred.shape}")
        out = image.copy()
    out[pred & gt] = GREEN
    out[pred & ~gt] = BLUE
    out[~pred & gt] = RED
    return out


def heatmap(masks: Iterable[np.ndarray], width: int = INPUT_WIDTH,
            height: int = INPUT_HEIGHT) -> np.ndarray:
    """Per-pixel road frequency over masks resized to ``height x width``."""
    total = np.zeros((height, width))
    n = 0
    for m in masks:
        total += resize_mask(np.asarray(m, bool), width, height)
        n += 1
    if n == 0:
        raise ValueError("heat map needs at least one mask")
    return total / n


# ---------------------------------------------------------------------------
# pyramid inference


@dataclass
class PyramidResult:
    mask: np.ndarray
    near_mask: np.ndarray
    near: BoundaryPrediction
    far_mask: np.ndarray | None = None
    far: BoundaryPrediction | None = None
    crop: tuple[int, int] | None = None  # (x0, y0) of the far window


def far_crop_origin(near_mask: np.ndarray) -> tuple[int, int]:
    """Window centred horizontally and vertically on the near pass's topmost road row."""
    h, w = near_mask.shape
    rows = np.flatnonzero(near_mask.any(axis=1))
    top = int(rows[0]) if rows.size else h // 2
    y0 = int(np.clip(top - INPUT_HEIGHT // 2, 0, h - INPUT_HEIGHT))
    x0 = (w - INPUT_WIDTH) // 2
    return x0, y0


def pyramid_predict(image: np.ndarray, params: ModelParams, pyramid: bool = True,
                    fusion: str = "union") -> PyramidResult:
    """Near pass on the squeezed frame, optional far pass on a native-resolution crop.

    ``fusion="union"`` ORs the placed far mask into the near mask;
    ``"intersection"`` keeps only pixels both passes agree on inside the crop.
    """
    if fusion not in ("union", "intersection"):
        raise ValueError(f"fusion must be 'union' or 'intersection', got {fusion!r}")
    h, w = image.shape[:2]
    near = predict(make_input(image), params)
    near_small = mask_from_boundaries(near)
    near_mask = _upscale_mask(near_small, w, h)
    result = PyramidResult(near_mask.copy(), near_mask, near)
    if not pyramid or h < INPUT_HEIGHT or w < INPUT_WIDTH:
        return result

    x0, y0 = far_crop_origin(near_mask)
    crop = image[y0:y0 + INPUT_HEIGHT, x0:x0 + INPUT_WIDTH]
    far = predict(make_input(crop), params)
    far_mask = np.zeros_like(near_mask)
    far_mask[y0:y0 + INPUT_HEIGHT, x0:x0 + INPUT_WIDTH] = mask_from_boundaries(far)
    if fusion == "union":
        fused = near_mask | far_mask
    else:
        fused = near_mask.copy()
        window = (slice(y0, y0 + INPUT_HEIGHT), slice(x0, x0 + INPUT_WIDTH))
        fused[window] &= far_mask[window]
    result.mask, result.far_mask, result.far, result.crop = fused, far_mask, far, (x0, y0)
    return result


def _upscale_mask(mask: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbour resize of a binary mask (pixel centres mapped back)."""
    if mask.shape == (height, width):
        return mask.copy()
    mh, mw = mask.shape
    rows = np.minimum(((np.arange(height) + 0.5) * mh / height).astype(int), mh - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * mw / width).astype(int), mw - 1)
    return mask[rows[:, None], cols[None, :]]
