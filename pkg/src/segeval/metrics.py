"""Segmentation metrics: mIoU, boundary mIoU, image-level accuracy and F-beta.

Every dataset-level quantity is built from integer counts (or per-image
scores summed with :func:`math.fsum`), so merging per-image or per-shard
results in any order gives identical numbers.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import ndimage

from .formats import IGNORE

BETA_SQ = 0.3
DEFAULT_D_FRAC = 0.03


class SizeBucket(enum.Enum):
    SMALL = "small"
    MEDIUM_SMALL = "medium-small"
    MEDIUM_LARGE = "medium-large"
    LARGE = "large"


# Half-open [lo, hi) upper edges; LARGE is closed at 100%.
_BUCKET_EDGES = (
    (Fraction(1, 20), SizeBucket.SMALL),
    (Fraction(1, 4), SizeBucket.MEDIUM_SMALL),
    (Fraction(1, 2), SizeBucket.MEDIUM_LARGE),
)


def _check_pair(gt, pred, n_categories):
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"gt shape {gt.shape} != prediction shape {pred.shape}")
    if np.any(pred == IGNORE):
        raise ValueError("prediction contains the ignore sentinel")
    if np.any(pred > n_categories):
        raise ValueError(f"prediction id {int(pred.max())} exceeds category count {n_categories}")
    if np.any((gt > n_categories) & (gt != IGNORE)):
        raise ValueError(f"gt id exceeds category count {n_categories}")
    return gt.astype(np.int64), pred.astype(np.int64)


@dataclass
class IoUCounts:
    """Per-class intersection and union pixel counts for classes 0..C."""

    n_categories: int
    inter: np.ndarray = None
    union: np.ndarray = None

    def __post_init__(self):
        n = self.n_categories + 1
        if self.inter is None:
            self.inter = np.zeros(n, dtype=np.int64)
        if self.union is None:
            self.union = np.zeros(n, dtype=np.int64)

    def __add__(self, other):
        if other.n_categories != self.n_categories:
            raise ValueError("category count mismatch")
        return IoUCounts(self.n_categories, self.inter + other.inter, self.union + other.union)

    def class_iou(self) -> np.ndarray:
        """IoU per class, NaN where the union is empty."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.union > 0, self.inter / np.maximum(self.union, 1), np.nan)

    def mean_iou(self, classes=None) -> float:
        """Mean IoU in percent over classes with non-empty union."""
        inter, union = self.inter, self.union
        if classes is not None:
            inter, union = inter[classes], union[classes]
        keep = union > 0
        if not np.any(keep):
            return math.nan
        return 100.0 * math.fsum(inter[keep] / union[keep]) / int(keep.sum())


@dataclass
class ConfusionAccumulator:
    """``counts[i, j]`` = pixels with ground truth ``i`` predicted as ``j``."""

    n_categories: int
    counts: np.ndarray = None

    def __post_init__(self):
        n = self.n_categories + 1
        if self.counts is None:
            self.counts = np.zeros((n, n), dtype=np.uint64)
        elif self.counts.shape != (n, n):
            raise ValueError(f"counts must be {n}x{n}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other):
        return merge(self, other)

    def iou_counts(self) -> IoUCounts:
        t = self.counts.astype(np.int64)
        diag = np.diag(t)
        return IoUCounts(self.n_categories, diag.copy(), t.sum(axis=1) + t.sum(axis=0) - diag)


def confusion_accumulate(gt, pred, n_categories) -> ConfusionAccumulator:
    gt, pred = _check_pair(gt, pred, n_categories)
    valid = gt != IGNORE
    n = n_categories + 1
    flat = gt[valid] * n + pred[valid]
    counts = np.bincount(flat, minlength=n * n).reshape(n, n).astype(np.uint64)
    return ConfusionAccumulator(n_categories, counts)


def merge(a: ConfusionAccumulator, b: ConfusionAccumulator) -> ConfusionAccumulator:
    if a.n_categories != b.n_categories:
        raise ValueError(f"cannot merge accumulators for C={a.n_categories} and C={b.n_categories}")
    return ConfusionAccumulator(a.n_categories, a.counts + b.counts)


def miou_from_confusion(acc: ConfusionAccumulator) -> float:
    """Mean IoU in percent; classes absent from both gt and prediction are skipped."""
    if acc.total == 0:
        raise ValueError("no pixels were accumulated")
    return acc.iou_counts().mean_iou()


# -- boundary IoU -----------------------------------------------------------

def boundary_radius(shape, d_frac) -> int:
    if d_frac <= 0:
        raise ValueError("d_frac must be positive")
    h, w = shape
    return max(1, math.floor(d_frac * math.hypot(h, w) + 0.5))


def boundary_band(mask, d_frac=None, radius=None) -> np.ndarray:
    """Inner boundary band: the mask minus its erosion by a Euclidean disk.

    Pixels outside the image count as background, so the image border is
    part of the contour.
    """
    mask = np.asarray(mask, dtype=bool)
    if radius is None:
        radius = boundary_radius(mask.shape, d_frac)
    if not mask.any():
        return np.zeros_like(mask)
    dist = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    return mask & (dist <= radius)


def boundary_counts(gt, pred, n_categories, d_frac=DEFAULT_D_FRAC) -> IoUCounts:
    gt, pred = _check_pair(gt, pred, n_categories)
    radius = boundary_radius(gt.shape, d_frac)
    valid = gt != IGNORE
    out = IoUCounts(n_categories)
    present = np.union1d(np.unique(gt[valid]), np.unique(pred[valid]))
    for c in present:
        gb = boundary_band(gt == c, radius=radius)
        pb = boundary_band(pred == c, radius=radius)
        out.inter[c] = np.count_nonzero(gb & pb & valid)
        out.union[c] = np.count_nonzero((gb | pb) & valid)
    return out


def boundary_miou(gt, pred, n_categories, d_frac=DEFAULT_D_FRAC) -> float:
    """Boundary mIoU in percent for one image pair, or a sequence of pairs."""
    if isinstance(gt, np.ndarray) and gt.ndim == 2:
        pairs = [(gt, pred)]
    else:
        pairs = list(zip(gt, pred))
    total = IoUCounts(n_categories)
    for g, p in pairs:
        total = total + boundary_counts(g, p, n_categories, d_frac)
    return total.mean_iou()


# -- image-level accuracy ---------------------------------------------------

def largest_category(pred, n_categories=None):
    """Non-"other" category with the largest area, smallest id on ties; None if absent."""
    pred = np.asarray(pred).astype(np.int64)
    ids = pred[(pred != 0) & (pred != IGNORE)]
    if ids.size == 0:
        return None
    return int(np.argmax(np.bincount(ids)))


def img_acc(pred, gt_categories) -> bool:
    top = largest_category(pred)
    return top is not None and top in gt_categories


# -- F-beta -----------------------------------------------------------------

def f_beta(gt, pred, beta_sq=BETA_SQ):
    """Per-image F-beta of the binary foreground; None if gt has no foreground."""
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"gt shape {gt.shape} != prediction shape {pred.shape}")
    valid = gt != IGNORE
    g = (gt != 0) & valid
    p = (pred != 0) & valid
    n_g = int(np.count_nonzero(g))
    if n_g == 0:
        return None
    n_p = int(np.count_nonzero(p))
    tp = int(np.count_nonzero(g & p))
    if n_p == 0 or tp == 0:
        return 0.0
    precision = tp / n_p
    recall = tp / n_g
    return (1 + beta_sq) * precision * recall / (beta_sq * precision + recall)


def f_beta_dataset(scores) -> float:
    kept = [s for s in scores if s is not None]
    if not kept:
        return math.nan
    return 100.0 * math.fsum(kept) / len(kept)


# -- object sizes -----------------------------------------------------------

def bucket_for_ratio(ratio) -> SizeBucket:
    if ratio < 0 or ratio > 1:
        raise ValueError(f"size ratio {ratio} outside [0, 1]")
    for edge, bucket in _BUCKET_EDGES:
        if ratio < edge:
            return bucket
    return SizeBucket.LARGE


def size_bucket(gt, category) -> SizeBucket:
    gt = np.asarray(gt)
    count = int(np.count_nonzero(gt == category))
    if count == 0:
        raise ValueError(f"category {category} is absent from the mask")
    return bucket_for_ratio(Fraction(count, gt.size))


# -- dataset evaluation -----------------------------------------------------

def _empty_buckets(n_categories):
    return {b: IoUCounts(n_categories) for b in SizeBucket}


@dataclass
class EvalAccumulator:
    """Everything the evaluation report needs, mergeable across shards."""

    n_categories: int
    confusion: ConfusionAccumulator = None
    boundary: IoUCounts = None
    size_mask: dict = None
    size_boundary: dict = None
    images: int = 0
    img_correct: int = 0
    f_scores: list = field(default_factory=list)

    def __post_init__(self):
        c = self.n_categories
        self.confusion = self.confusion or ConfusionAccumulator(c)
        self.boundary = self.boundary or IoUCounts(c)
        self.size_mask = self.size_mask or _empty_buckets(c)
        self.size_boundary = self.size_boundary or _empty_buckets(c)

    def __add__(self, other):
        if other.n_categories != self.n_categories:
            raise ValueError("category count mismatch")
        return EvalAccumulator(
            self.n_categories,
            self.confusion + other.confusion,
            self.boundary + other.boundary,
            {b: self.size_mask[b] + other.size_mask[b] for b in SizeBucket},
            {b: self.size_boundary[b] + other.size_boundary[b] for b in SizeBucket},
            self.images + other.images,
            self.img_correct + other.img_correct,
            self.f_scores + other.f_scores,
        )

    def summary(self) -> dict:
        out = {
            "images": self.images,
            "pixels": self.confusion.total,
            "miou": miou_from_confusion(self.confusion) if self.confusion.total else math.nan,
            "b_miou": self.boundary.mean_iou(),
            "img_acc": 100.0 * self.img_correct / self.images if self.images else math.nan,
            "f_beta": f_beta_dataset(self.f_scores),
        }
        for b in SizeBucket:
            out[f"miou[{b.value}]"] = self.size_mask[b].mean_iou()
            out[f"b_miou[{b.value}]"] = self.size_boundary[b].mean_iou()
        return out


def evaluate_image(gt, pred, n_categories, gt_categories=None, d_frac=DEFAULT_D_FRAC) -> EvalAccumulator:
    """Score one image; ``gt_categories`` defaults to the major ids present in ``gt``."""
    acc = EvalAccumulator(n_categories)
    acc.confusion = confusion_accumulate(gt, pred, n_categories)
    acc.boundary = boundary_counts(gt, pred, n_categories, d_frac)
    gt_arr = np.asarray(gt)
    if gt_categories is None:
        gt_categories = {int(k) for k in np.unique(gt_arr) if k not in (0, IGNORE)}
    mask_iou = acc.confusion.iou_counts()
    for c in np.unique(gt_arr):
        c = int(c)
        if c in (0, IGNORE):
            continue
        b = size_bucket(gt_arr, c)
        acc.size_mask[b].inter[c] = mask_iou.inter[c]
        acc.size_mask[b].union[c] = mask_iou.union[c]
        acc.size_boundary[b].inter[c] = acc.boundary.inter[c]
        acc.size_boundary[b].union[c] = acc.boundary.union[c]
    acc.images = 1
    acc.img_correct = int(img_acc(pred, gt_categories))
    score = f_beta(gt, pred)
    acc.f_scores = [] if score is None else [score]
    return acc
