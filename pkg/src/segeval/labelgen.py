"""Pixel-attention, attended pooling, k-means and pixel-label assignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .tensor import (
    MlpParams,
    as_dense,
    global_avg_pool,
    l2_normalize_channels,
    mlp_forward,
    normalize_rows,
    pixels,
)

PRNG_NAME = "numpy.random.PCG64"
DEFAULT_TAU = 0.5
DEFAULT_MAX_ITERS = 100

_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = 1.0 - 2.0 ** -53


def sigmoid(x):
    """Logistic function clipped so the result stays strictly inside (0, 1)."""
    return np.clip(expit(x), _SIG_LO, _SIG_HI)


@dataclass
class AttentionParams:
    m_a: MlpParams
    theta: np.ndarray

    def __post_init__(self):
        self.theta = as_dense(self.theta, 1)
        l = self.theta.shape[0]
        if self.m_a.in_dim != l or self.m_a.out_dim != l:
            raise ValueError(f"attention layer must map {l} -> {l} channels")

    @property
    def dim(self) -> int:
        return self.theta.shape[0]

    @classmethod
    def affine(cls, weight, bias, theta):
        return cls(MlpParams([(weight, bias)], activation="identity"), theta)

    @classmethod
    def zeros(cls, dim):
        """Zero layer and zero theta: every attention value is 0.5."""
        return cls.affine(np.zeros((dim, dim)), np.zeros(dim), np.zeros(dim))


def pixel_attention(params: AttentionParams, z) -> np.ndarray:
    """Per-channel, per-pixel attention ``sigmoid(M_A(normalize(z)) + theta)``."""
    z = as_dense(z, 3)
    l, h, w = z.shape
    if l != params.dim:
        raise ValueError(f"embedding has {l} channels, attention expects {params.dim}")
    rows = pixels(l2_normalize_channels(z))
    act = mlp_forward(params.m_a, rows) + params.theta
    return sigmoid(act).T.reshape(l, h, w)


def _check_same(z, c):
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if z.shape != c.shape or z.ndim != 3:
        raise ValueError(f"attention shape {c.shape} does not match embedding shape {z.shape}")
    return z, c


def attended_pool_raw(z, c) -> np.ndarray:
    """Image embedding for clustering: pool of attention times the raw features."""
    z, c = _check_same(z, c)
    return global_avg_pool(c * z)


def attended_pool_normalized(z, c) -> np.ndarray:
    """Pool of attention times channel-normalized features (the fine-tuning path)."""
    z, c = _check_same(z, c)
    return global_avg_pool(c * l2_normalize_channels(z))


# -- k-means ----------------------------------------------------------------

def squared_distances(x, centers, chunk=4096) -> np.ndarray:
    """Exact ``||x_i - c_j||^2`` via explicit differences (no expansion trick)."""
    x = np.asarray(x, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    out = np.empty((x.shape[0], centers.shape[0]))
    step = max(1, chunk // max(1, centers.shape[0]))
    for lo in range(0, x.shape[0], step):
        diff = x[lo:lo + step, None, :] - centers[None, :, :]
        out[lo:lo + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _assign(d2, prev=None):
    labels = np.argmin(d2, axis=1)
    if prev is not None:
        best = d2[np.arange(d2.shape[0]), labels]
        keep = d2[np.arange(d2.shape[0]), prev] == best
        labels = np.where(keep, prev, labels)
    return labels


def _means(x, labels, k):
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k)
    return sums / np.maximum(counts, 1)[:, None], counts


def _update(x, labels, k):
    """Centroid means; empty clusters take the point farthest from its centroid."""
    labels = labels.copy()
    centers, counts = _means(x, labels, k)
    for e in np.flatnonzero(counts == 0):
        d = np.einsum("ij,ij->i", x - centers[labels], x - centers[labels])
        d[counts[labels] <= 1] = -1.0
        far = int(np.argmax(d))
        if d[far] < 0:
            raise ValueError("cannot re-seed an empty cluster: every cluster is a singleton")
        labels[far] = e
        centers, counts = _means(x, labels, k)
    return centers, labels


def objective(x, labels, centers) -> float:
    diff = np.asarray(x) - centers[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def kmeans_plusplus(x, k, rng) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = squared_distances(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rest[rng.integers(rest.size)])
        chosen.append(idx)
        d2 = np.minimum(d2, squared_distances(x, x[idx:idx + 1])[:, 0])
    return x[chosen].copy()


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    prng: str = PRNG_NAME

    @property
    def objective(self) -> float:
        return self.history[-1] if self.history else float("nan")


def kmeans(vectors, n_clusters, seed=0, max_iters=DEFAULT_MAX_ITERS) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding.

    ``history`` holds the objective after every centroid update and never
    increases. ``converged`` means the final assignment is a fixpoint.
    """
    x = as_dense(vectors, 2)
    n = x.shape[0]
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    if n < n_clusters:
        raise ValueError(f"cannot form {n_clusters} clusters from {n} points")
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = kmeans_plusplus(x, n_clusters, rng)
    labels = _assign(squared_distances(x, centers))
    result = KMeansResult(centers, labels)
    for it in range(1, max_iters + 1):
        centers, labels = _update(x, labels, n_clusters)
        result.history.append(objective(x, labels, centers))
        result.iterations = it
        new = _assign(squared_distances(x, centers), prev=labels)
        if np.array_equal(new, labels):
            result.converged = True
            break
        labels = new
    result.centers, result.labels = centers, labels
    return result


# -- gating, assignment, resizing, inference ---------------------------------

def foreground_gate(c, tau=DEFAULT_TAU) -> np.ndarray:
    """1 where the channel-mean attention reaches ``tau``, else 0."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie strictly between 0 and 1")
    c = np.asarray(c, dtype=np.float64)
    return (c.mean(axis=0) >= tau).astype(np.uint8)


def assign_pixels(z, centers, gate=None) -> np.ndarray:
    """Nearest-centroid label (index + 1) for gated pixels, 0 elsewhere."""
    z = as_dense(z, 3)
    centers = np.asarray(centers, dtype=np.float64)
    l, h, w = z.shape
    if centers.ndim != 2 or centers.shape[1] != l:
        raise ValueError(f"centroids of shape {centers.shape} do not match {l} channels")
    if gate is None:
        gate = np.ones((h, w), dtype=np.uint8)
    gate = np.asarray(gate)
    if gate.shape != (h, w):
        raise ValueError(f"gate shape {gate.shape} != feature grid {(h, w)}")
    rows = normalize_rows(pixels(z))
    labels = np.argmin(squared_distances(rows, centers), axis=1) + 1
    labels = np.where(gate.ravel() != 0, labels, 0)
    return labels.reshape(h, w).astype(np.uint16)


def resize_nearest(mask, width, height) -> np.ndarray:
    """Nearest-neighbour resampling by pixel centers."""
    mask = np.asarray(mask)
    h, w = mask.shape
    rows = ((2 * np.arange(height) + 1) * h) // (2 * height)
    cols = ((2 * np.arange(width) + 1) * w) // (2 * width)
    return mask[rows[:, None], cols[None, :]]


def upsample_nearest(mask, width, height) -> np.ndarray:
    mask = np.asarray(mask)
    h, w = mask.shape
    if width < w or height < h:
        raise ValueError(f"target {width}x{height} is smaller than source {w}x{h}")
    return resize_nearest(mask, width, height)


def argmax_inference(logits) -> np.ndarray:
    """Per-pixel argmax over ``C+1`` channels (channel 0 is "other")."""
    logits = as_dense(logits, 3)
    return np.argmax(logits, axis=0).astype(np.uint16)


def normalize_cam(cam):
    """Min-max normalization; None for a constant map (it carries no localization)."""
    cam = np.asarray(cam, dtype=np.float64)
    lo, hi = cam.min(), cam.max()
    if hi == lo:
        return None
    return (cam - lo) / (hi - lo)


def cam_infer(cams, tau=DEFAULT_TAU, categories=None) -> np.ndarray:
    """Threshold min-max normalized CAMs; overlaps go to the larger activation.

    ``cams`` is a sequence of H x W maps, one per predicted category
    (``categories`` defaults to 1..K). Ties go to the earlier category.
    """
    cams = [np.asarray(a, dtype=np.float64) for a in cams]
    if not cams:
        raise ValueError("need at least one CAM")
    if not 0 <= tau <= 1:
        raise ValueError("tau must lie in [0, 1]")
    if categories is None:
        categories = list(range(1, len(cams) + 1))
    if len(categories) != len(cams):
        raise ValueError("need one category id per CAM")
    shape = cams[0].shape
    best = np.full(shape, -np.inf)
    out = np.zeros(shape, dtype=np.uint16)
    for cat, cam in zip(categories, cams):
        if cam.shape != shape:
            raise ValueError("CAMs must share one shape")
        norm = normalize_cam(cam)
        if norm is None:
            continue
        win = (norm >= tau) & (norm > best)
        out[win] = cat
        best = np.where(win, norm, best)
    return out
