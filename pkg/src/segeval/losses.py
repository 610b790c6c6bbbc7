"""Representation-learning loss kernels with analytic gradients.

Stop-gradient operands are modelled as snapshots: every kernel accepts an
optional ``detached`` argument holding the values the stop-gradient branch
reads. When omitted they are computed from the current inputs, which is what
training code wants; passing a frozen snapshot turns the kernel into an
ordinary function whose full gradient is exactly the analytic one returned,
which is how :func:`grad_check` verifies it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .labelgen import AttentionParams, sigmoid
from .tensor import (
    MlpParams,
    as_dense,
    flat_grads,
    l2_normalize_channels,
    mlp_backward,
    mlp_forward,
    pixels,
)

STAGES = (1, 2, 3, 4)


@dataclass
class LossBundle:
    value: float
    grads: dict = field(default_factory=dict)
    terms: dict = field(default_factory=dict)


# -- view overlap -----------------------------------------------------------

@dataclass(frozen=True)
class ViewGeometry:
    """A crop ``(x, y, w, h)`` in original-image pixels and its feature grid size."""

    x: int
    y: int
    w: int
    h: int
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if min(self.w, self.h, self.grid_h, self.grid_w) <= 0:
            raise ValueError("crop and grid dimensions must be positive")
        if self.x < 0 or self.y < 0:
            raise ValueError("crop origin must lie inside the image")


@dataclass
class OverlapPairs:
    cells1: np.ndarray  # (N, 2) row, col in view 1
    cells2: np.ndarray
    z1: np.ndarray  # (N, L) features of view 1 at cells1
    z2: np.ndarray

    def __len__(self):
        return len(self.cells1)


def _axis_pairs(o1, s1, n1, o2, s2, n2):
    """Cells of axis 1 whose centers fall in the overlap, and their nearest axis-2 cells.

    All arithmetic is on integers: the center of cell ``c`` sits at
    ``o1 + (2c + 1) * s1 / (2 * n1)``.
    """
    lo, hi = max(o1, o2), min(o1 + s1, o2 + s2)
    if lo >= hi:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    c = np.arange(n1)
    twice = 2 * n1 * o1 + (2 * c + 1) * s1  # center * 2 * n1
    inside = (twice >= lo * 2 * n1) & (twice < hi * 2 * n1)
    c = c[inside]
    num = (2 * n1 * (o1 - o2) + (2 * c + 1) * s1) * n2
    den = 2 * n1 * s2
    k = -((-num) // den) - 1  # nearest center, ties to the smaller index
    return c, np.clip(k, 0, n2 - 1)


def overlap_extract(g1: ViewGeometry, g2: ViewGeometry, z1=None, z2=None) -> OverlapPairs:
    rows1, rows2 = _axis_pairs(g1.y, g1.h, g1.grid_h, g2.y, g2.h, g2.grid_h)
    cols1, cols2 = _axis_pairs(g1.x, g1.w, g1.grid_w, g2.x, g2.w, g2.grid_w)
    r1, c1 = np.meshgrid(rows1, cols1, indexing="ij")
    r2, c2 = np.meshgrid(rows2, cols2, indexing="ij")
    cells1 = np.stack([r1.ravel(), c1.ravel()], axis=1)
    cells2 = np.stack([r2.ravel(), c2.ravel()], axis=1)
    f1 = f2 = None
    if z1 is not None and z2 is not None:
        z1 = as_dense(z1, 3)
        z2 = as_dense(z2, 3)
        if z1.shape[1:] != (g1.grid_h, g1.grid_w) or z2.shape[1:] != (g2.grid_h, g2.grid_w):
            raise ValueError("feature maps do not match their view geometry")
        f1 = z1[:, cells1[:, 0], cells1[:, 1]].T
        f2 = z2[:, cells2[:, 0], cells2[:, 1]].T
    return OverlapPairs(cells1, cells2, f1, f2)


# -- cosine -----------------------------------------------------------------

def _cos_rows(a, b):
    """Row-wise negative cosine similarity and its gradients."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine loss is undefined for zero vectors")
    ah, bh = a / na, b / nb
    cos = np.sum(ah * bh, axis=-1, keepdims=True)
    ga = -(bh - cos * ah) / na
    gb = -(ah - cos * bh) / nb
    return -cos[..., 0], ga, gb


def cosine_loss(a, b):
    """``-<a, b> / (|a| |b|)`` with gradients ``(value, grad_a, grad_b)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("cosine loss needs two vectors of equal length")
    v, ga, gb = _cos_rows(a, b)
    return float(v), ga, gb


# -- pixel-to-pixel alignment -----------------------------------------------

def p2p_loss(pairs, mp: MlpParams, pred: MlpParams, detached=None, with_grads=True) -> LossBundle:
    """Symmetric predictor loss over overlapping pixels.

    Each view's prediction ``P(M_p(z))`` is pulled towards the other view's
    projection ``M_p(z)``, which sits behind a stop-gradient. The value is
    the mean over pairs of both directed terms.
    """
    z1, z2 = (pairs.z1, pairs.z2) if isinstance(pairs, OverlapPairs) else pairs
    z1 = as_dense(z1, 2)
    z2 = as_dense(z2, 2)
    if z1.shape != z2.shape:
        raise ValueError("paired features must have the same shape")
    n = z1.shape[0]
    if n == 0:
        raise ValueError("no overlapping pixel pairs")
    v1 = mlp_forward(mp, z1)
    v2 = mlp_forward(mp, z2)
    t1, t2 = (v1, v2) if detached is None else (np.asarray(detached[0]), np.asarray(detached[1]))
    p1 = mlp_forward(pred, v1)
    p2 = mlp_forward(pred, v2)
    la, gp1, _ = _cos_rows(p1, t2)
    lb, _, gp2 = _cos_rows(t1, p2)
    term_a, term_b = math.fsum(la) / n, math.fsum(lb) / n
    terms = {"view1_predicts_view2": term_a, "view2_predicts_view1": term_b}
    if not with_grads:
        return LossBundle(term_a + term_b, {}, terms)
    gp1 /= n
    gp2 /= n
    gpred1, gv1 = mlp_backward(pred, v1, gp1)
    gpred2, gv2 = mlp_backward(pred, v2, gp2)
    gmp1, gz1 = mlp_backward(mp, z1, gv1)
    gmp2, gz2 = mlp_backward(mp, z2, gv2)
    grads = {
        "M_p": [(a[0] + b[0], a[1] + b[1]) for a, b in zip(gmp1, gmp2)],
        "P": [(a[0] + b[0], a[1] + b[1]) for a, b in zip(gpred1, gpred2)],
        "z1": gz1,
        "z2": gz2,
    }
    return LossBundle(term_a + term_b, grads, terms)


# -- deep-to-shallow supervision --------------------------------------------

def d2s_embed(z, stage, m_i: MlpParams, m_k: MlpParams = None) -> np.ndarray:
    """Image embedding of one stage: pool then ``M_I``; shallow stages pass through ``M_K`` first."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage}")
    rows = pixels(as_dense(z, 3))
    if stage < 4:
        if m_k is None:
            raise ValueError(f"stage {stage} needs a pixel-level M_K")
        rows = mlp_forward(m_k, rows)
    return mlp_forward(m_i, rows.mean(axis=0))


def d2s_embed_backward(z, stage, m_i, m_k, upstream) -> dict:
    z = as_dense(z, 3)
    rows = pixels(z)
    n_pix = rows.shape[0]
    hidden = mlp_forward(m_k, rows) if stage < 4 else rows
    gi, gpool = mlp_backward(m_i, hidden.mean(axis=0), upstream)
    grow = np.broadcast_to(gpool / n_pix, hidden.shape)
    out = {"M_I": gi}
    if stage < 4:
        gk, grow = mlp_backward(m_k, rows, grow)
        out["M_K"] = gk
    out["z"] = np.ascontiguousarray(grow.T).reshape(z.shape)
    return out


def d2s_loss(u1: dict, u2: dict, stages, loss_fn=cosine_loss, detached=None) -> LossBundle:
    """Stage-4 embedding of each view supervises the other view's embeddings at ``stages``.

    ``loss_fn(target, online) -> (value, grad_target, grad_online)``; the
    stage-4 target is under stop-gradient, so only ``grad_online`` is used.
    """
    stages = sorted(set(stages))
    if not stages:
        raise ValueError("stage set is empty")
    if any(s not in STAGES for s in stages):
        raise ValueError(f"stages must be drawn from {STAGES}")
    if 4 not in u1 or 4 not in u2:
        raise ValueError("both views need a stage-4 embedding")
    t1, t2 = (u1[4], u2[4]) if detached is None else detached
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    k = len(stages)
    g1 = {s: np.zeros_like(np.asarray(u1[s], dtype=np.float64)) for s in u1}
    g2 = {s: np.zeros_like(np.asarray(u2[s], dtype=np.float64)) for s in u2}
    vals_a, vals_b = [], []
    for j in stages:
        va, _, ga = loss_fn(t1, np.asarray(u2[j], dtype=np.float64))
        vb, _, gb = loss_fn(t2, np.asarray(u1[j], dtype=np.float64))
        vals_a.append(va)
        vals_b.append(vb)
        g2[j] = g2[j] + ga / k
        g1[j] = g1[j] + gb / k
    term_a, term_b = math.fsum(vals_a) / k, math.fsum(vals_b) / k
    return LossBundle(term_a + term_b, {"u1": g1, "u2": g2}, {"view1_supervises_view2": term_a, "view2_supervises_view1": term_b})


def d2s_objective(feats1: dict, feats2: dict, nets: dict, stages, loss_fn=cosine_loss, detached=None, with_grads=True) -> LossBundle:
    """Features -> stage embeddings -> D2S loss, with gradients for every net and feature map.

    ``nets[s] = (M_I, M_K)`` (``M_K`` is None for stage 4).
    """
    need = sorted(set(stages) | {4})
    u1 = {s: d2s_embed(feats1[s], s, *nets[s]) for s in need}
    u2 = {s: d2s_embed(feats2[s], s, *nets[s]) for s in need}
    inner = d2s_loss(u1, u2, stages, loss_fn, detached)
    if not with_grads:
        return LossBundle(inner.value, {}, dict(inner.terms, u1=u1, u2=u2))
    grads = {}
    for s in need:
        m_i, m_k = nets[s]
        b1 = d2s_embed_backward(feats1[s], s, m_i, m_k, inner.grads["u1"][s])
        b2 = d2s_embed_backward(feats2[s], s, m_i, m_k, inner.grads["u2"][s])
        grads[f"M_I[{s}]"] = [(a[0] + b[0], a[1] + b[1]) for a, b in zip(b1["M_I"], b2["M_I"])]
        if s < 4:
            grads[f"M_K[{s}]"] = [(a[0] + b[0], a[1] + b[1]) for a, b in zip(b1["M_K"], b2["M_K"])]
        grads[f"z1[{s}]"] = b1["z"]
        grads[f"z2[{s}]"] = b2["z"]
    return LossBundle(inner.value, grads, dict(inner.terms, u1=u1, u2=u2))


def sum_loss(l_p2p, l_d2s, l_e=0.0) -> float:
    """Total unsupervised loss; ``l_e`` stands in for an external method's loss."""
    parts = [x.value if isinstance(x, LossBundle) else float(x) for x in (l_p2p, l_d2s, l_e)]
    if not all(math.isfinite(p) for p in parts):
        raise ValueError(f"non-finite loss component in {parts}")
    return parts[0] + parts[1] + parts[2]


# -- pixel-attention fine-tuning objective -----------------------------------

def attention_objective(z, params: AttentionParams, m_i: MlpParams, target, loss_fn=cosine_loss, with_grads=True) -> LossBundle:
    """Image-level loss of the attention-pooled embedding; the backbone features are detached.

    Gradients cover the attention layer, theta and ``M_I``; the entry for
    ``z`` is identically zero.
    """
    z = as_dense(z, 3)
    if z.shape[0] != params.dim:
        raise ValueError(f"embedding has {z.shape[0]} channels, attention expects {params.dim}")
    target = as_dense(target, 1)
    n = pixels(l2_normalize_channels(z))
    n_pix = n.shape[0]
    c = sigmoid(mlp_forward(params.m_a, n) + params.theta)
    pooled = (c * n).mean(axis=0)
    v_hat = mlp_forward(m_i, pooled)
    if v_hat.shape != target.shape:
        raise ValueError(f"embedding width {v_hat.shape} != target width {target.shape}")
    value, _, g_v = loss_fn(target, v_hat)
    if not with_grads:
        return LossBundle(float(value), {}, {"v_hat": v_hat})
    g_i, g_pool = mlp_backward(m_i, pooled, g_v)
    g_act = (g_pool[None, :] / n_pix) * n * c * (1.0 - c)
    g_a, _ = mlp_backward(params.m_a, n, g_act)
    grads = {"M_A": g_a, "theta": g_act.sum(axis=0), "M_I": g_i, "z": np.zeros_like(z)}
    return LossBundle(float(value), grads, {"v_hat": v_hat})


# -- verification -----------------------------------------------------------

def numeric_grad(f, x, eps=1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at flat ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite evaluation at coordinate {i}")
        out[i] = (fp - fm) / (2 * eps)
    return out


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / scale))


def grad_check(fn, params, eps=1e-5, value_fn=None) -> float:
    """Max relative error between ``fn``'s analytic gradient and central differences.

    ``fn(x) -> (value, grad)`` on a flat parameter vector; ``value_fn``
    optionally supplies a cheaper value-only evaluation for the differences.
    """
    x = np.array(params, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("parameters must be finite")
    value, grad = fn(x)
    if not math.isfinite(value):
        raise ValueError("non-finite function value")
    numeric = numeric_grad(value_fn or (lambda p: fn(p)[0]), x, eps)
    return relative_error(grad, numeric)


# -- gradient suite ---------------------------------------------------------

class _Packer:
    """Flatten named arrays / MLPs into one vector and back."""

    def __init__(self, items):
        self.items = list(items)
        self.slices, pos = {}, 0
        for name, v in self.items:
            size = v.size if isinstance(v, MlpParams) else np.size(v)
            self.slices[name] = slice(pos, pos + size)
            pos += size

    def pack(self) -> np.ndarray:
        return np.concatenate([v.flat() if isinstance(v, MlpParams) else np.ravel(v) for _, v in self.items])

    def unpack(self, vec) -> dict:
        out = {}
        for name, v in self.items:
            chunk = vec[self.slices[name]]
            out[name] = v.with_flat(chunk) if isinstance(v, MlpParams) else chunk.reshape(np.shape(v))
        return out

    def pack_grads(self, grads: dict) -> np.ndarray:
        parts = []
        for name, v in self.items:
            g = grads[name]
            parts.append(flat_grads(g) if isinstance(v, MlpParams) else np.ravel(g))
        return np.concatenate(parts)


@dataclass
class GradCase:
    """One random instance: analytic ``fn``, value-only ``value_fn``, base point and zero paths."""

    fn: object
    value_fn: object
    x0: np.ndarray
    zero_paths: list = field(default_factory=list)


def _restricted(value_fn, x0, sl):
    """``value_fn`` as a function of the coordinates in ``sl`` only."""
    def f(d):
        x = x0.copy()
        x[sl] = d
        return value_fn(x)
    return f, x0[sl]


def _case_cosine(rng):
    dim = int(rng.integers(2, 9))
    x0 = rng.normal(size=2 * dim)

    def fn(x):
        v, ga, gb = cosine_loss(x[:dim], x[dim:])
        return v, np.concatenate([ga, gb])

    return GradCase(fn, lambda x: fn(x)[0], x0)


def _case_p2p(rng):
    dim = int(rng.integers(2, 5))
    n = int(rng.integers(2, 5))
    packer = _Packer([
        ("z1", rng.normal(size=(n, dim))),
        ("z2", rng.normal(size=(n, dim))),
        ("M_p", MlpParams.random([dim, dim, dim], rng)),
        ("P", MlpParams.random([dim, dim, dim], rng)),
    ])
    x0 = packer.pack()
    base = packer.unpack(x0)
    snap = (mlp_forward(base["M_p"], base["z1"]), mlp_forward(base["M_p"], base["z2"]))

    def run(x, with_grads=True):
        p = packer.unpack(x)
        return p2p_loss((p["z1"], p["z2"]), p["M_p"], p["P"], detached=snap, with_grads=with_grads)

    def fn(x):
        b = run(x)
        return b.value, packer.pack_grads(b.grads)

    # Each directed term reads the other view only through its stop-gradient.
    zero_paths = [
        _restricted(lambda x: run(x, False).terms["view1_predicts_view2"], x0, packer.slices["z2"]),
        _restricted(lambda x: run(x, False).terms["view2_predicts_view1"], x0, packer.slices["z1"]),
    ]
    return GradCase(fn, lambda x: run(x, False).value, x0, zero_paths)


def _case_d2s(rng, stages=None):
    dim = int(rng.integers(2, 5))
    if stages is None:
        k = int(rng.integers(1, 5))
        stages = sorted(rng.choice(list(STAGES), size=k, replace=False).tolist())
    need = sorted(set(stages) | {4})
    items = []
    for s in need:
        h, w = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        items.append((f"z1[{s}]", rng.normal(size=(dim, h, w))))
        items.append((f"z2[{s}]", rng.normal(size=(dim, h, w))))
        items.append((f"M_I[{s}]", MlpParams.random([dim, dim], rng)))
        if s < 4:
            items.append((f"M_K[{s}]", MlpParams.random([dim, dim], rng)))
    packer = _Packer(items)
    x0 = packer.pack()

    def unpack(x):
        p = packer.unpack(x)
        feats1 = {s: p[f"z1[{s}]"] for s in need}
        feats2 = {s: p[f"z2[{s}]"] for s in need}
        nets = {s: (p[f"M_I[{s}]"], p.get(f"M_K[{s}]")) for s in need}
        return feats1, feats2, nets

    f1, f2, nets = unpack(x0)
    snap = (d2s_embed(f1[4], 4, *nets[4]), d2s_embed(f2[4], 4, *nets[4]))

    def run(x, with_grads=True):
        return d2s_objective(*unpack(x), stages, detached=snap, with_grads=with_grads)

    def fn(x):
        b = run(x)
        return b.value, packer.pack_grads(b.grads)

    def value_fn(x):
        return run(x, False).value

    zero_paths = []
    if 4 not in stages:
        # Stage-4 features and M_I[4] only feed the stop-gradient targets.
        zero_paths = [_restricted(value_fn, x0, packer.slices[name]) for name in ("z1[4]", "z2[4]", "M_I[4]")]
    return GradCase(fn, value_fn, x0, zero_paths)


def _case_attention(rng):
    dim = int(rng.integers(2, 6))
    h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    out = int(rng.integers(2, 6))
    z0 = rng.normal(size=(dim, h, w))
    target = rng.normal(size=out)
    packer = _Packer([
        ("M_A", MlpParams.random([dim, dim], rng, activation="identity")),
        ("theta", rng.normal(0, 0.5, dim)),
        ("M_I", MlpParams.random([dim, out], rng)),
        ("z", z0),
    ])
    x0 = packer.pack()

    def run(x, with_grads=True):
        p = packer.unpack(x)
        params = AttentionParams(p["M_A"], p["theta"])
        # z is detached: the objective reads the frozen snapshot, never the live copy.
        return attention_objective(z0, params, p["M_I"], target, with_grads=with_grads)

    def fn(x):
        b = run(x)
        return b.value, packer.pack_grads(b.grads)

    def value_fn(x):
        return run(x, False).value

    return GradCase(fn, value_fn, x0, [_restricted(value_fn, x0, packer.slices["z"])])


KERNELS = {
    "cosine_loss": _case_cosine,
    "p2p_loss": _case_p2p,
    "d2s_loss": _case_d2s,
    "attention_objective": _case_attention,
}


@dataclass
class SuiteRow:
    kernel: str
    instances: int
    max_rel_error: float
    max_zero_path: float
    tolerance: float
    zero_tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and self.max_zero_path < self.zero_tolerance


def gradient_suite(instances=100, seed=0, eps=1e-5, tolerance=1e-4, zero_tolerance=1e-8, kernels=None):
    """Run every kernel's analytic-vs-central-difference check on seeded random instances."""
    rows = []
    order = list(KERNELS)
    for name in kernels or order:
        make = KERNELS[name]
        i = order.index(name)  # per-kernel stream, independent of which kernels run
        rng = np.random.Generator(np.random.PCG64([seed, i]))
        worst, worst_zero = 0.0, 0.0
        for _ in range(instances):
            case = make(rng)
            worst = max(worst, grad_check(case.fn, case.x0, eps, case.value_fn))
            for f, d0 in case.zero_paths:
                worst_zero = max(worst_zero, float(np.max(np.abs(numeric_grad(f, d0, eps)), initial=0.0)))
        rows.append(SuiteRow(name, instances, worst, worst_zero, tolerance, zero_tolerance))
    return rows
