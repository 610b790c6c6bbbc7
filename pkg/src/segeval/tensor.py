"""Small dense-array helpers shared by the label generation and loss code.

Embedding maps are plain ``float64`` numpy arrays laid out channel-major
(``L x H x W``). Per-pixel MLPs (1x1 convolutions) are represented by
:class:`MlpParams` and applied to ``(N, in)`` row batches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "identity")


def as_dense(values, ndim=None) -> np.ndarray:
    """Widen to float64 and reject non-finite entries."""
    arr = np.asarray(values, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a rank-{ndim} array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("array contains non-finite values")
    return arr


def l2_normalize_channels(z) -> np.ndarray:
    """Unit-normalize every pixel's channel vector; zero vectors stay zero."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError(f"expected an L x H x W map, got shape {z.shape}")
    norm = np.sqrt(np.sum(z * z, axis=0, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, z / safe, 0.0)


def normalize_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, x / safe, 0.0)


def global_avg_pool(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError(f"expected an L x H x W map, got shape {z.shape}")
    if z.shape[1] * z.shape[2] == 0:
        raise ValueError("cannot pool an empty spatial extent")
    return z.reshape(z.shape[0], -1).mean(axis=1)


def pixels(z) -> np.ndarray:
    """View an ``L x H x W`` map as ``(H*W, L)`` rows."""
    z = np.asarray(z, dtype=np.float64)
    return z.reshape(z.shape[0], -1).T


@dataclass
class MlpParams:
    """Stack of affine layers ``(W: out x in, b: out)`` with an activation between layers."""

    layers: list = field(default_factory=list)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        layers = []
        for w, b in self.layers:
            w = as_dense(w, 2)
            b = as_dense(b, 1)
            if b.shape[0] != w.shape[0]:
                raise ValueError("bias length must equal the layer's output width")
            layers.append((w, b))
        for (w0, _), (w1, _) in zip(layers, layers[1:]):
            if w1.shape[1] != w0.shape[0]:
                raise ValueError(f"layer widths do not chain: {w0.shape} -> {w1.shape}")
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        self.layers = layers

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @classmethod
    def identity(cls, dim, depth=1, activation="relu"):
        return cls([(np.eye(dim), np.zeros(dim)) for _ in range(depth)], activation)

    @classmethod
    def random(cls, widths, rng, activation="relu", scale=None):
        """Gaussian-initialised layers for ``widths = [in, h1, ..., out]``."""
        layers = []
        for n_in, n_out in zip(widths, widths[1:]):
            s = scale if scale is not None else 1.0 / np.sqrt(n_in)
            layers.append((rng.normal(0.0, s, (n_out, n_in)), rng.normal(0.0, 0.1, n_out)))
        return cls(layers, activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def with_flat(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        layers, pos = [], 0
        for w, b in self.layers:
            nw, nb = w.size, b.size
            layers.append((vec[pos:pos + nw].reshape(w.shape), vec[pos + nw:pos + nw + nb]))
            pos += nw + nb
        if pos != vec.size:
            raise ValueError(f"expected {pos} parameters, got {vec.size}")
        # Same shapes as self, so skip re-validation.
        out = object.__new__(MlpParams)
        out.layers, out.activation = layers, self.activation
        return out

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)


def flat_grads(grads) -> np.ndarray:
    """Flatten ``[(dW, db), ...]`` in the same order as :meth:`MlpParams.flat`."""
    return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])


def _act(p: MlpParams, h):
    return np.maximum(h, 0.0) if p.activation == "relu" else h


def _forward_trace(p: MlpParams, x):
    inputs, pre = [], []
    h = x
    for i, (w, b) in enumerate(p.layers):
        inputs.append(h)
        a = h @ w.T + b
        pre.append(a)
        h = a if i == len(p.layers) - 1 else _act(p, a)
    return h, inputs, pre


def mlp_forward(p: MlpParams, x) -> np.ndarray:
    """Apply the MLP to a vector ``(in,)`` or a row batch ``(N, in)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.in_dim:
        raise ValueError(f"input width {x.shape[-1]} != MLP input width {p.in_dim}")
    return _forward_trace(p, x)[0]


def mlp_backward(p: MlpParams, x, upstream):
    """Exact gradients of ``sum(upstream * mlp_forward(p, x))``.

    Returns ``(grads, grad_x)`` where ``grads`` is a list of ``(dW, db)``
    aligned with ``p.layers``. Batched inputs accumulate over rows.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if x.shape[-1] != p.in_dim:
        raise ValueError(f"input width {x.shape[-1]} != MLP input width {p.in_dim}")
    out, inputs, pre = _forward_trace(p, x)
    if g.shape != out.shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {out.shape}")
    batched = x.ndim == 2
    grads = [None] * len(p.layers)
    for i in range(len(p.layers) - 1, -1, -1):
        w, _ = p.layers[i]
        if i < len(p.layers) - 1 and p.activation == "relu":
            g = g * (pre[i] > 0)
        h = inputs[i]
        if batched:
            grads[i] = (g.T @ h, g.sum(axis=0))
        else:
            grads[i] = (np.outer(g, h), g.copy())
        g = g @ w
    return grads, g
