import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segeval.tensor import (
    MlpParams,
    as_dense,
    flat_grads,
    global_avg_pool,
    l2_normalize_channels,
    mlp_backward,
    mlp_forward,
    normalize_rows,
    pixels,
)


def test_as_dense_rejects_nan_and_rank():
    with pytest.raises(ValueError):
        as_dense([1.0, np.nan])
    with pytest.raises(ValueError):
        as_dense(np.zeros((2, 2)), ndim=3)
    assert as_dense([1, 2], ndim=1).dtype == np.float64


def test_l2_normalize_channels_unit_and_zero():
    z = np.zeros((3, 2, 2))
    z[:, 0, 0] = [3.0, 4.0, 0.0]
    out = l2_normalize_channels(z)
    assert np.allclose(out[:, 0, 0], [0.6, 0.8, 0.0])
    assert np.all(out[:, 1, 1] == 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_normalized_pixels_have_unit_norm(l, h, w, seed):
    z = np.random.default_rng(seed).normal(size=(l, h, w))
    norms = np.linalg.norm(pixels(l2_normalize_channels(z)), axis=1)
    assert np.allclose(norms, 1.0)


def test_normalize_rows_matches_channel_version():
    z = np.random.default_rng(1).normal(size=(4, 3, 2))
    assert np.allclose(normalize_rows(pixels(z)), pixels(l2_normalize_channels(z)))


def test_global_avg_pool():
    z = np.arange(12, dtype=float).reshape(3, 2, 2)
    assert np.allclose(global_avg_pool(z), [1.5, 5.5, 9.5])
    with pytest.raises(ValueError):
        global_avg_pool(np.zeros((2, 0, 3)))


def test_pixels_layout():
    z = np.arange(12, dtype=float).reshape(3, 2, 2)
    rows = pixels(z)
    assert rows.shape == (4, 3)
    assert np.array_equal(rows[1], z[:, 0, 1])


def test_mlp_validation():
    with pytest.raises(ValueError):
        MlpParams([(np.zeros((3, 2)), np.zeros(3)), (np.zeros((2, 4)), np.zeros(2))])
    with pytest.raises(ValueError):
        MlpParams([(np.zeros((3, 2)), np.zeros(2))])
    with pytest.raises(ValueError):
        MlpParams([])
    with pytest.raises(ValueError):
        MlpParams.identity(2, activation="tanh")


def test_mlp_identity_relu_only_between_layers():
    p = MlpParams.identity(3, depth=2)
    x = np.array([-1.0, 2.0, -3.0])
    # ReLU after the first layer, none after the last.
    assert np.allclose(mlp_forward(p, x), [0.0, 2.0, 0.0])
    assert np.allclose(mlp_forward(MlpParams.identity(3), x), x)


def test_flat_roundtrip():
    p = MlpParams.random([3, 5, 2], np.random.default_rng(0))
    q = p.with_flat(p.flat())
    assert p.size == p.flat().size == 3 * 5 + 5 + 5 * 2 + 2
    for (w0, b0), (w1, b1) in zip(p.layers, q.layers):
        assert np.array_equal(w0, w1) and np.array_equal(b0, b1)
    with pytest.raises(ValueError):
        p.with_flat(np.zeros(3))


@pytest.mark.parametrize("batched", [False, True])
def test_mlp_backward_matches_finite_differences(batched):
    rng = np.random.default_rng(3)
    p = MlpParams.random([4, 6, 3], rng)
    x = rng.normal(size=(5, 4) if batched else 4)
    g = rng.normal(size=(5, 3) if batched else 3)

    def f(theta, xx):
        return float(np.sum(g * mlp_forward(p.with_flat(theta), xx)))

    grads, gx = mlp_backward(p, x, g)
    theta = p.flat()
    eps = 1e-6
    num = np.array([(f(theta + eps * e, x) - f(theta - eps * e, x)) / (2 * eps) for e in np.eye(theta.size)])
    assert np.allclose(flat_grads(grads), num, atol=1e-7)
    flat_x = x.ravel()
    num_x = np.array([
        (f(theta, (flat_x + eps * e).reshape(x.shape)) - f(theta, (flat_x - eps * e).reshape(x.shape))) / (2 * eps)
        for e in np.eye(flat_x.size)
    ]).reshape(x.shape)
    assert np.allclose(gx, num_x, atol=1e-7)


def test_mlp_shape_errors():
    p = MlpParams.identity(3)
    with pytest.raises(ValueError):
        mlp_forward(p, np.zeros(4))
    with pytest.raises(ValueError):
        mlp_backward(p, np.zeros(3), np.zeros(2))
