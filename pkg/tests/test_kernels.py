"""Backend parity: the numba kernels must match the numpy reference, and
both must match an independently written per-position oracle."""

import numpy as np
import pytest

from lckv.kernels import NO_SELF, WITH_SELF, numpy_impl, visibility

from oracles import naive_attention

numba_impl = pytest.importorskip("lckv.kernels.numba_impl")

DTYPES = [np.float32, np.float64]


def _tol(dt):
    return dict(rtol=2e-5, atol=2e-6) if dt == np.float32 else dict(rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("kind", [WITH_SELF, NO_SELF])
@pytest.mark.parametrize("n_past", [0, 3])
def test_attention_forward_parity(dtype, kind, n_past, rng):
    b, hq, hkv, tq, hd = 2, 4, 2, 5, 8
    s = tq + n_past
    q = rng.standard_normal((b, hq, tq, hd)).astype(dtype)
    k = rng.standard_normal((b, hkv, s, hd)).astype(dtype)
    v = rng.standard_normal((b, hkv, s, hd)).astype(dtype)
    ref = numpy_impl.attention_forward(q, k, v, 2, 1 / np.sqrt(hd), n_past, kind)
    got = numba_impl.attention_forward(q, k, v, 2, 1 / np.sqrt(hd), n_past, kind)
    assert np.allclose(got, ref, **_tol(dtype))


@pytest.mark.parametrize("kind", [WITH_SELF, NO_SELF])
def test_attention_matches_naive_oracle(kind, rng, backend):
    from lckv import kernels

    hq, hkv, t, hd = 4, 2, 6, 8
    q = rng.standard_normal((1, hq, t, hd))
    k = rng.standard_normal((1, hkv, t, hd))
    v = rng.standard_normal((1, hkv, t, hd))
    got = kernels.attention_forward(q, k, v, 2, 1 / np.sqrt(hd), 0, kind)
    vis = visibility(t, t, 0, kind)
    want = naive_attention(q[0], k[0], v[0], vis)
    assert np.allclose(got[0], want, rtol=1e-9, atol=1e-10)


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("kind", [WITH_SELF, NO_SELF])
def test_attention_backward_parity(dtype, kind, rng):
    b, hq, hkv, tq, hd = 2, 4, 2, 5, 8
    q = rng.standard_normal((b, hq, tq, hd)).astype(dtype)
    k = rng.standard_normal((b, hkv, tq, hd)).astype(dtype)
    v = rng.standard_normal((b, hkv, tq, hd)).astype(dtype)
    g = rng.standard_normal((b, hq, tq, hd)).astype(dtype)
    args = (q, k, v, g, 2, 1 / np.sqrt(hd), 0, kind)
    for ref, got in zip(numpy_impl.attention_backward(*args), numba_impl.attention_backward(*args)):
        assert np.allclose(got, ref, **_tol(dtype))


def test_attention_dummy_row_zero(backend, rng):
    """The first no-self query row sees only the zero dummy: exact zeros."""
    from lckv import kernels

    q = rng.standard_normal((1, 2, 4, 8)).astype(np.float32)
    k = rng.standard_normal((1, 2, 4, 8)).astype(np.float32)
    v = rng.standard_normal((1, 2, 4, 8)).astype(np.float32)
    out = kernels.attention_forward(q, k, v, 1, 1 / np.sqrt(8), 0, NO_SELF)
    assert np.array_equal(out[:, :, 0, :], np.zeros((1, 2, 8), dtype=np.float32))
    dq, dk, dv = kernels.attention_backward(
        q, k, v, np.ones_like(q), 1, 1 / np.sqrt(8), 0, NO_SELF
    )
    assert np.array_equal(dq[:, :, 0, :], np.zeros((1, 2, 8), dtype=np.float32))
    # Nothing may flow into the last key slot either: no query sees it.
    assert np.array_equal(dk[:, :, -1, :], np.zeros((1, 2, 8), dtype=np.float32))
    assert np.array_equal(dv[:, :, -1, :], np.zeros((1, 2, 8), dtype=np.float32))


def test_attention_single_zero_kv_slot(backend):
    """One query over one zero key/value slot: softmax weight 1 on a zero
    value, so the output is the zero vector."""
    from lckv import kernels

    q = np.ones((1, 1, 1, 4), dtype=np.float32)
    k = np.zeros((1, 1, 1, 4), dtype=np.float32)
    v = np.zeros((1, 1, 1, 4), dtype=np.float32)
    out = kernels.attention_forward(q, k, v, 1, 0.5, 1, NO_SELF)
    assert np.array_equal(out, np.zeros_like(q))


def test_attention_no_self_two_tokens(backend, rng):
    """Token 2 under no-self attends only token 1: output is exactly v1."""
    from lckv import kernels

    q = rng.standard_normal((1, 1, 2, 4)).astype(np.float64)
    k = rng.standard_normal((1, 1, 2, 4)).astype(np.float64)
    v = rng.standard_normal((1, 1, 2, 4)).astype(np.float64)
    out = kernels.attention_forward(q, k, v, 1, 0.5, 0, NO_SELF)
    assert np.allclose(out[0, 0, 1], v[0, 0, 0], rtol=1e-15)


@pytest.mark.parametrize("dtype", DTYPES)
def test_rmsnorm_parity(dtype, rng):
    x = rng.standard_normal((7, 16)).astype(dtype)
    gain = (rng.standard_normal(16) * 0.1 + 1).astype(dtype)
    dy = rng.standard_normal((7, 16)).astype(dtype)
    y_ref, inv_ref = numpy_impl.rmsnorm_forward(x, gain, 1e-5)
    y_nb, inv_nb = numba_impl.rmsnorm_forward(x, gain, 1e-5)
    assert np.allclose(y_nb, y_ref, **_tol(dtype))
    assert np.allclose(inv_nb, inv_ref, **_tol(dtype))
    dx_ref, dg_ref = numpy_impl.rmsnorm_backward(x, gain, inv_ref, dy)
    dx_nb, dg_nb = numba_impl.rmsnorm_backward(x, gain, inv_nb, dy)
    assert np.allclose(dx_nb, dx_ref, **_tol(dtype))
    assert np.allclose(dg_nb, dg_ref, **_tol(dtype))


@pytest.mark.parametrize("dtype", DTYPES)
def test_rope_parity_and_inverse(dtype, rng):
    x = rng.standard_normal((2, 5, 3, 8)).astype(dtype)
    angles = np.outer(np.arange(5, dtype=np.float64), 0.1 * np.arange(1, 5))
    cos, sin = np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)
    y_ref = numpy_impl.rope_apply(x, cos, sin)
    y_nb = numba_impl.rope_apply(x, cos, sin)
    assert np.allclose(y_nb, y_ref, **_tol(dtype))
    # Rotation then inverse rotation restores the input.
    back = numba_impl.rope_apply(y_nb, cos, sin, inverse=True)
    assert np.allclose(back, x, atol=1e-6 if dtype == np.float32 else 1e-14)
    # Rotation preserves the norm of every dim-pair.
    pair = x.reshape(2, 5, 3, 4, 2)
    rot = y_ref.reshape(2, 5, 3, 4, 2)
    assert np.allclose(
        np.linalg.norm(pair, axis=-1), np.linalg.norm(rot, axis=-1),
        atol=1e-6 if dtype == np.float32 else 1e-14,
    )


def test_extra_mask_respected(backend, rng):
    from lckv import kernels

    t, hd = 5, 4
    q = rng.standard_normal((1, 1, t, hd))
    k = rng.standard_normal((1, 1, t, hd))
    v = rng.standard_normal((1, 1, t, hd))
    extra = rng.random((t, t)) < 0.6
    got = kernels.attention_forward(q, k, v, 1, 0.5, 0, WITH_SELF, extra)
    vis = visibility(t, t, 0, WITH_SELF, extra)
    want = np.zeros_like(q)
    for i in range(t):
        js = np.where(vis[i])[0]
        if js.size == 0:
            continue
        sc = np.array([q[0, 0, i] @ k[0, 0, j] * 0.5 for j in js])
        w = np.exp(sc - sc.max())
        w /= w.sum()
        want[0, 0, i] = (w[:, None] * v[0, 0, js]).sum(axis=0)
    assert np.allclose(got, want, rtol=1e-10, atol=1e-12)


def test_kernels_bitwise_deterministic(rng):
    q = rng.standard_normal((3, 8, 32, 16)).astype(np.float32)
    k = rng.standard_normal((3, 4, 32, 16)).astype(np.float32)
    v = rng.standard_normal((3, 4, 32, 16)).astype(np.float32)
    a = numba_impl.attention_forward(q, k, v, 2, 0.25, 0, WITH_SELF)
    b = numba_impl.attention_forward(q, k, v, 2, 0.25, 0, WITH_SELF)
    assert np.array_equal(a, b)
    g = rng.standard_normal(q.shape).astype(np.float32)
    d1 = numba_impl.attention_backward(q, k, v, g, 2, 0.25, 0, WITH_SELF)
    d2 = numba_impl.attention_backward(q, k, v, g, 2, 0.25, 0, WITH_SELF)
    for x, y in zip(d1, d2):
        assert np.array_equal(x, y)
