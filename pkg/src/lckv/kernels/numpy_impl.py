"""Pure-numpy reference implementations of the hot kernels.

These are the semantics the numba backend must match. Masking uses a large
negative additive constant (-1e9) rather than true -inf so that
max-subtraction inside softmax never produces NaN; exp() underflows the
masked entries to exactly 0.0 in both float32 and float64.
"""

import numpy as np

# Mask kinds for causal attention. WITH_SELF lets query i see key slot j
# when j < n_past + i + 1; NO_SELF requires j < n_past + i. A row with no
# visible slot attends only the implicit zero dummy KV, i.e. outputs zeros.
WITH_SELF = 0
NO_SELF = 1

MASK_FILL = -1e9


def visibility(n_q: int, n_kv: int, n_past: int, kind: int, extra_mask=None) -> np.ndarray:
    """Boolean [n_q, n_kv] matrix of which key slots each query may attend."""
    i = np.arange(n_q)[:, None]
    j = np.arange(n_kv)[None, :]
    bound = n_past + i + (1 if kind == WITH_SELF else 0)
    vis = j < bound
    if extra_mask is not None:
        vis = vis & extra_mask
    return vis


def attention_forward(q, k, v, group, scale, n_past, kind, extra_mask=None):
    """Scaled dot-product attention with grouped KV heads.

    q: [B, Hq, Tq, hd]; k, v: [B, Hkv, S, hd] with Hq == Hkv * group.
    Returns out [B, Hq, Tq, hd]. Rows with no visible slot produce zeros.
    """
    _, _, n_q, _ = q.shape
    n_kv = k.shape[2]
    if group > 1:
        k = np.repeat(k, group, axis=1)
        v = np.repeat(v, group, axis=1)
    vis = visibility(n_q, n_kv, n_past, kind, extra_mask)
    scores = q @ k.transpose(0, 1, 3, 2)
    scores = scores * scale
    scores = scores + np.where(vis, 0.0, MASK_FILL).astype(q.dtype)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    p = e / e.sum(axis=-1, keepdims=True)
    # Rows with nothing visible see only the zero dummy KV: output zero.
    nonempty = vis.any(axis=-1)
    p = p * nonempty[None, None, :, None].astype(q.dtype)
    return p @ v


def attention_backward(q, k, v, d_out, group, scale, n_past, kind, extra_mask=None):
    """Gradients of attention_forward. Probabilities are recomputed rather
    than saved so the forward pass never retains [Tq, S] buffers."""
    B, Hq, n_q, hd = q.shape
    Hkv, n_kv = k.shape[1], k.shape[2]
    if group > 1:
        kk = np.repeat(k, group, axis=1)
        vv = np.repeat(v, group, axis=1)
    else:
        kk, vv = k, v
    vis = visibility(n_q, n_kv, n_past, kind, extra_mask)
    scores = (q @ kk.transpose(0, 1, 3, 2)) * scale
    scores = scores + np.where(vis, 0.0, MASK_FILL).astype(q.dtype)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    p = e / e.sum(axis=-1, keepdims=True)
    nonempty = vis.any(axis=-1)
    p = p * nonempty[None, None, :, None].astype(q.dtype)

    dv_full = p.transpose(0, 1, 3, 2) @ d_out
    dp = d_out @ vv.transpose(0, 1, 3, 2)
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    ds = ds * scale
    dq = ds @ kk
    dk_full = ds.transpose(0, 1, 3, 2) @ q
    if group > 1:
        dk = dk_full.reshape(B, Hkv, group, n_kv, hd).sum(axis=2)
        dv = dv_full.reshape(B, Hkv, group, n_kv, hd).sum(axis=2)
    else:
        dk, dv = dk_full, dv_full
    return dq, dk, dv


def rmsnorm_forward(x, gain, eps):
    """x: [rows, d], gain: [d]. Returns (y, inv) with inv = 1/rms per row."""
    ms = np.mean(x * x, axis=-1)
    inv = 1.0 / np.sqrt(ms + np.asarray(eps, dtype=x.dtype))
    y = (x * inv[:, None]) * gain
    return y, inv.astype(x.dtype)


def rmsnorm_backward(x, gain, inv, dy):
    d = x.shape[-1]
    w = dy * gain
    dot = (w * x).sum(axis=-1, keepdims=True)
    dx = inv[:, None] * w - (inv[:, None] ** 3 / d) * x * dot
    dgain = (dy * (x * inv[:, None])).sum(axis=0)
    return dx.astype(x.dtype), dgain.astype(x.dtype)


def rope_apply(x, cos, sin, inverse=False):
    """Rotate interleaved dim-pairs of x [B, T, H, hd] by per-position angles.

    cos, sin: [T, hd//2]. inverse=True applies the transpose rotation, which
    both undoes the forward rotation and serves as its gradient.
    """
    c = cos[None, :, None, :]
    s = sin[None, :, None, :]
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    if inverse:
        y0 = x0 * c + x1 * s
        y1 = x1 * c - x0 * s
    else:
        y0 = x0 * c - x1 * s
        y1 = x1 * c + x0 * s
    y = np.empty_like(x)
    y[..., 0::2] = y0
    y[..., 1::2] = y1
    return y
