"""Numba-jitted hot kernels.

Same contracts as numpy_impl. The attention kernels combine BLAS dots (via
np.dot inside the jitted code) for the score/value products with explicit
loops over each query's visible causal window for the masked softmax, so
the [Tq, S] probability matrix never crosses the op boundary; the backward
recomputes each softmax row instead of saving it. prange threads own
disjoint output slices with serial inner accumulation, so results are
bitwise deterministic regardless of scheduling. fastmath stays off: the
kernels must track the numpy reference closely in float64.

BLAS calls issued from inside the OpenMP worker threads must not spawn
their own thread pools (two pools on two cores thrash badly), so the
wrappers pin BLAS to one thread for the duration of each kernel call.

The rare explicit-matrix mask path (streaming layouts) delegates to the
numpy implementation; it only occurs on cold, tiny shapes.
"""

import warnings

import numpy as np

warnings.filterwarnings("ignore", message="The TBB threading layer")

from numba import njit, prange  # noqa: E402
from threadpoolctl import ThreadpoolController  # noqa: E402

from . import numpy_impl
from .numpy_impl import NO_SELF, WITH_SELF  # noqa: F401  (re-exported)

_CTL = ThreadpoolController()


@njit(cache=True, parallel=True)
def _attn_fwd(q, k, v, group, scale, n_past, self_add, out):
    B, Hq, Tq, hd = q.shape
    Hkv = k.shape[1]
    S = k.shape[2]
    for bkh in prange(B * Hkv):
        b = bkh // Hkv
        kh = bkh % Hkv
        zero = q[0, 0, 0, 0] * 0
        one = zero + 1
        kt = np.ascontiguousarray(k[b, kh].T)
        for g in range(group):
            h = kh * group + g
            sc = np.dot(q[b, h], kt)
            for i in range(Tq):
                vis = n_past + i + self_add
                if vis > S:
                    vis = S
                if vis <= 0:
                    for j in range(S):
                        sc[i, j] = zero
                    continue
                mx = sc[i, 0] * scale
                for j in range(vis):
                    s = sc[i, j] * scale
                    sc[i, j] = s
                    if s > mx:
                        mx = s
                for j in range(vis):
                    sc[i, j] = np.exp(sc[i, j] - mx)
                tot = zero
                for j in range(vis):
                    tot += sc[i, j]
                inv = one / tot
                for j in range(vis):
                    sc[i, j] *= inv
                for j in range(vis, S):
                    sc[i, j] = zero
            out[b, h] = np.dot(sc, v[b, kh])


@njit(cache=True, parallel=True)
def _attn_bwd(q, k, v, d_out, group, scale, n_past, self_add, dq, dk, dv):
    B, Hq, Tq, hd = q.shape
    Hkv = k.shape[1]
    S = k.shape[2]
    for bkh in prange(B * Hkv):
        b = bkh // Hkv
        kh = bkh % Hkv
        zero = q[0, 0, 0, 0] * 0
        one = zero + 1
        kt = np.ascontiguousarray(k[b, kh].T)
        vt = np.ascontiguousarray(v[b, kh].T)
        for g in range(group):
            h = kh * group + g
            sc = np.dot(q[b, h], kt)
            dp = np.dot(d_out[b, h], vt)
            for i in range(Tq):
                vis = n_past + i + self_add
                if vis > S:
                    vis = S
                if vis <= 0:
                    for j in range(S):
                        sc[i, j] = zero
                    continue
                mx = sc[i, 0] * scale
                for j in range(vis):
                    s = sc[i, j] * scale
                    sc[i, j] = s
                    if s > mx:
                        mx = s
                for j in range(vis):
                    sc[i, j] = np.exp(sc[i, j] - mx)
                tot = zero
                for j in range(vis):
                    tot += sc[i, j]
                inv = one / tot
                for j in range(vis):
                    sc[i, j] *= inv
                for j in range(vis, S):
                    sc[i, j] = zero
            # sc holds the probabilities now.
            dv[b, kh] += np.dot(np.ascontiguousarray(sc.T), d_out[b, h])
            for i in range(Tq):
                rowsum = zero
                for j in range(S):
                    rowsum += dp[i, j] * sc[i, j]
                for j in range(S):
                    sc[i, j] = sc[i, j] * (dp[i, j] - rowsum) * scale
            dq[b, h] = np.dot(sc, k[b, kh])
            dk[b, kh] += np.dot(np.ascontiguousarray(sc.T), q[b, h])


@njit(cache=True, parallel=True)
def _rmsnorm_fwd(x, gain, eps, y, inv):
    rows, d = x.shape
    for r in prange(rows):
        ss = x[0, 0] * 0
        for j in range(d):
            ss += x[r, j] * x[r, j]
        iv = 1.0 / np.sqrt(ss / d + eps)
        inv[r] = iv
        for j in range(d):
            y[r, j] = (x[r, j] * iv) * gain[j]


@njit(cache=True, parallel=True)
def _rmsnorm_bwd(x, gain, inv, dy, dx):
    rows, d = x.shape
    for r in prange(rows):
        iv = inv[r]
        dot = x[0, 0] * 0
        for j in range(d):
            dot += (dy[r, j] * gain[j]) * x[r, j]
        c = (iv * iv * iv) * dot / d
        for j in range(d):
            dx[r, j] = iv * (dy[r, j] * gain[j]) - c * x[r, j]


@njit(cache=True, parallel=True)
def _rope(x, cos, sin, sgn, y):
    # sgn=+1 rotates forward, -1 applies the inverse (transpose) rotation;
    # folding the flag into a factor keeps the inner loop branch-free.
    B, T, H, hd = x.shape
    hp = hd // 2
    for bt in prange(B * T):
        b = bt // T
        t = bt % T
        for h in range(H):
            for p in range(hp):
                c = cos[t, p]
                s = sin[t, p] * sgn
                x0 = x[b, t, h, 2 * p]
                x1 = x[b, t, h, 2 * p + 1]
                y[b, t, h, 2 * p] = x0 * c - x1 * s
                y[b, t, h, 2 * p + 1] = x1 * c + x0 * s


def attention_forward(q, k, v, group, scale, n_past, kind, extra_mask=None):
    if extra_mask is not None:
        return numpy_impl.attention_forward(q, k, v, group, scale, n_past, kind, extra_mask)
    out = np.empty_like(q)
    self_add = 1 if kind == WITH_SELF else 0
    with _CTL.limit(limits=1, user_api="blas"):
        _attn_fwd(q, k, v, group, q.dtype.type(scale), n_past, self_add, out)
    return out


def attention_backward(q, k, v, d_out, group, scale, n_past, kind, extra_mask=None):
    if extra_mask is not None:
        return numpy_impl.attention_backward(
            q, k, v, d_out, group, scale, n_past, kind, extra_mask
        )
    dq = np.empty_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    self_add = 1 if kind == WITH_SELF else 0
    with _CTL.limit(limits=1, user_api="blas"):
        _attn_bwd(q, k, v, d_out, group, q.dtype.type(scale), n_past, self_add, dq, dk, dv)
    return dq, dk, dv


def rmsnorm_forward(x, gain, eps):
    y = np.empty_like(x)
    inv = np.empty(x.shape[0], dtype=x.dtype)
    _rmsnorm_fwd(x, gain, x.dtype.type(eps), y, inv)
    return y, inv


def rmsnorm_backward(x, gain, inv, dy):
    dx = np.empty_like(x)
    _rmsnorm_bwd(x, gain, inv, dy, dx)
    # Row reduction for the gain gradient is a single matvec; BLAS wins here.
    dgain = (dy * x).T @ inv
    return dx, dgain.astype(x.dtype)


def rope_apply(x, cos, sin, inverse=False):
    y = np.empty_like(x)
    _rope(x, cos, sin, x.dtype.type(-1.0 if inverse else 1.0), y)
    return y
