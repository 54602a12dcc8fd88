"""Llama-style building blocks: RMSNorm, SwiGLU MLP, rotary embeddings, and
grouped-query attention with the two causal mask variants.

CausalWithSelf is the standard decoder mask (query i sees keys up to and
including its own position). CausalNoSelf drops the diagonal: query i sees
strictly earlier keys, and the first query, which sees nothing, attends an
implicit zero dummy KV so its attention output is exactly zero. Condensed
layers need the no-self variant because a token's own externally produced
KV does not exist yet during its bottom-up pass; warmup layers keep the
standard mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .kernels import NO_SELF, WITH_SELF

CAUSAL_WITH_SELF = WITH_SELF
CAUSAL_NO_SELF = NO_SELF


@dataclass
class AttentionMask:
    """Which key slots each query row may attend.

    `n_past` is the number of key slots strictly before query 0's position;
    the factories derive it from the query/key lengths so that training
    (aligned, n_past=0) and single-token decode (all cached slots past) are
    both expressible. `extra`, when set, is a boolean [length, kv_length]
    matrix ANDed with the causal rule for irregular streaming layouts.
    """

    kind: int
    length: int
    kv_length: int
    n_past: int
    extra: np.ndarray | None = None

    def __post_init__(self):
        if not 0 <= self.n_past <= self.kv_length:
            raise ShapeError(
                f"n_past {self.n_past} outside [0, kv_length={self.kv_length}]"
            )

    @classmethod
    def causal_with_self(cls, length: int, kv_length: int, n_past: int | None = None,
                         extra=None) -> "AttentionMask":
        """Default n_past treats the queries as the last `length` entries of
        the key timeline (covers both aligned training and decode, where the
        query token's own KV is part of the key set)."""
        if n_past is None:
            n_past = kv_length - length
        return cls(CAUSAL_WITH_SELF, length, kv_length, n_past, extra)

    @classmethod
    def causal_no_self(cls, length: int, kv_length: int, n_past: int | None = None,
                       extra=None) -> "AttentionMask":
        """Default n_past aligns query i with key slot i (training layout,
        where a token's own masked slot is present). Decode over a cache of
        strictly-past KVs passes n_past=kv_length explicitly."""
        if n_past is None:
            n_past = kv_length - length
        return cls(CAUSAL_NO_SELF, length, kv_length, n_past, extra)


class RotaryTable:
    """Precomputed cos/sin per (position, dim-pair); grows on demand.

    Angles are always computed in float64 from position * base**(-2i/hd)
    and cast once, so a row's value never depends on the table size.
    """

    def __init__(self, head_dim: int, base: float = 10000.0, dtype=np.float32,
                 max_positions: int = 0):
        if head_dim % 2 != 0:
            raise ConfigError(f"rotary embedding needs an even head_dim, got {head_dim}")
        self.head_dim = head_dim
        self.base = base
        self.dtype = np.dtype(dtype)
        self._inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
        self.cos = np.zeros((0, head_dim // 2), dtype=self.dtype)
        self.sin = np.zeros((0, head_dim // 2), dtype=self.dtype)
        if max_positions:
            self.ensure(max_positions)

    @property
    def max_positions(self) -> int:
        return self.cos.shape[0]

    def ensure(self, n: int) -> None:
        if n <= self.max_positions:
            return
        n = max(n, 2 * self.max_positions, 64)
        angles = np.outer(np.arange(n, dtype=np.float64), self._inv_freq)
        self.cos = np.cos(angles).astype(self.dtype)
        self.sin = np.sin(angles).astype(self.dtype)

    def tables_for(self, positions) -> tuple[np.ndarray, np.ndarray]:
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size and positions.min() < 0:
            raise ConfigError("rotary positions must be non-negative")
        self.ensure(int(positions.max()) + 1 if positions.size else 0)
        return self.cos[positions], self.sin[positions]


_ROTARY_CACHE: dict[tuple, RotaryTable] = {}


def get_rotary(head_dim: int, base: float, dtype) -> RotaryTable:
    key = (head_dim, float(base), np.dtype(dtype).str)
    table = _ROTARY_CACHE.get(key)
    if table is None:
        table = RotaryTable(head_dim, base, dtype)
        _ROTARY_CACHE[key] = table
    return table


def apply_rope(x: Tensor, positions, table: RotaryTable) -> Tensor:
    """Rotate x [B, T, heads, head_dim] at the given absolute positions."""
    if x.shape[-1] != table.head_dim:
        raise ConfigError(f"head_dim mismatch: x has {x.shape[-1]}, table {table.head_dim}")
    cos, sin = table.tables_for(positions)
    return ag.rope(x, cos, sin)


@dataclass
class LayerWeights:
    """One decoder layer. Condensed layers own no key/value projections."""

    wq: Tensor
    wk: Tensor | None
    wv: Tensor | None
    wo: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    attn_norm: Tensor
    mlp_norm: Tensor


@dataclass
class OwnKV:
    """The layer computes its own KVs; optional cache of past positions,
    each [B, n_kv_heads, S, head_dim]."""

    cache_k: Tensor | None = None
    cache_v: Tensor | None = None


@dataclass
class ExternalKV:
    """Externally supplied KVs, [B, n_kv_heads, S, head_dim]."""

    k: Tensor
    v: Tensor


def attention(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask, n_kv_heads: int) -> Tensor:
    """Grouped-query attention over [B, heads, T, head_dim] operands."""
    if mask.length != q.shape[2] or mask.kv_length != k.shape[2]:
        raise ShapeError(
            f"mask ({mask.length}, {mask.kv_length}) does not match q/k lengths "
            f"({q.shape[2]}, {k.shape[2]})"
        )
    return ag.attention(
        q, k, v, kind=mask.kind, n_past=mask.n_past, n_kv_heads=n_kv_heads,
        extra_mask=mask.extra,
    )


def transformer_block(
    h: Tensor,
    lw: LayerWeights,
    kv_source: OwnKV | ExternalKV,
    mask: AttentionMask,
    cos: np.ndarray,
    sin: np.ndarray,
    *,
    n_heads: int,
    n_kv_heads: int,
    eps: float,
) -> tuple[Tensor, tuple[Tensor, Tensor] | None]:
    """Pre-norm residual block: h + attn(norm(h)), then + mlp(norm(.)).

    cos/sin carry this call's query positions (own KVs share them: a key is
    rotated at its token's position at production time). Returns the newly
    produced (k, v) pair, laid out [B, n_kv_heads, T, head_dim], iff the
    layer owns its KVs.
    """
    b, t, d = h.shape
    hd = d // n_heads

    a_in = ag.rmsnorm(h, lw.attn_norm, eps)
    q = ag.reshape(ag.matmul(a_in, lw.wq), (b, t, n_heads, hd))
    q = ag.transpose(ag.rope(q, cos, sin), (0, 2, 1, 3))

    own_kv = None
    if isinstance(kv_source, OwnKV):
        if lw.wk is None or lw.wv is None:
            raise ConfigError("layer has no key/value projections but kv_source is Own")
        k_new = ag.reshape(ag.matmul(a_in, lw.wk), (b, t, n_kv_heads, hd))
        k_new = ag.transpose(ag.rope(k_new, cos, sin), (0, 2, 1, 3))
        v_new = ag.transpose(
            ag.reshape(ag.matmul(a_in, lw.wv), (b, t, n_kv_heads, hd)), (0, 2, 1, 3)
        )
        own_kv = (k_new, v_new)
        if kv_source.cache_k is not None:
            k_all = ag.concat([kv_source.cache_k, k_new], axis=2)
            v_all = ag.concat([kv_source.cache_v, v_new], axis=2)
        else:
            k_all, v_all = k_new, v_new
    else:
        if lw.wk is not None or lw.wv is not None:
            raise ConfigError("layer owns key/value projections but kv_source is External")
        k_all, v_all = kv_source.k, kv_source.v

    att = attention(q, k_all, v_all, mask, n_kv_heads)
    att = ag.reshape(ag.transpose(att, (0, 2, 1, 3)), (b, t, n_heads * hd))
    h = ag.add(h, ag.matmul(att, lw.wo))

    m_in = ag.rmsnorm(h, lw.mlp_norm, eps)
    gated = ag.mul(ag.silu(ag.matmul(m_in, lw.w_gate)), ag.matmul(m_in, lw.w_up))
    h = ag.add(h, ag.matmul(gated, lw.w_down))
    return h, own_kv
