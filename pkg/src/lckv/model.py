"""The layer-condensed decoder and its two equivalent training graphs.

Non-warmup ("condensed") layers own no key/value projections: their queries
attend externally supplied KVs projected from the top layer's output by a
dedicated pair (wk_c, wv_c). Warmup layers keep standard self-attention.

Two forwards are provided. sequential_forward processes tokens strictly
left to right, so token i's condensed layers read the finished top-layer
KVs of tokens < i; it is the reference semantics, and the oracle the tests
hold parallel_forward against. parallel_forward runs full-depth passes over
all tokens at once for n_iters rounds, pairing condensed-layer queries with
the previous round's top-layer KVs under the no-self mask; by induction
token i is exact from round i onward no matter how the KVs were
initialized, so n rounds reproduce the sequential result while keeping
every round a batched, parallel computation.
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad, seeded_rng
from .blocks import (
    AttentionMask,
    ExternalKV,
    LayerWeights,
    OwnKV,
    get_rotary,
    transformer_block,
)
from .errors import ConfigError, ContractError

PLACEMENTS = ("sandwich", "all-bottom", "all-top")


@dataclass
class ModelConfig:
    n_layers: int = 8
    warmup_count: int = 2
    hidden_size: int = 128
    n_heads: int = 8
    n_kv_heads: int = 4
    intermediate_size: int = 256
    vocab_size: int = 258
    max_seq_len: int = 256
    train_m: int = 7
    train_b: int = 2
    rmsnorm_eps: float = 1e-5
    dtype: str = "float32"
    warmup_placement: str = "sandwich"
    rope_base: float = 10000.0

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if not 0 <= self.warmup_count <= self.n_layers:
            raise ConfigError(
                f"warmup_count must be in [0, n_layers], got {self.warmup_count}"
            )
        if self.warmup_placement not in PLACEMENTS:
            raise ConfigError(
                f"warmup_placement must be one of {PLACEMENTS}, got {self.warmup_placement!r}"
            )
        if self.warmup_placement == "sandwich" and self.warmup_count % 2 != 0:
            raise ConfigError(
                f"warmup_count must be even for sandwich placement, got {self.warmup_count}"
            )
        if self.hidden_size % self.n_heads != 0:
            raise ConfigError("hidden_size must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError("n_heads must be divisible by n_kv_heads")
        if self.head_dim % 2 != 0:
            raise ConfigError("head_dim must be even (rotary embedding pairs)")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")
        if self.train_m < 0:
            raise ConfigError("train_m must be >= 0")
        if self.train_b < 1:
            raise ConfigError("train_b must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def with_dtype(self, dtype: str) -> "ModelConfig":
        return replace(self, dtype=dtype)


class LayerRole(Enum):
    WARMUP_BOTTOM = "warmup_bottom"
    CONDENSED = "condensed"
    WARMUP_TOP = "warmup_top"


def layer_roles(config: ModelConfig) -> list[LayerRole]:
    """Deterministic role per layer index for the configured placement."""
    config.validate()
    n, w = config.n_layers, config.warmup_count
    if config.warmup_placement == "sandwich":
        half = w // 2
        return (
            [LayerRole.WARMUP_BOTTOM] * half
            + [LayerRole.CONDENSED] * (n - w)
            + [LayerRole.WARMUP_TOP] * half
        )
    if config.warmup_placement == "all-bottom":
        return [LayerRole.WARMUP_BOTTOM] * w + [LayerRole.CONDENSED] * (n - w)
    return [LayerRole.CONDENSED] * (n - w) + [LayerRole.WARMUP_TOP] * w


@dataclass
class ModelWeights:
    """All trainable parameters. There are exactly warmup_count + 1 KV
    projection pairs when any condensed layer exists; with warmup_count ==
    n_layers the model is a standard decoder and the condensed pair is
    absent, so the parameter count matches a standard decoder exactly."""

    config: ModelConfig
    embedding: Tensor
    layers: list[LayerWeights]
    wk_c: Tensor | None
    wv_c: Tensor | None
    final_norm: Tensor
    output_head: Tensor

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"embedding": self.embedding}
        for i, lw in enumerate(self.layers):
            out[f"layers.{i}.wq"] = lw.wq
            if lw.wk is not None:
                out[f"layers.{i}.wk"] = lw.wk
                out[f"layers.{i}.wv"] = lw.wv
            out[f"layers.{i}.wo"] = lw.wo
            out[f"layers.{i}.w_gate"] = lw.w_gate
            out[f"layers.{i}.w_up"] = lw.w_up
            out[f"layers.{i}.w_down"] = lw.w_down
            out[f"layers.{i}.attn_norm"] = lw.attn_norm
            out[f"layers.{i}.mlp_norm"] = lw.mlp_norm
        if self.wk_c is not None:
            out["condensed.wk"] = self.wk_c
            out["condensed.wv"] = self.wv_c
        out["final_norm"] = self.final_norm
        out["output_head"] = self.output_head
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def kv_pair_count(self) -> int:
        own = sum(1 for lw in self.layers if lw.wk is not None)
        return own + (1 if self.wk_c is not None else 0)

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def astype(self, dtype: str) -> "ModelWeights":
        cfg = self.config.with_dtype(dtype)

        def cast(t: Tensor | None) -> Tensor | None:
            if t is None:
                return None
            return Tensor(t.data.astype(cfg.np_dtype), requires_grad=t.requires_grad)

        layers = [
            LayerWeights(
                wq=cast(lw.wq), wk=cast(lw.wk), wv=cast(lw.wv), wo=cast(lw.wo),
                w_gate=cast(lw.w_gate), w_up=cast(lw.w_up), w_down=cast(lw.w_down),
                attn_norm=cast(lw.attn_norm), mlp_norm=cast(lw.mlp_norm),
            )
            for lw in self.layers
        ]
        return ModelWeights(
            config=cfg, embedding=cast(self.embedding), layers=layers,
            wk_c=cast(self.wk_c), wv_c=cast(self.wv_c),
            final_norm=cast(self.final_norm), output_head=cast(self.output_head),
        )


def init_weights(config: ModelConfig, seed: int = 0) -> ModelWeights:
    """Seeded init: N(0, 0.02) projections with the residual-output
    projections scaled down by depth, unit norm gains, zero output head
    (so the initial loss is exactly ln(vocab_size))."""
    config.validate()
    rng = seeded_rng(seed)
    dt = config.np_dtype
    d = config.hidden_size
    hd = config.head_dim
    kv_dim = config.n_kv_heads * hd
    std = 0.02
    out_std = std / np.sqrt(2 * config.n_layers)

    def draw(shape, s) -> Tensor:
        return ag.parameter((rng.standard_normal(shape) * s).astype(dt))

    roles = layer_roles(config)
    embedding = draw((config.vocab_size, d), std)
    layers = []
    for role in roles:
        own = role is not LayerRole.CONDENSED
        layers.append(
            LayerWeights(
                wq=draw((d, config.n_heads * hd), std),
                wk=draw((d, kv_dim), std) if own else None,
                wv=draw((d, kv_dim), std) if own else None,
                wo=draw((config.n_heads * hd, d), out_std),
                w_gate=draw((d, config.intermediate_size), std),
                w_up=draw((d, config.intermediate_size), std),
                w_down=draw((config.intermediate_size, d), out_std),
                attn_norm=ag.parameter(np.ones(d, dtype=dt)),
                mlp_norm=ag.parameter(np.ones(d, dtype=dt)),
            )
        )
    has_condensed = config.warmup_count < config.n_layers
    wk_c = draw((d, kv_dim), std) if has_condensed else None
    wv_c = draw((d, kv_dim), std) if has_condensed else None
    return ModelWeights(
        config=config,
        embedding=embedding,
        layers=layers,
        wk_c=wk_c,
        wv_c=wv_c,
        final_norm=ag.parameter(np.ones(d, dtype=dt)),
        output_head=ag.parameter(np.zeros((d, config.vocab_size), dtype=dt)),
    )


def _as_batch(tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] < 1:
        raise ContractError(f"tokens must be a non-empty [batch, n] sequence, got {tokens.shape}")
    return tokens


def _project_condensed(h: Tensor, weights: ModelWeights, cos, sin) -> tuple[Tensor, Tensor]:
    cfg = weights.config
    b, t, _ = h.shape
    shape = (b, t, cfg.n_kv_heads, cfg.head_dim)
    k = ag.transpose(ag.rope(ag.reshape(ag.matmul(h, weights.wk_c), shape), cos, sin), (0, 2, 1, 3))
    v = ag.transpose(ag.reshape(ag.matmul(h, weights.wv_c), shape), (0, 2, 1, 3))
    return k, v


@dataclass
class SequentialResult:
    hiddens: Tensor                      # [B, n, d] top-layer outputs
    logits: Tensor                       # [B, n, vocab]
    cond_k: Tensor | None                # [B, n_kv_heads, n, head_dim]
    cond_v: Tensor | None
    warmup_kv: dict[int, tuple[Tensor, Tensor]]


def sequential_forward(tokens, weights: ModelWeights) -> SequentialResult:
    """Reference left-to-right pass: token i's condensed layers read only the
    condensed KVs of tokens < i (the first token reads the zero dummy)."""
    cfg = weights.config
    tokens = _as_batch(tokens)
    b, n = tokens.shape
    if n > cfg.max_seq_len:
        raise ContractError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    roles = layer_roles(cfg)
    table = get_rotary(cfg.head_dim, cfg.rope_base, cfg.np_dtype)
    has_condensed = weights.wk_c is not None

    warm_k: dict[int, list[Tensor]] = {i: [] for i, r in enumerate(roles) if r is not LayerRole.CONDENSED}
    warm_v: dict[int, list[Tensor]] = {i: [] for i in warm_k}
    cond_k: list[Tensor] = []
    cond_v: list[Tensor] = []
    hidden_cols: list[Tensor] = []
    logit_cols: list[Tensor] = []
    empty_kv = Tensor(np.zeros((b, cfg.n_kv_heads, 0, cfg.head_dim), dtype=cfg.np_dtype))

    for i in range(n):
        cos, sin = table.tables_for([i])
        h = ag.embedding_lookup(weights.embedding, tokens[:, i : i + 1])
        if cond_k:
            ext_k = ag.concat(cond_k, axis=2)
            ext_v = ag.concat(cond_v, axis=2)
        else:
            ext_k = ext_v = empty_kv
        for li, lw in enumerate(weights.layers):
            if roles[li] is LayerRole.CONDENSED:
                # The cache holds strictly-past tokens only: all visible.
                mask = AttentionMask.causal_no_self(1, len(cond_k), n_past=len(cond_k))
                h, _ = transformer_block(
                    h, lw, ExternalKV(ext_k, ext_v), mask, cos, sin,
                    n_heads=cfg.n_heads, n_kv_heads=cfg.n_kv_heads, eps=cfg.rmsnorm_eps,
                )
            else:
                if warm_k[li]:
                    cache = OwnKV(ag.concat(warm_k[li], axis=2), ag.concat(warm_v[li], axis=2))
                else:
                    cache = OwnKV()
                mask = AttentionMask.causal_with_self(1, i + 1)
                h, own = transformer_block(
                    h, lw, cache, mask, cos, sin,
                    n_heads=cfg.n_heads, n_kv_heads=cfg.n_kv_heads, eps=cfg.rmsnorm_eps,
                )
                warm_k[li].append(own[0])
                warm_v[li].append(own[1])
        if has_condensed:
            kc, vc = _project_condensed(h, weights, cos, sin)
            cond_k.append(kc)
            cond_v.append(vc)
        hidden_cols.append(h)
        normed = ag.rmsnorm(h, weights.final_norm, cfg.rmsnorm_eps)
        logit_cols.append(ag.matmul(normed, weights.output_head))

    return SequentialResult(
        hiddens=ag.concat(hidden_cols, axis=1),
        logits=ag.concat(logit_cols, axis=1),
        cond_k=ag.concat(cond_k, axis=2) if cond_k else None,
        cond_v=ag.concat(cond_v, axis=2) if cond_v else None,
        warmup_kv={
            li: (ag.concat(warm_k[li], axis=2), ag.concat(warm_v[li], axis=2))
            for li in warm_k
        },
    )


@dataclass
class ParallelResult:
    logits: Tensor | None                # final-iteration logits
    final_hidden: Tensor                 # [B, n, d]
    kv_iters: list[tuple[Tensor, Tensor]]  # condensed (K, V) per iteration
    warmup_kv: dict[int, tuple[Tensor, Tensor]]  # final iteration
    hiddens_per_iter: list[np.ndarray] = field(default_factory=list)
    n_iters_run: int = 0


def parallel_forward(
    tokens,
    weights: ModelWeights,
    n_iters: int,
    initial_kv: tuple[np.ndarray, np.ndarray] | None = None,
    detach_iters: int = 0,
    record_hiddens: bool = False,
    compute_logits: bool = True,
) -> ParallelResult:
    """Iterated full-depth passes over all tokens at once.

    Round t pairs condensed-layer queries with round t-1's top-layer KVs
    under the no-self mask; round 1 uses initial_kv (zeros by default, any
    values converge identically). The first detach_iters rounds run with no
    tape recording at all, so only the remaining rounds build graph and the
    KVs crossing that boundary are constants. Warmup-layer KVs are
    recomputed inside every round; carrying them across rounds would break
    the per-token induction. Logits come from the final round only.

    With no condensed layers every round is the identical standard-decoder
    pass, so a single round is run regardless of n_iters.
    """
    cfg = weights.config
    tokens = _as_batch(tokens)
    b, n = tokens.shape
    if n > cfg.max_seq_len:
        raise ContractError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    if n_iters < 1:
        raise ContractError(f"n_iters must be >= 1, got {n_iters}")
    if detach_iters >= n_iters:
        raise ContractError(f"detach_iters {detach_iters} must be < n_iters {n_iters}")
    roles = layer_roles(cfg)
    has_condensed = weights.wk_c is not None
    if not has_condensed:
        n_iters, detach_iters = 1, 0
    table = get_rotary(cfg.head_dim, cfg.rope_base, cfg.np_dtype)
    cos, sin = table.tables_for(np.arange(n))

    kv_shape = (b, cfg.n_kv_heads, n, cfg.head_dim)
    if initial_kv is None:
        k_prev = Tensor(np.zeros(kv_shape, dtype=cfg.np_dtype))
        v_prev = Tensor(np.zeros(kv_shape, dtype=cfg.np_dtype))
    else:
        k_prev = Tensor(np.asarray(initial_kv[0], dtype=cfg.np_dtype).reshape(kv_shape))
        v_prev = Tensor(np.asarray(initial_kv[1], dtype=cfg.np_dtype).reshape(kv_shape))

    x = ag.embedding_lookup(weights.embedding, tokens)
    mask_self = AttentionMask.causal_with_self(n, n)
    mask_noself = AttentionMask.causal_no_self(n, n)

    kv_iters: list[tuple[Tensor, Tensor]] = []
    hiddens_per_iter: list[np.ndarray] = []
    warmup_kv: dict[int, tuple[Tensor, Tensor]] = {}
    h = x
    for t in range(1, n_iters + 1):
        guard = no_grad() if t <= detach_iters else nullcontext()
        with guard:
            h = x
            for li, lw in enumerate(weights.layers):
                if roles[li] is LayerRole.CONDENSED:
                    h, _ = transformer_block(
                        h, lw, ExternalKV(k_prev, v_prev), mask_noself, cos, sin,
                        n_heads=cfg.n_heads, n_kv_heads=cfg.n_kv_heads, eps=cfg.rmsnorm_eps,
                    )
                else:
                    h, own = transformer_block(
                        h, lw, OwnKV(), mask_self, cos, sin,
                        n_heads=cfg.n_heads, n_kv_heads=cfg.n_kv_heads, eps=cfg.rmsnorm_eps,
                    )
                    if t == n_iters:
                        warmup_kv[li] = own
            if has_condensed:
                k_prev, v_prev = _project_condensed(h, weights, cos, sin)
                kv_iters.append((k_prev, v_prev))
            if record_hiddens:
                hiddens_per_iter.append(h.data)

    logits = None
    if compute_logits:
        normed = ag.rmsnorm(h, weights.final_norm, cfg.rmsnorm_eps)
        logits = ag.matmul(normed, weights.output_head)
    return ParallelResult(
        logits=logits,
        final_hidden=h,
        kv_iters=kv_iters,
        warmup_kv=warmup_kv,
        hiddens_per_iter=hiddens_per_iter,
        n_iters_run=n_iters,
    )
