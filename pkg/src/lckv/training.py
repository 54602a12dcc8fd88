"""Training loop: m tape-free forward rounds, b gradient rounds,
cross-entropy after the last; AdamW with cosine schedule; optional
KV-consistency loss; init from a standard-decoder checkpoint.

Setting b=1 is a degenerate regime kept reachable on purpose: the only
gradient round consumes constant KVs, so the condensed projection pair
receives exactly zero gradient and never trains.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import GradTape, Tensor, backward, detach, seeded_rng
from .errors import ConfigError, NumericError, ShapeError
from .model import LayerRole, LayerWeights, ModelConfig, ModelWeights, layer_roles, parallel_forward


@dataclass
class TrainConfig:
    m: int = 7                    # tape-free forward rounds
    b: int = 2                    # gradient rounds
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    warmup_steps: int = 50
    total_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    batch_size_tokens: int = 2048
    seq_len: int = 128
    kv_loss_weight: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.b < 1:
            raise ConfigError("b must be >= 1")
        if self.m < 0:
            raise ConfigError("m must be >= 0")
        if self.lr_min > self.lr_max:
            raise ConfigError("lr_min must be <= lr_max")
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ConfigError("warmup_steps must be >= 0 and total_steps >= 1")
        if self.warmup_steps >= self.total_steps:
            raise ConfigError("warmup_steps must be < total_steps")
        if self.seq_len < 2 or self.batch_size_tokens < self.seq_len:
            raise ConfigError("need seq_len >= 2 and batch_size_tokens >= seq_len")


@dataclass
class Batch:
    inputs: np.ndarray   # [rows, seq_len] token ids
    targets: np.ndarray  # inputs shifted left by one

    def __post_init__(self):
        if self.inputs.shape != self.targets.shape:
            raise ShapeError("batch inputs/targets shapes differ")

    @property
    def n_tokens(self) -> int:
        return self.inputs.size


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, cosine decay to lr_min at total_steps."""
    if step <= 0:
        return 0.0
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    frac = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled weight decay; norm gains and the embedding are not decayed."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.no_decay = {
            n for n in params if n.endswith("_norm") or n == "embedding"
        }

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        eps = 1e-8
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + eps)
            if self.cfg.weight_decay and name not in self.no_decay:
                update = update + self.cfg.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)


def kv_consistency_loss(kv_prev: Tensor, kv_last: Tensor) -> Tensor:
    """Mean squared elementwise difference between two KV tensors."""
    if kv_prev.shape != kv_last.shape:
        raise ShapeError(f"kv shapes differ: {kv_prev.shape} vs {kv_last.shape}")
    d = ag.sub(kv_last, kv_prev)
    return ag.mean_all(ag.mul(d, d))


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.vdot(p.grad, p.grad).real)
    return math.sqrt(total)


@dataclass
class StepStats:
    step: int
    lr: float
    loss: float
    grad_norm: float
    tokens_per_sec: float


def train_step(
    weights: ModelWeights,
    opt: AdamW,
    batch: Batch,
    tcfg: TrainConfig,
    lr: float,
) -> tuple[float, float]:
    """One update: parallel rounds (m detached + b live), cross-entropy on
    the final round, global-norm clip, AdamW. Returns (loss, grad_norm)."""
    if batch.inputs.max() >= weights.config.vocab_size:
        raise ShapeError("batch contains ids >= vocab_size")
    params = weights.parameters()
    weights.zero_grad()
    with GradTape() as tape:
        res = parallel_forward(
            batch.inputs, weights, n_iters=tcfg.m + tcfg.b, detach_iters=tcfg.m
        )
        loss = ag.cross_entropy(res.logits, batch.targets)
        if tcfg.kv_loss_weight > 0.0 and len(res.kv_iters) >= 2:
            pk, pv = res.kv_iters[-2]
            lk, lv = res.kv_iters[-1]
            # Previous-round KVs act as a fixed target pulling the last
            # round toward convergence.
            kv_term = ag.add(
                kv_consistency_loss(detach(pk), lk), kv_consistency_loss(detach(pv), lv)
            )
            loss = ag.add(loss, ag.scale(kv_term, 0.5 * tcfg.kv_loss_weight))
        loss_val = loss.item()
        backward(tape, loss, params.values())
    norm = global_grad_norm(params)
    if not (np.isfinite(loss_val) and np.isfinite(norm)):
        raise NumericError(
            f"non-finite training state at optimizer step {opt.step_count + 1}: "
            f"loss={loss_val}, lr={lr}, grad_norm={norm}"
        )
    if tcfg.grad_clip and norm > tcfg.grad_clip:
        scale = tcfg.grad_clip / (norm + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    opt.step(params, lr)
    return loss_val, norm


def sample_batch(ids: np.ndarray, rows: int, seq_len: int, rng: np.random.Generator) -> Batch:
    if len(ids) < seq_len + 1:
        raise ConfigError(f"corpus ({len(ids)} tokens) shorter than seq_len+1")
    starts = rng.integers(0, len(ids) - seq_len - 1, size=rows)
    windows = np.stack([ids[s : s + seq_len + 1] for s in starts])
    return Batch(inputs=windows[:, :-1], targets=windows[:, 1:])


def train_model(
    model_cfg: ModelConfig,
    tcfg: TrainConfig,
    train_ids: np.ndarray,
    *,
    weights: ModelWeights | None = None,
    log_path=None,
    on_step=None,
) -> tuple[ModelWeights, list[StepStats]]:
    """Run tcfg.total_steps updates over randomly sampled windows of
    train_ids. Fully deterministic for a given seed. Writes the training-log
    CSV (step, lr, loss, grad_norm, tokens_per_sec) when log_path is set."""
    from .model import init_weights  # local import keeps module load light

    tcfg.validate()
    if weights is None:
        weights = init_weights(model_cfg, seed=tcfg.seed)
    rng = seeded_rng(tcfg.seed + 1)
    rows = max(1, tcfg.batch_size_tokens // tcfg.seq_len)
    opt = AdamW(weights.parameters(), tcfg)
    history: list[StepStats] = []
    log_file = open(log_path, "w") if log_path else None
    if log_file:
        log_file.write("step,lr,loss,grad_norm,tokens_per_sec\n")
    try:
        for step in range(1, tcfg.total_steps + 1):
            t0 = time.perf_counter()
            batch = sample_batch(train_ids, rows, tcfg.seq_len, rng)
            lr = cosine_lr(step, tcfg)
            loss, norm = train_step(weights, opt, batch, tcfg, lr)
            dt = time.perf_counter() - t0
            stats = StepStats(step, lr, loss, norm, batch.n_tokens / dt)
            history.append(stats)
            if log_file:
                log_file.write(
                    f"{stats.step},{stats.lr:.8g},{stats.loss:.8g},"
                    f"{stats.grad_norm:.8g},{stats.tokens_per_sec:.8g}\n"
                )
            if on_step:
                on_step(stats)
    finally:
        if log_file:
            log_file.close()
    return weights, history


def evaluate(
    weights: ModelWeights,
    ids: np.ndarray,
    *,
    n_iters: int | None = None,
    seq_len: int | None = None,
    batch_rows: int = 16,
) -> float:
    """Mean next-token NLL over non-overlapping windows of ids, computed
    with iterated parallel rounds (default train_m + train_b rounds, the
    training-consistent evaluation path)."""
    cfg = weights.config
    seq_len = seq_len or cfg.max_seq_len
    n_iters = n_iters or (cfg.train_m + cfg.train_b)
    n_windows = (len(ids) - 1) // seq_len
    if n_windows < 1:
        raise ConfigError(f"need at least seq_len+1={seq_len + 1} tokens to evaluate")
    total_nll = 0.0
    total_tokens = 0
    with ag.no_grad():
        for lo in range(0, n_windows, batch_rows):
            hi = min(lo + batch_rows, n_windows)
            rows = np.stack(
                [ids[w * seq_len : w * seq_len + seq_len + 1] for w in range(lo, hi)]
            )
            res = parallel_forward(rows[:, :-1], weights, n_iters=n_iters)
            loss = ag.cross_entropy(res.logits, rows[:, 1:])
            total_nll += loss.item() * rows[:, 1:].size
            total_tokens += rows[:, 1:].size
    return total_nll / total_tokens


def init_from_standard_checkpoint(standard: ModelWeights, config: ModelConfig) -> ModelWeights:
    """Convert a standard decoder's weights into this config's layout.

    Warmup layers keep their own KV pairs; condensed layers' pairs are
    dropped, except the topmost condensed layer's pair, which seeds the
    condensed projection. With warmup_count == n_layers the copy is exact.
    """
    config.validate()
    src = standard.config
    mismatched = [
        name
        for name, a, b in [
            ("n_layers", src.n_layers, config.n_layers),
            ("hidden_size", src.hidden_size, config.hidden_size),
            ("n_heads", src.n_heads, config.n_heads),
            ("n_kv_heads", src.n_kv_heads, config.n_kv_heads),
            ("intermediate_size", src.intermediate_size, config.intermediate_size),
            ("vocab_size", src.vocab_size, config.vocab_size),
        ]
        if a != b
    ]
    if mismatched:
        raise ConfigError(f"checkpoint geometry differs on: {', '.join(mismatched)}")
    if any(lw.wk is None for lw in standard.layers):
        raise ConfigError("source checkpoint is not a standard decoder (missing KV pairs)")

    def cp(t: Tensor) -> Tensor:
        return ag.parameter(t.data.copy())

    roles = layer_roles(config)
    layers = []
    for role, lw in zip(roles, standard.layers):
        own = role is not LayerRole.CONDENSED
        layers.append(
            LayerWeights(
                wq=cp(lw.wq),
                wk=cp(lw.wk) if own else None,
                wv=cp(lw.wv) if own else None,
                wo=cp(lw.wo),
                w_gate=cp(lw.w_gate),
                w_up=cp(lw.w_up),
                w_down=cp(lw.w_down),
                attn_norm=cp(lw.attn_norm),
                mlp_norm=cp(lw.mlp_norm),
            )
        )
    condensed_idx = [i for i, r in enumerate(roles) if r is LayerRole.CONDENSED]
    if condensed_idx:
        top_src = standard.layers[condensed_idx[-1]]
        wk_c, wv_c = cp(top_src.wk), cp(top_src.wv)
    else:
        wk_c = wv_c = None
    return ModelWeights(
        config=config,
        embedding=cp(standard.embedding),
        layers=layers,
        wk_c=wk_c,
        wv_c=wv_c,
        final_norm=cp(standard.final_norm),
        output_head=cp(standard.output_head),
    )
