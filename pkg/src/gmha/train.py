"""Training recipe: warmup + cosine schedule, clipped AdamW, byte-level LM loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import attention as A
from .errors import ConfigurationError, NumericError
from .model import ToyLM, init_weights, no_decay
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    dims: A.ModelDims
    arch: A.ArchSpec
    peak_lr: float = 9.63e-4
    warmup_steps: int = 2000
    total_steps: int = 50000
    final_lr: float = 1e-5
    batch_tokens: int = 8192
    seq_len: int = 256
    weight_decay: float = 0.1
    grad_clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigurationError("need 0 <= warmup_steps < total_steps")
        for name in ("peak_lr", "final_lr", "batch_tokens", "seq_len", "grad_clip_norm", "adam_eps", "init_std"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.weight_decay < 0 or not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigurationError("weight_decay must be >= 0 and betas in [0, 1)")
        if self.batch_tokens < self.seq_len:
            raise ConfigurationError("batch_tokens must hold at least one sequence")

    @property
    def batch_size(self) -> int:
        return self.batch_tokens // self.seq_len

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**self.__dict__, **kw})


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` then cosine decay to ``final_lr`` at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: Mapping[str, np.ndarray], state: AdamState, lr: float, cfg: TrainConfig):
    """One clipped AdamW update, in place.  Returns (params, state)."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"grad shape {g.shape} != param shape {params[name].shape} for {name}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name} (max |g| = {np.nanmax(np.abs(g))})")
    norm = global_grad_norm(grads)
    clip = min(1.0, cfg.grad_clip_norm / norm) if norm > 0 else 1.0
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1, c2 = 1.0 - b1**state.step, 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name] * clip
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if not no_decay(name):
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return params, state


def make_corpus(n_bytes: int = 1 << 20, seed: int = 0) -> bytes:
    """Repetitive English-like text built from a small phrase bank."""
    rng = np.random.default_rng(seed)
    phrases = [
        b"the cache holds one key per token. ",
        b"every head reads the same latent keys. ",
        b"a low rank factor keeps the parameter count small. ",
        b"values are derived from the cached keys. ",
        b"the model predicts the next byte of text. ",
        b"attention scores are scaled and normalized. ",
        b"more heads raise the total effective rank. ",
        b"memory traffic dominates the decoding phase. ",
    ]
    parts, size = [], 0
    while size < n_bytes:
        p = phrases[int(rng.integers(len(phrases)))]
        parts.append(p)
        size += len(p)
    return b"".join(parts)[:n_bytes]


def sample_batch(corpus: np.ndarray, rng: np.random.Generator, batch: int, seq_len: int):
    starts = rng.integers(0, corpus.size - seq_len - 1, size=batch)
    idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
    window = corpus[idx]
    return window[:, :-1], window[:, 1:]


@dataclass
class TrainResult:
    model: ToyLM
    metrics: list[dict]
    status: str


def _loss_and_grads(model: ToyLM, inputs, targets):
    leaves = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
    loss = model.loss(inputs, targets, leaves)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), grads


def build_model(cfg: TrainConfig) -> ToyLM:
    return init_weights(ToyLM(cfg.arch, cfg.dims), cfg.seed, std=cfg.init_std)


def train_loop(
    cfg: TrainConfig,
    corpus: bytes,
    on_metrics: Callable[[dict], None] | None = None,
    checkpoint: str | Path | None = None,
    model: ToyLM | None = None,
) -> TrainResult:
    """Train for ``cfg.total_steps`` steps of next-byte prediction.

    Halts with status ``"diverged"`` when the loss goes non-finite or above
    10x the first-step loss, or when a gradient turns non-finite.
    """
    data = np.frombuffer(corpus, dtype=np.uint8).astype(np.intp)
    if data.size < max(cfg.batch_tokens, cfg.seq_len + 2):
        raise ConfigurationError(f"corpus of {data.size} bytes is shorter than batch_tokens={cfg.batch_tokens}")
    if cfg.dims.vocab_V < 256:
        raise ConfigurationError("byte-level training needs vocab_V >= 256")
    model = model if model is not None else build_model(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    metrics: list[dict] = []
    status = "ok"
    initial = None
    for step in range(cfg.total_steps):
        inputs, targets = sample_batch(data, rng, cfg.batch_size, cfg.seq_len)
        loss, grads = _loss_and_grads(model, inputs, targets)
        initial = loss if initial is None else initial
        gnorm = global_grad_norm(grads)
        lr = lr_at(step + 1, cfg)
        row = {"step": step, "loss": loss, "lr": lr, "grad_norm": gnorm, "status": "ok"}
        if not math.isfinite(loss) or loss > 10.0 * initial or not math.isfinite(gnorm):
            row["status"] = status = "diverged"
        else:
            try:
                adamw_step(model.params, grads, state, lr, cfg)
            except NumericError:
                row["status"] = status = "diverged"
        metrics.append(row)
        if on_metrics is not None:
            on_metrics(row)
        if status != "ok":
            break
    if checkpoint is not None:
        from .checkpoint import save_model

        save_model(checkpoint, model, step=len(metrics), seed=cfg.seed)
    return TrainResult(model, metrics, status)
