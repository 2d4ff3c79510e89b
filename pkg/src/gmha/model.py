"""Dense decoder-only byte-level LM around any attention variant.

Layout per layer: pre-RMSNorm -> attention -> residual, pre-RMSNorm ->
SwiGLU FFN -> residual.  A final RMSNorm feeds an untied output projection.
"""

from __future__ import annotations

from math import prod, sqrt
from typing import Mapping

import numpy as np

from . import attention as A
from .kvcache import KvCacheState, decode_step
from .tensor import Tensor, cross_entropy, matmul, rmsnorm, swiglu_ffn, take

BOS = 256
RMS_EPS = 1e-6


def param_shapes(spec: A.ArchSpec, dims: A.ModelDims) -> dict[str, tuple[int, ...]]:
    H, F, V = dims.H, dims.ffn_F, dims.vocab_V
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, H)}
    attn = A.expected_shapes(spec, dims)
    for layer in range(dims.L):
        p = f"layers.{layer}."
        shapes[p + "attn_norm"] = (H,)
        shapes.update({p + "attn." + k: s for k, s in attn.items()})
        shapes[p + "ffn_norm"] = (H,)
        shapes.update({p + "ffn.w1": (H, F), p + "ffn.w3": (H, F), p + "ffn.w2": (F, H)})
    shapes["final_norm"] = (H,)
    shapes["lm_head"] = (H, V)
    return shapes


def non_embedding_params(spec: A.ArchSpec, dims: A.ModelDims) -> int:
    """Attention + FFN weights over all layers (embeddings and norm gains excluded)."""
    per_layer = sum(prod(s) for s in A.expected_shapes(spec, dims).values()) + 3 * dims.H * dims.ffn_F
    return dims.L * per_layer


def no_decay(name: str) -> bool:
    return name.endswith("_norm") or name.endswith(".alpha")


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """N(0, std^2) redrawn until every entry lies within +-bound*std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


class ToyLM:
    def __init__(self, spec: A.ArchSpec, dims: A.ModelDims, params: Mapping[str, np.ndarray] | None = None):
        A.validate_dims(spec, dims)
        self.spec = spec
        self.dims = dims
        self.shapes = param_shapes(spec, dims)
        if params is None:
            params = {k: np.zeros(s) for k, s in self.shapes.items()}
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in self.shapes}

    def attn_weights(self, params: Mapping, layer: int) -> dict:
        prefix = f"layers.{layer}.attn."
        return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}

    # -- training path ---------------------------------------------------------
    def logits(self, tokens, params: Mapping[str, Tensor] | None = None) -> Tensor:
        """(B, T) or (T,) byte ids -> logits of matching leading shape plus V."""
        P = params if params is not None else {k: Tensor(v) for k, v in self.params.items()}
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        h = take(P["embed"], tokens, axis=0)
        for layer in range(self.dims.L):
            p = f"layers.{layer}."
            a = A.attn_forward(self.spec, self.attn_weights(P, layer), self.dims, rmsnorm(h, P[p + "attn_norm"], RMS_EPS))
            h = h + a
            f = swiglu_ffn(rmsnorm(h, P[p + "ffn_norm"], RMS_EPS), P[p + "ffn.w1"], P[p + "ffn.w3"], P[p + "ffn.w2"])
            h = h + f
        out = matmul(rmsnorm(h, P["final_norm"], RMS_EPS), P["lm_head"])
        return out.reshape(out.shape[1:]) if squeeze else out

    def loss(self, inputs, targets, params: Mapping[str, Tensor] | None = None) -> Tensor:
        return cross_entropy(self.logits(inputs, params), targets)

    # -- cached decoding -----------------------------------------------------------
    def new_cache(self, elem_bytes: int = 2) -> KvCacheState:
        return KvCacheState.empty(self.spec, self.dims, elem_bytes)

    def step(self, token: int, cache: KvCacheState) -> np.ndarray:
        """Feed one token through every layer using the cache; returns next-token logits (V,)."""
        P = {k: Tensor(v) for k, v in self.params.items()}
        pos = cache.token_count(0)
        h = Tensor(self.params["embed"][token][None])
        for layer in range(self.dims.L):
            p = f"layers.{layer}."
            a, _ = decode_step(self.spec, self.attn_weights(self.params, layer), self.dims, cache,
                               rmsnorm(h, P[p + "attn_norm"], RMS_EPS), pos, layer=layer)
            h = h + a
            h = h + swiglu_ffn(rmsnorm(h, P[p + "ffn_norm"], RMS_EPS), P[p + "ffn.w1"], P[p + "ffn.w3"], P[p + "ffn.w2"])
        return matmul(rmsnorm(h, P["final_norm"], RMS_EPS), P["lm_head"]).data[0]

    def generate(self, prompt: list[int], steps: int, cache: KvCacheState | None = None):
        """Greedy decoding.  Every fed token (prompt and generated) ends up cached."""
        cache = cache if cache is not None else self.new_cache()
        prompt = list(prompt) or [BOS]
        logits = None
        for t in prompt:
            logits = self.step(t, cache)
        out = []
        for _ in range(steps):
            nxt = int(np.argmax(logits))
            out.append(nxt)
            logits = self.step(nxt, cache)
        return out, cache


def init_weights(model: ToyLM, seed: int, std: float = 0.02, depth_scale: bool = True) -> ToyLM:
    """Truncated-normal init (+-2 std) for every weight matrix.

    Attention output projections and FFN ``w2`` of layer l (1-based) are then
    divided by sqrt(2 l).  Norm gains start at one and the MFA-KR gate at zero.
    Each parameter draws from its own generator keyed by (seed, index), so a
    single tensor can be replayed.
    """
    for i, (name, shape) in enumerate(model.shapes.items()):
        if name.endswith("_norm"):
            model.params[name] = np.ones(shape)
            continue
        if name.endswith(".alpha"):
            model.params[name] = np.zeros(shape)
            continue
        w = truncated_normal(np.random.default_rng([seed, i]), shape, std)
        if depth_scale and (name.endswith(".ffn.w2") or name.rsplit(".", 1)[-1] in A.OUTPUT_PROJECTIONS):
            layer = int(name.split(".")[1]) + 1
            w = w / sqrt(2 * layer)
        model.params[name] = w
    return model
