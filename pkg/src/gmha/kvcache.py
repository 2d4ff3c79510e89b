"""KV-cache state and token-at-a-time decoding.

The cache holds exactly the per-token vectors each architecture needs and
nothing else, so stored-element counts can be checked against the closed-form
bytes-per-token figures.  Values are kept at float64; ``elem_bytes`` is only
used for accounting (2 = 16-bit storage).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import attention as A
from .errors import NumericError, OrderingError
from .tensor import Tensor, rope_np, softmax_np

log = logging.getLogger(__name__)


def cache_slot_dims(spec: A.ArchSpec, dims: A.ModelDims) -> dict[str, int]:
    """Per-layer cached width of each slot."""
    H, n, d, C, g, dr = dims.H, dims.n_heads, dims.head_dim, dims.latent_C, dims.groups_g, dims.rope_dim_dr
    k = spec.kind
    if k == "fpba":
        return {"k": H * H, "v": H * H}
    if k == "mha":
        return {"k": n * d, "v": n * d}
    if k == "mqa":
        return {"k": d, "v": d}
    if k == "gqa":
        return {"k": g * d, "v": g * d}
    if k == "mla":
        slots = {"k_latent": C, "v_latent": C}
        if dr:
            slots["k_rope"] = dr
        return slots
    if k == "mfa":
        return {"k": C, "v": C}
    return {"k": C}


def cache_bytes_per_token(spec: A.ArchSpec, dims: A.ModelDims, elem_bytes: int = 2) -> int:
    if elem_bytes < 1:
        raise ValueError("elem_bytes must be >= 1")
    if spec.kind == "fpba":
        log.debug("fpba caches 2*H^2 values per layer per token; reported for reference only")
    return elem_bytes * dims.L * sum(cache_slot_dims(spec, dims).values())


@dataclass
class KvCacheState:
    """Append-only per-layer buffers.  ``per_layer[l][slot]`` is a list of rows."""

    per_layer: list[dict[str, list[np.ndarray]]]
    slot_dims: dict[str, int]
    elem_bytes: int = 2

    @classmethod
    def empty(cls, spec: A.ArchSpec, dims: A.ModelDims, elem_bytes: int = 2) -> "KvCacheState":
        slot_dims = cache_slot_dims(spec, dims)
        return cls([{s: [] for s in slot_dims} for _ in range(dims.L)], slot_dims, elem_bytes)

    def token_count(self, layer: int = 0) -> int:
        counts = {len(rows) for rows in self.per_layer[layer].values()}
        assert len(counts) == 1, "slots out of step"
        return counts.pop()

    def slot(self, layer: int, name: str) -> np.ndarray:
        rows = self.per_layer[layer][name]
        if not rows:
            return np.zeros((0, self.slot_dims[name]))
        return np.stack(rows)

    def append(self, layer: int, rows: Mapping[str, np.ndarray]) -> None:
        buf = self.per_layer[layer]
        if set(rows) != set(buf):
            raise KeyError(f"expected slots {sorted(buf)}, got {sorted(rows)}")
        for name, row in rows.items():
            row = np.asarray(row, dtype=np.float64).reshape(-1)
            if row.shape != (self.slot_dims[name],):
                raise ValueError(f"slot {name} expects width {self.slot_dims[name]}, got {row.shape}")
            buf[name].append(row.copy())

    def element_count(self) -> int:
        return sum(row.size for layer in self.per_layer for rows in layer.values() for row in rows)

    def measured_bytes(self) -> int:
        return self.element_count() * self.elem_bytes


def _rot(v: np.ndarray, pos, spec: A.ArchSpec) -> np.ndarray:
    """Rotate the trailing axis of v (..., D) at a single position."""
    if spec.pos_embed != "rope":
        return v
    return rope_np(v[..., None, :], [pos], spec.rope_base)[..., 0, :]


def _project(spec, w, dims, x, pos) -> dict[str, np.ndarray]:
    """Cache rows contributed by one token."""
    k = spec.kind
    if k == "fpba":
        return {"k": np.einsum("h,cgh->cg", x, w["W_c"]), "v": np.einsum("h,chg->cg", x, w["U_c"])}
    if k == "mha":
        return {"k": _rot(np.einsum("h,nhd->nd", x, w["K_c"]), pos, spec),
                "v": np.einsum("h,nhd->nd", x, w["V_c"])}
    if k == "mqa":
        return {"k": _rot(x @ w["K"], pos, spec), "v": x @ w["V"]}
    if k == "gqa":
        return {"k": _rot(np.einsum("h,ghd->gd", x, w["K_g"]), pos, spec),
                "v": np.einsum("h,ghd->gd", x, w["V_g"])}
    if k == "mla":
        rows = {"k_latent": x @ w["S_k"], "v_latent": x @ w["S_v"]}
        if dims.rope_dim_dr:
            rows["k_rope"] = _rot(x @ w["W_kr"], pos, spec)
        return rows
    if k == "mfa":
        return {"k": _rot(x @ w["S_k"], pos, spec), "v": x @ w["S_v"]}
    return {"k": x @ w["S_k"]}  # mfa_kr: unrotated; values derive from it


def _queries(spec, w, dims, x, pos) -> np.ndarray:
    k = spec.kind
    if k == "fpba":
        return np.broadcast_to(x, (dims.H, dims.H))
    if k in ("mha", "mqa", "gqa"):
        return _rot(np.einsum("h,nhd->nd", x, w["Q_c"]), pos, spec)
    if k == "mla":
        return np.einsum("c,ncd->nd", x @ w["S_q"], w["Q_c"])
    if not spec.factored_q:
        return _rot(np.einsum("h,nhc->nc", x, w["W_qc"]), pos, spec)
    return _rot(np.einsum("c,ncd->nd", x @ w["S_q"], w["Q_c"]), pos, spec)


def _keys_values(spec, w, dims, cache, layer):
    """Per-head (heads, T, dk) keys and (heads, T, dv) values read from the cache."""
    k = spec.kind
    K = cache.slot(layer, "k") if "k" in cache.slot_dims else None
    T = cache.token_count(layer)
    if k == "fpba":
        H = dims.H
        V = cache.slot(layer, "v")
        return K.reshape(T, H, H).transpose(1, 0, 2), V.reshape(T, H, H).transpose(1, 0, 2)
    if k == "mha":
        n, d = dims.n_heads, dims.head_dim
        V = cache.slot(layer, "v")
        return K.reshape(T, n, d).transpose(1, 0, 2), V.reshape(T, n, d).transpose(1, 0, 2)
    if k == "mqa":
        return K[None], cache.slot(layer, "v")[None]
    if k == "gqa":
        g, d = dims.groups_g, dims.head_dim
        grp = A.head_groups(dims)
        Kg = K.reshape(T, g, d).transpose(1, 0, 2)
        Vg = cache.slot(layer, "v").reshape(T, g, d).transpose(1, 0, 2)
        return Kg[grp], Vg[grp]
    if k == "mla":
        # per-head keys/values recomputed from cached latents every step
        Kl, Vl = cache.slot(layer, "k_latent"), cache.slot(layer, "v_latent")
        return np.einsum("tc,ncd->ntd", Kl, w["K_c"]), np.einsum("tc,ncd->ntd", Vl, w["V_c"])
    if k == "mfa":
        return K[None], cache.slot(layer, "v")[None]
    V = A.kr_value_from_key(spec.kr_variant, K, w.get("N"), w.get("alpha"))
    if spec.pos_embed == "rope":
        K = rope_np(K, np.arange(T), spec.rope_base)
    return K[None], V[None]


def decode_step(
    spec: A.ArchSpec,
    w: Mapping[str, object],
    dims: A.ModelDims,
    cache: KvCacheState,
    x_t,
    position: int,
    layer: int = 0,
) -> tuple[Tensor, KvCacheState]:
    """Attend token ``x_t`` (1 x H) at ``position`` over the cache, appending its entries first.

    The cache is updated in place and also returned.
    """
    if position != cache.token_count(layer):
        raise OrderingError(f"position {position} but layer {layer} holds {cache.token_count(layer)} tokens")
    A._check_weights(spec, dims, w)
    W = {name: A._arr(v) for name, v in w.items()}
    x = A._arr(x_t).reshape(-1)
    cache.append(layer, _project(spec, W, dims, x, position))

    q = _queries(spec, W, dims, x, position)
    K, V = _keys_values(spec, W, dims, cache, layer)
    scores = np.einsum("nd,ntd->nt", q, K)
    if spec.kind == "mla" and dims.rope_dim_dr:
        qr = _rot(np.einsum("c,ncr->nr", x @ W["S_q"], W["Q_rc"]), position, spec)
        scores = scores + qr @ cache.slot(layer, "k_rope").T
    scores = scores * A.score_scale(spec, dims)
    if spec.pos_embed == "alibi":
        dist = position - np.arange(position + 1)
        scores = scores - A.alibi_slopes(A.num_heads(spec, dims))[:, None] * dist[None, :]
    p = softmax_np(scores)
    heads = np.einsum("nt,ntd->nd", p, V)
    if spec.kind == "fpba":
        out = heads.sum(axis=0)
    else:
        out = np.einsum("nd,nhd->h", heads, W["O_c"])
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite attention output at position {position}")
    return Tensor(out[None]), cache
