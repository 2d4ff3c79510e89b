"""Generalized multi-head attention: FPBA, MHA, MQA, GQA, MLA, MFA and MFA-KR.

Two evaluation routes exist for every architecture:

* :func:`attn_forward` is the inference route.  It builds explicit per-token
  keys and values (``x S_k``, ``x K_c`` ...) with autodiff tensors, which is
  what the model trains through and what the KV cache stores.
* :func:`attn_forward_factored` folds each head into an ``H x H`` score
  matrix and an ``H x H`` value-output matrix and evaluates the
  bilinear per-channel sum in plain numpy.  It is the correctness oracle.

Row-vector convention throughout: a token is ``x`` of shape ``(H,)`` and a
projection is ``x @ W``.  Per-head weights are stacked on a leading head axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, DimensionError, UnsupportedCombinationError
from .tensor import Tensor, as_tensor, matmul, rope_apply, softmax_np, softmax_rows, swapaxes, take, tsum

KINDS = ("fpba", "mha", "mqa", "gqa", "mla", "mfa", "mfa_kr")
KR_VARIANTS = ("vanilla", "extra_proj", "residual", "gated")
POS_EMBEDS = ("none", "rope", "alibi")


@dataclass(frozen=True)
class ModelDims:
    """Architecture hyperparameters.

    ``n_heads`` is the head count (n for MHA-style, m for MLA/MFA) and
    ``head_dim`` the per-head width (d; equals ``latent_C`` for MFA).
    ``rope_dim_dr`` is MLA's decoupled rotary width and may be 0.
    """

    H: int
    L: int = 1
    n_heads: int = 1
    head_dim: int = 1
    latent_C: int = 1
    groups_g: int = 1
    rope_dim_dr: int = 0
    vocab_V: int = 257
    ffn_F: int = 1

    def replace(self, **kw) -> "ModelDims":
        return ModelDims(**{**self.__dict__, **kw})


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    kr_variant: str | None = None
    factored_q: bool = True
    pos_embed: str = "none"
    rope_base: float = 500000.0
    score_scale: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown architecture {self.kind!r}; expected one of {KINDS}")
        if self.kind == "mfa_kr":
            if self.kr_variant not in KR_VARIANTS:
                raise ConfigurationError(f"mfa_kr needs kr_variant in {KR_VARIANTS}, got {self.kr_variant!r}")
        elif self.kr_variant is not None:
            raise ConfigurationError("kr_variant is only meaningful for mfa_kr")
        if not self.factored_q and self.kind != "mfa":
            raise ConfigurationError("factored_q=False is only defined for mfa")
        if self.pos_embed not in POS_EMBEDS:
            raise ConfigurationError(f"pos_embed must be one of {POS_EMBEDS}, got {self.pos_embed!r}")
        if self.pos_embed == "rope" and not self.rope_base > 1:
            raise ConfigurationError("rope_base must exceed 1")

    def replace(self, **kw) -> "ArchSpec":
        return ArchSpec(**{**self.__dict__, **kw})


def validate_dims(spec: ArchSpec, dims: ModelDims) -> None:
    """Raise ConfigurationError if ``dims`` cannot host ``spec``."""
    for name in ("H", "L", "n_heads", "head_dim", "latent_C", "groups_g", "vocab_V", "ffn_F"):
        if getattr(dims, name) < 1:
            raise ConfigurationError(f"{name} must be a positive integer")
    if dims.rope_dim_dr < 0:
        raise ConfigurationError("rope_dim_dr must be >= 0")
    k = spec.kind
    if k in ("mha", "mqa", "gqa") and dims.n_heads * dims.head_dim != dims.H:
        raise ConfigurationError(
            f"{k}: n_heads*head_dim = {dims.n_heads * dims.head_dim} must equal H = {dims.H}"
        )
    if k == "gqa" and dims.n_heads % dims.groups_g:
        raise ConfigurationError(f"groups_g={dims.groups_g} must divide n_heads={dims.n_heads}")
    if k in ("mfa", "mfa_kr") and dims.head_dim != dims.latent_C:
        raise ConfigurationError(f"{k}: head_dim ({dims.head_dim}) must equal latent_C ({dims.latent_C})")
    if spec.pos_embed == "rope":
        if k == "fpba":
            raise UnsupportedCombinationError("fpba has no per-head query/key to rotate; use none or alibi")
        if k == "mla":
            if dims.rope_dim_dr == 0:
                raise ConfigurationError("mla with rope needs rope_dim_dr > 0 (decoupled rotary path)")
            if dims.rope_dim_dr % 2:
                raise ConfigurationError("rope_dim_dr must be even")
        elif dot_dim(spec, dims) % 2:
            raise ConfigurationError(f"{k} with rope needs an even query/key width")


def num_heads(spec: ArchSpec, dims: ModelDims) -> int:
    return dims.H if spec.kind == "fpba" else dims.n_heads


def dot_dim(spec: ArchSpec, dims: ModelDims) -> int:
    """Width of the per-head query-key dot product."""
    k = spec.kind
    if k == "fpba":
        return dims.H
    if k in ("mha", "mqa", "gqa"):
        return dims.head_dim
    if k == "mla":
        return dims.head_dim + dims.rope_dim_dr
    return dims.latent_C


def score_scale(spec: ArchSpec, dims: ModelDims) -> float:
    if spec.score_scale is not None:
        return float(spec.score_scale)
    return 1.0 / math.sqrt(dot_dim(spec, dims))


def head_groups(dims: ModelDims) -> np.ndarray:
    """GQA: contiguous blocks of n_heads/g heads share a key/value group."""
    return np.arange(dims.n_heads) // (dims.n_heads // dims.groups_g)


# -- weight shapes ----------------------------------------------------------------

OUTPUT_PROJECTIONS = ("O_c", "U_c")


def expected_shapes(spec: ArchSpec, dims: ModelDims) -> dict[str, tuple[int, ...]]:
    """Every attention weight name and its shape.  No biases anywhere."""
    H, n, d, C, g, dr = dims.H, dims.n_heads, dims.head_dim, dims.latent_C, dims.groups_g, dims.rope_dim_dr
    k = spec.kind
    if k == "fpba":
        return {"W_c": (H, H, H), "U_c": (H, H, H)}
    if k == "mha":
        return {"Q_c": (n, H, d), "K_c": (n, H, d), "V_c": (n, H, d), "O_c": (n, H, d)}
    if k == "mqa":
        return {"Q_c": (n, H, d), "K": (H, d), "V": (H, d), "O_c": (n, H, d)}
    if k == "gqa":
        return {"Q_c": (n, H, d), "K_g": (g, H, d), "V_g": (g, H, d), "O_c": (n, H, d)}
    if k == "mla":
        shapes = {
            "S_q": (H, C), "S_k": (H, C), "S_v": (H, C),
            "Q_c": (n, C, d), "K_c": (n, C, d), "V_c": (n, C, d), "O_c": (n, H, d),
        }
        if dr:
            shapes.update({"W_kr": (H, dr), "Q_rc": (n, C, dr)})
        return shapes
    if k == "mfa":
        if spec.factored_q:
            q = {"S_q": (H, C), "Q_c": (n, C, C)}
        else:
            q = {"W_qc": (n, H, C)}
        return {**q, "S_k": (H, C), "S_v": (H, C), "O_c": (n, H, C)}
    shapes = {"S_q": (H, C), "S_k": (H, C), "Q_c": (n, C, C), "O_c": (n, H, C)}
    if spec.kr_variant != "vanilla":
        shapes["N"] = (C, C)
    if spec.kr_variant == "gated":
        shapes["alpha"] = (C,)
    return shapes


def audit_shapes(spec: ArchSpec, dims: ModelDims, w: Mapping[str, object]) -> list[str]:
    """All weight-set violations for ``spec``; an empty list means the set is valid."""
    violations = []
    expected = expected_shapes(spec, dims)
    for name, shape in expected.items():
        if name not in w:
            violations.append(f"{name}: missing (expected {'x'.join(map(str, shape))})")
            continue
        got = tuple(np.shape(_arr(w[name])))
        if got != shape:
            violations.append(
                f"{name}: expected {'x'.join(map(str, shape))}, got {'x'.join(map(str, got))}"
            )
    for name in w:
        if name not in expected:
            violations.append(f"{name}: unexpected weight for {spec.kind}")
    return violations


def _check_weights(spec, dims, w):
    validate_dims(spec, dims)
    bad = audit_shapes(spec, dims, w)
    if bad:
        raise DimensionError("attention weights failed shape audit: " + "; ".join(bad))


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def init_attn_weights(spec: ArchSpec, dims: ModelDims, rng: np.random.Generator, std: float | None = None):
    """Gaussian weights for tests and oracles (not the training initializer).

    ``std`` defaults to 1/sqrt(fan_in) so activations stay O(1).  The gate
    ``alpha`` is left at zero, matching the training initializer.
    """
    out = {}
    for name, shape in expected_shapes(spec, dims).items():
        if name == "alpha":
            out[name] = np.zeros(shape)
            continue
        s = std if std is not None else 1.0 / math.sqrt(shape[-2])
        out[name] = rng.normal(0.0, s, size=shape)
    return out


# -- positional pieces ---------------------------------------------------------

def alibi_slopes(n_heads: int) -> np.ndarray:
    if n_heads < 1:
        raise ValueError("n_heads must be >= 1")
    h = np.arange(1, n_heads + 1, dtype=np.float64)
    return 2.0 ** (-8.0 * h / n_heads)


def alibi_bias(n_heads: int, T: int) -> Tensor:
    """(n_heads, T, T) additive score bias: -slope*(i-j) on/below the diagonal, -inf above."""
    if T < 1:
        raise ValueError("T must be >= 1")
    dist = (np.arange(T)[:, None] - np.arange(T)[None, :]).astype(np.float64)
    bias = -alibi_slopes(n_heads)[:, None, None] * dist[None]
    bias[:, dist < 0] = -np.inf
    return Tensor(bias)


def causal_mask(T: int) -> np.ndarray:
    m = np.zeros((T, T))
    m[np.triu_indices(T, 1)] = -np.inf
    return m


def score_bias(spec: ArchSpec, dims: ModelDims, T: int) -> np.ndarray:
    """(1 or heads, T, T) additive bias including the causal mask."""
    if spec.pos_embed == "alibi":
        return alibi_bias(num_heads(spec, dims), T).data
    return causal_mask(T)[None]


def kr_value_from_key(variant: str, k, N=None, alpha=None):
    """Derive MFA-KR values from (unrotated) cached keys, row by row.

    vanilla: v = k;  extra_proj: v = k N;  residual: v = k + k N;
    gated: v = k + alpha * (k N).  Works on Tensors or numpy arrays.
    """
    if variant not in KR_VARIANTS:
        raise ConfigurationError(f"unknown kr_variant {variant!r}")
    if alpha is not None and variant != "gated":
        raise ConfigurationError(f"alpha is only used by the gated variant, not {variant!r}")
    if variant == "vanilla":
        return k
    if N is None:
        raise ConfigurationError(f"{variant} needs N")
    if variant == "gated" and alpha is None:
        raise ConfigurationError("gated variant needs alpha")
    numeric = not any(isinstance(t, Tensor) for t in (k, N, alpha))
    kn = (k @ N) if numeric else matmul(as_tensor(k), as_tensor(N))
    if variant == "extra_proj":
        return kn
    if variant == "residual":
        return k + kn
    return k + (alpha * kn if numeric else kn * as_tensor(alpha))


# -- inference route (autodiff) ---------------------------------------------------

def attn_forward(spec: ArchSpec, w: Mapping[str, object], dims: ModelDims, X) -> Tensor:
    """Causal attention output for X of shape (T, H) or (B, T, H)."""
    _check_weights(spec, dims, w)
    X = as_tensor(X)
    squeeze = X.ndim == 2
    if squeeze:
        X = X.reshape(1, *X.shape)
    if X.ndim != 3 or X.shape[-1] != dims.H:
        raise DimensionError(f"attention input must be (T, {dims.H}) or (B, T, {dims.H}), got {X.shape}")
    B, T, H = X.shape
    W = {k: as_tensor(v) for k, v in w.items()}
    pos = np.arange(T)
    rope = spec.pos_embed == "rope"

    def rot(t):
        return rope_apply(t, pos, spec.rope_base) if rope else t

    X4 = X.reshape(B, 1, T, H)
    extra = None
    k = spec.kind
    if k == "fpba":
        q = X4
        keys = matmul(X4, swapaxes(W["W_c"], -1, -2))
        vals_out = matmul(X4, W["U_c"])
    else:
        if k == "mha":
            q, keys, vals = matmul(X4, W["Q_c"]), matmul(X4, W["K_c"]), matmul(X4, W["V_c"])
        elif k == "mqa":
            q = matmul(X4, W["Q_c"])
            keys, vals = matmul(X4, W["K"]), matmul(X4, W["V"])
        elif k == "gqa":
            grp = head_groups(dims)
            q = matmul(X4, W["Q_c"])
            keys = take(matmul(X4, W["K_g"]), grp, axis=1)
            vals = take(matmul(X4, W["V_g"]), grp, axis=1)
        elif k == "mla":
            cq = matmul(X4, W["S_q"])
            q = matmul(cq, W["Q_c"])
            keys = matmul(matmul(X4, W["S_k"]), W["K_c"])
            vals = matmul(matmul(X4, W["S_v"]), W["V_c"])
            if dims.rope_dim_dr:
                extra = (rot(matmul(cq, W["Q_rc"])), rot(matmul(X4, W["W_kr"])))
        else:
            if spec.factored_q:
                q = matmul(matmul(X4, W["S_q"]), W["Q_c"])
            else:
                q = matmul(X4, W["W_qc"])
            keys = matmul(X4, W["S_k"])
            if k == "mfa":
                vals = matmul(X4, W["S_v"])
            else:
                vals = kr_value_from_key(spec.kr_variant, keys, W.get("N"), W.get("alpha"))
        if k != "mla":  # MLA rotates only its decoupled part
            q, keys = rot(q), rot(keys)
        vals_out = None

    scores = matmul(q, swapaxes(keys, -1, -2))
    if extra is not None:
        scores = scores + matmul(extra[0], swapaxes(extra[1], -1, -2))
    scores = scores * score_scale(spec, dims) + Tensor(score_bias(spec, dims, T))
    probs = softmax_rows(scores)
    if vals_out is not None:
        per_head = matmul(probs, vals_out)
    else:
        per_head = matmul(matmul(probs, vals), swapaxes(W["O_c"], -1, -2))
    out = tsum(per_head, axis=1)
    return out.reshape(T, H) if squeeze else out


# -- factorization route (numpy oracle) --------------------------------------------

def folded_matrices(spec: ArchSpec, w: Mapping[str, object], dims: ModelDims) -> tuple[np.ndarray, np.ndarray]:
    """Per-head folded (QK, VO) matrices, each of shape (heads, H, H).

    Score for head c is ``x_i @ QK[c] @ x_j``; its output contribution is
    ``x_j @ VO[c]``.
    """
    A = {k: _arr(v) for k, v in w.items()}
    k = spec.kind
    T = lambda m: np.swapaxes(m, -1, -2)  # noqa: E731
    if k == "fpba":
        return A["W_c"], A["U_c"]
    if k == "mha":
        return A["Q_c"] @ T(A["K_c"]), A["V_c"] @ T(A["O_c"])
    if k == "mqa":
        return A["Q_c"] @ A["K"].T, A["V"] @ T(A["O_c"])
    if k == "gqa":
        grp = head_groups(dims)
        return A["Q_c"] @ T(A["K_g"][grp]), A["V_g"][grp] @ T(A["O_c"])
    if k == "mla":
        qk = A["S_q"] @ A["Q_c"] @ T(A["K_c"]) @ A["S_k"].T
        if dims.rope_dim_dr:
            qk = qk + A["S_q"] @ A["Q_rc"] @ A["W_kr"].T
        return qk, A["S_v"] @ A["V_c"] @ T(A["O_c"])
    if spec.factored_q:
        qk = A["S_q"] @ A["Q_c"] @ A["S_k"].T
    else:
        qk = A["W_qc"] @ A["S_k"].T
    if k == "mfa":
        s_v = A["S_v"]
    else:
        s_v = effective_value_projection(spec.kr_variant, A["S_k"], A.get("N"), A.get("alpha"))
    return qk, s_v @ T(A["O_c"])


def effective_value_projection(variant: str, S_k: np.ndarray, N=None, alpha=None) -> np.ndarray:
    """Weight-space form of the key-reuse value map: S_v = S_k M."""
    C = S_k.shape[1]
    if variant == "vanilla":
        M = np.eye(C)
    elif variant == "extra_proj":
        M = N
    elif variant == "residual":
        M = np.eye(C) + N
    else:
        M = np.eye(C) + N * alpha[None, :]
    return S_k @ M


def attn_forward_factored(spec: ArchSpec, w: Mapping[str, object], dims: ModelDims, X) -> Tensor:
    """Oracle: evaluate the folded per-head bilinear sum directly."""
    if spec.pos_embed == "rope":
        raise UnsupportedCombinationError(
            "the folded score matrix is position independent and cannot absorb rotary embeddings"
        )
    _check_weights(spec, dims, w)
    x = _arr(X)
    qk, vo = folded_matrices(spec, w, dims)
    bias = score_bias(spec, dims, x.shape[0])
    if bias.shape[0] == 1:
        bias = np.broadcast_to(bias, (qk.shape[0],) + bias.shape[1:])
    return Tensor(_bilinear_sum(x, qk, vo, score_scale(spec, dims), bias))


def _bilinear_sum(x, qk, vo, scale, bias) -> np.ndarray:
    """sum_c sum_{j<=i} softmax_j(scale * x_i qk[c] x_j + bias[c,i,j]) x_j vo[c], row by row."""
    T, H = x.shape
    out = np.zeros((T, vo.shape[-1]))
    for c in range(qk.shape[0]):
        for i in range(T):
            s = np.array([x[i] @ qk[c] @ x[j] for j in range(i + 1)]) * scale + bias[c, i, : i + 1]
            p = softmax_np(s)
            for j in range(i + 1):
                out[i] += p[j] * (x[j] @ vo[c])
    return out


def fpba_forward(X, W, U, scale: float | None = None, channel_group=None, bias=None) -> Tensor:
    """Fully parameterized bilinear attention, evaluated by brute force.

    ``W`` and ``U`` hold one H x H matrix per channel, or one per group when
    ``channel_group`` maps each of the H channels to a group index.
    ``scale`` defaults to 1/sqrt(H).  ``bias`` is an optional (H, T, T)
    per-channel additive score bias; causality is always enforced.
    """
    x = _arr(X)
    T, H = x.shape
    W = [_arr(m) for m in W]
    U = [_arr(m) for m in U]
    for m in (*W, *U):
        if m.shape != (H, H):
            raise DimensionError(f"fpba channel matrices must be {H}x{H}, got {m.shape}")
    if channel_group is None:
        if len(W) != H or len(U) != H:
            raise DimensionError(f"fpba needs {H} channel matrices, got {len(W)} / {len(U)}")
        groups = list(range(H))
    else:
        groups = list(channel_group)
        if len(groups) != H:
            raise DimensionError(f"channel_group must map all {H} channels")
        if max(groups) >= len(W) or len(W) != len(U):
            raise DimensionError("channel_group refers to a missing group matrix")
    if scale is None:
        scale = 1.0 / math.sqrt(H)
    qk = np.stack([W[grp] for grp in groups])
    vo = np.stack([U[grp] for grp in groups])
    full_bias = np.broadcast_to(causal_mask(T) + (0.0 if bias is None else _arr(bias)), (H, T, T))
    return Tensor(_bilinear_sum(x, qk, vo, scale, full_bias))


def fpba_grouping(spec: ArchSpec, w: Mapping[str, object], dims: ModelDims):
    """Grouped-FPBA construction reproducing an MHA/MQA/GQA layer.

    Head h owns d consecutive channels; each of them carries W = Q_h K_h^T and
    U = V_h O_h^T / d, so the d identical channel terms add back to one head.
    Returns (W list, U list, channel_group, scale).
    """
    if spec.kind not in ("mha", "mqa", "gqa"):
        raise ConfigurationError(f"grouped FPBA construction covers mha/mqa/gqa, not {spec.kind}")
    qk, vo = folded_matrices(spec, w, dims)
    d = dims.head_dim
    groups = [c // d for c in range(dims.H)]
    return list(qk), list(vo / d), groups, score_scale(spec, dims)
