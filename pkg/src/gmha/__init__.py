"""Generalized multi-head attention: MHA, MQA, GQA, MLA, MFA, MFA-KR and the FPBA bound."""

from .attention import (
    ArchSpec,
    ModelDims,
    alibi_bias,
    attn_forward,
    attn_forward_factored,
    audit_shapes,
    fpba_forward,
    init_attn_weights,
    kr_value_from_key,
)
from .capacity import CapacityReport, capacity_report, count_params, formula_params
from .kvcache import KvCacheState, cache_bytes_per_token, decode_step
from .model import ToyLM, init_weights
from .tensor import Tensor, cross_entropy, finite_diff_gradcheck, matmul, rmsnorm, rope_apply, softmax_rows, swiglu_ffn
from .train import TrainConfig, adamw_step, lr_at, train_loop

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "ModelDims", "alibi_bias", "attn_forward", "attn_forward_factored", "audit_shapes",
    "fpba_forward", "init_attn_weights", "kr_value_from_key",
    "CapacityReport", "capacity_report", "count_params", "formula_params",
    "KvCacheState", "cache_bytes_per_token", "decode_step",
    "ToyLM", "init_weights",
    "Tensor", "cross_entropy", "finite_diff_gradcheck", "matmul", "rmsnorm", "rope_apply", "softmax_rows", "swiglu_ffn",
    "TrainConfig", "adamw_step", "lr_at", "train_loop",
]
