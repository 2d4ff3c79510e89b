"""Closed-form capacity accounting (KV cache, parameters, heads, ranks) and its measured twin."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction
from math import prod

from . import attention as A
from .errors import ConfigurationError
from .kvcache import cache_bytes_per_token


@dataclass(frozen=True)
class CapacityReport:
    arch: str
    kv_bytes_per_token: int
    param_count_formula: int
    heads: int
    frh: int
    slsd: int
    ter: int
    param_count_measured: int | None = None

    def __post_init__(self):
        assert self.ter == self.heads * self.frh
        assert self.frh <= self.slsd, "factorization rank per head exceeds the shared latent dimension"
        if self.param_count_measured is not None:
            assert self.param_count_measured == self.param_count_formula

    def as_dict(self) -> dict:
        return asdict(self)


def arch_label(spec: A.ArchSpec) -> str:
    if spec.kind == "mfa_kr":
        return "mfa_kr" if spec.kr_variant == "gated" else f"mfa_kr[{spec.kr_variant}]"
    if spec.kind == "mfa" and not spec.factored_q:
        return "mfa[unfactored_q]"
    return spec.kind


def count_params(spec: A.ArchSpec, dims: A.ModelDims) -> int:
    """Attention-module parameters, by enumerating the weight shapes."""
    return sum(prod(s) for s in A.expected_shapes(spec, dims).values())


def formula_params(spec: A.ArchSpec, dims: A.ModelDims) -> int:
    """Attention-module parameter count from closed-form expressions."""
    H, n, d, C, g, dr = dims.H, dims.n_heads, dims.head_dim, dims.latent_C, dims.groups_g, dims.rope_dim_dr
    m = n
    k = spec.kind
    if k == "fpba":
        value = Fraction(2 * H**3)
    elif k == "mha":
        value = Fraction(4 * H**2)
    elif k == "mqa":
        value = (2 + Fraction(2, n)) * H**2
    elif k == "gqa":
        value = (2 + Fraction(2 * g, n)) * H**2
    elif k == "mla":
        value = Fraction(H * (3 * C + dr + m * d) + m * C * (3 * d + dr))
    else:
        mfa = H * (3 * C + m * C) + m * C**2
        if k == "mfa":
            # unfactored query: S_q and the per-head C x C mixers give way to per-head H x C maps
            value = Fraction(mfa if spec.factored_q else mfa - H * C - m * C**2 + m * H * C)
        else:
            extra = {"vanilla": 0, "extra_proj": C**2, "residual": C**2, "gated": C**2 + C}[spec.kr_variant]
            value = Fraction(mfa - H * C + extra)
    if value.denominator != 1:
        raise ConfigurationError(f"{k}: parameter formula is not integral for {dims}")
    return int(value)


def _rank_row(spec: A.ArchSpec, dims: A.ModelDims) -> tuple[int, int, int]:
    """(heads, factorization rank per head, shared latent subspace dim)."""
    H, n, d, C, g = dims.H, dims.n_heads, dims.head_dim, dims.latent_C, dims.groups_g
    return {
        "fpba": (H, H, H),
        "mha": (n, d, H),
        "mqa": (n, d, d),
        "gqa": (n, d, g * d),
        "mla": (n, d, C),
        "mfa": (n, C, C),
        "mfa_kr": (n, C, C),
    }[spec.kind]


def capacity_report(spec: A.ArchSpec, dims: A.ModelDims, elem_bytes: int = 2, measure: bool = True) -> CapacityReport:
    A.validate_dims(spec, dims)
    heads, frh, slsd = _rank_row(spec, dims)
    return CapacityReport(
        arch=arch_label(spec),
        kv_bytes_per_token=cache_bytes_per_token(spec, dims, elem_bytes),
        param_count_formula=formula_params(spec, dims),
        param_count_measured=count_params(spec, dims) if measure else None,
        heads=heads,
        frh=frh,
        slsd=slsd,
        ter=heads * frh,
    )
