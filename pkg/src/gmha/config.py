"""Run configuration documents and the named architecture presets.

A config is a JSON object with up to four top-level keys::

    {"preset": "1b-mfa",                    # optional base
     "arch":  {"kind": "mfa", "pos_embed": "rope", ...},
     "dims":  {"H": 64, "L": 2, ...},
     "train": {"peak_lr": 3e-3, "total_steps": 300, ...}}

Unknown keys anywhere are rejected.  Sections override the preset field by
field.

Preset notes: the 1B presets are H=2048 with 20 layers.
``1b-mla`` uses n=16, d=128, latent 512 and a 64-wide decoupled rotary key
as in DeepSeek-V2-Lite; the per-head layout is this package's MLA layout
(shared S_q/S_k/S_v).  The 7B presets carry attention shapes only; their
``ffn_F`` is the shared-expert width and stands in for the MoE FFN, which is
not modelled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

from .attention import ArchSpec, ModelDims
from .errors import ConfigurationError
from .train import TrainConfig

PRESET_VOCAB = 65536
ROPE_BASE = 500000.0


def _rope(kind, **kw):
    return ArchSpec(kind, pos_embed="rope", rope_base=ROPE_BASE, **kw)


def _1b(**kw):
    return ModelDims(H=2048, L=20, vocab_V=PRESET_VOCAB, **kw)


def _7b(**kw):
    return ModelDims(H=2048, L=24, vocab_V=PRESET_VOCAB, **kw)


PRESETS: Mapping[str, tuple[ArchSpec, ModelDims]] = MappingProxyType({
    "7b-mha": (_rope("mha"), _7b(n_heads=16, head_dim=128, ffn_F=2624)),
    "7b-mfa": (_rope("mfa"), _7b(n_heads=18, head_dim=256, latent_C=256, ffn_F=3008)),
    "7b-mfa-kr": (_rope("mfa_kr", kr_variant="gated"), _7b(n_heads=18, head_dim=256, latent_C=256, ffn_F=3016)),
    "1b-mha": (_rope("mha"), _1b(n_heads=16, head_dim=128, ffn_F=6008)),
    "1b-gqa8": (_rope("gqa"), _1b(n_heads=16, head_dim=128, groups_g=8, ffn_F=6680)),
    "1b-gqa4": (_rope("gqa"), _1b(n_heads=16, head_dim=128, groups_g=4, ffn_F=7032)),
    "1b-gqa2": (_rope("gqa"), _1b(n_heads=16, head_dim=128, groups_g=2, ffn_F=7200)),
    "1b-mqa": (_rope("mqa"), _1b(n_heads=16, head_dim=128, ffn_F=7304)),
    "1b-mla": (_rope("mla"), _1b(n_heads=16, head_dim=128, latent_C=512, rope_dim_dr=64, ffn_F=6504)),
    "1b-mfa": (_rope("mfa"), _1b(n_heads=14, head_dim=256, latent_C=256, ffn_F=7168)),
    "1b-mfa-kr": (_rope("mfa_kr", kr_variant="gated"), _1b(n_heads=14, head_dim=256, latent_C=256, ffn_F=7232)),
})

_PRESET_TRAIN = {"7b": {"peak_lr": 8.4e-4, "total_steps": 140000}, "1b": {"peak_lr": 9.63e-4, "total_steps": 50000}}

PRESET_GROUPS = MappingProxyType({
    "7b": ("7b-mha", "7b-mfa", "7b-mfa-kr"),
    "1b": ("1b-mha", "1b-gqa8", "1b-gqa4", "1b-gqa2", "1b-mqa", "1b-mla", "1b-mfa", "1b-mfa-kr"),
})


@dataclass(frozen=True)
class RunConfig:
    arch: ArchSpec
    dims: ModelDims
    train: TrainConfig


def expand_presets(names) -> list[str]:
    out = []
    for name in names:
        if name in PRESET_GROUPS:
            out.extend(PRESET_GROUPS[name])
        elif name in PRESETS:
            out.append(name)
        else:
            raise ConfigurationError(f"unknown preset {name!r}; known: {sorted(PRESETS)} or groups {sorted(PRESET_GROUPS)}")
    return out


def _fields(cls, exclude=()):
    return {f.name for f in fields(cls)} - set(exclude)


def _strict(section: str, given: Mapping, allowed: set) -> None:
    if not isinstance(given, Mapping):
        raise ConfigurationError(f"'{section}' must be an object")
    unknown = set(given) - allowed
    if unknown:
        raise ConfigurationError(f"unknown key(s) in '{section}': {sorted(unknown)}")


def parse_config(doc: Mapping) -> RunConfig:
    _strict("<root>", doc, {"preset", "arch", "dims", "train"})
    arch_kw, dims_kw, train_kw = {}, {}, {}
    if "preset" in doc:
        name = doc["preset"]
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset {name!r}")
        spec, dims = PRESETS[name]
        arch_kw, dims_kw = dict(spec.__dict__), dict(dims.__dict__)
        train_kw = dict(_PRESET_TRAIN[name.split("-")[0]])
    _strict("arch", doc.get("arch", {}), _fields(ArchSpec))
    _strict("dims", doc.get("dims", {}), _fields(ModelDims))
    _strict("train", doc.get("train", {}), _fields(TrainConfig, ("dims", "arch")))
    arch_kw.update(doc.get("arch", {}))
    dims_kw.update(doc.get("dims", {}))
    train_kw.update(doc.get("train", {}))
    if "kind" not in arch_kw:
        raise ConfigurationError("config needs arch.kind or a preset")
    if "H" not in dims_kw:
        raise ConfigurationError("config needs dims.H or a preset")
    try:
        arch = ArchSpec(**arch_kw)
        dims = ModelDims(**dims_kw)
        train = TrainConfig(dims=dims, arch=arch, **train_kw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    return RunConfig(arch, dims, train)


def load_config(path: str | Path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(doc)


def shrink_dims(dims: ModelDims, factor: int, vocab_V: int = 257) -> ModelDims:
    """Divide every width (H, head_dim, C, d_r) by ``factor``, rounding F; depth and head counts stay."""
    out = {}
    for name in ("H", "head_dim", "latent_C", "rope_dim_dr", "ffn_F"):
        v = getattr(dims, name)
        if v <= 1:  # unused by this architecture
            out[name] = v
            continue
        if name == "ffn_F":  # no structural constraint on the FFN width
            out[name] = max(1, round(v / factor))
            continue
        if v % factor:
            raise ConfigurationError(f"{name}={v} is not divisible by shrink factor {factor}")
        out[name] = v // factor
    return dims.replace(vocab_V=vocab_V, **out)
