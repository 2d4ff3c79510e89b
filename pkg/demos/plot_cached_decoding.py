"""
Token-at-a-time decoding
========================

Stream a sequence through ``decode_step`` and compare each row against
the full-sequence forward pass.  The cache holds exactly the predicted
number of bytes.

"""

import numpy as np

from gmha import attention as A
from gmha.kvcache import KvCacheState, cache_bytes_per_token, decode_step

rng = np.random.default_rng(1)
cases = {
    "mha": (A.ArchSpec("mha", pos_embed="rope"), A.ModelDims(H=16, n_heads=4, head_dim=4)),
    "gqa": (A.ArchSpec("gqa", pos_embed="alibi"), A.ModelDims(H=16, n_heads=4, head_dim=4, groups_g=2)),
    "mla": (A.ArchSpec("mla", pos_embed="rope"), A.ModelDims(H=16, n_heads=4, head_dim=4, latent_C=8, rope_dim_dr=2)),
    "mfa": (A.ArchSpec("mfa", pos_embed="rope"), A.ModelDims(H=16, n_heads=4, head_dim=8, latent_C=8)),
    "mfa_kr": (A.ArchSpec("mfa_kr", kr_variant="gated", pos_embed="rope"),
               A.ModelDims(H=16, n_heads=4, head_dim=8, latent_C=8)),
}

T = 12
for name, (spec, dims) in cases.items():
    w = A.init_attn_weights(spec, dims, rng)
    X = rng.normal(size=(T, dims.H))
    full = A.attn_forward(spec, w, dims, X).data
    cache = KvCacheState.empty(spec, dims)
    dev = 0.0
    for t in range(T):
        o, cache = decode_step(spec, w, dims, cache, X[t:t + 1], t)
        dev = max(dev, np.abs(o.data[0] - full[t]).max())
    print(f"{name:7s} slots {list(cache.slot_dims)}  max dev {dev:.1e}  "
          f"bytes {cache.measured_bytes()} (predicted {cache_bytes_per_token(spec, dims) * T})")
