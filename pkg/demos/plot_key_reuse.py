"""
Reusing keys as values
======================

MFA-KR caches only keys and derives values as ``k + alpha * (k N)``.
With the gate at zero the model is exactly MFA with a shared key/value
projection, which is how training starts.

"""

import numpy as np

from gmha import attention as A

rng = np.random.default_rng(2)
dims = A.ModelDims(H=16, n_heads=3, head_dim=8, latent_C=8)
kr = A.ArchSpec("mfa_kr", kr_variant="gated", pos_embed="rope")
w = A.init_attn_weights(kr, dims, rng)
X = rng.normal(size=(6, dims.H))

# zero gate: identical to MFA with S_v = S_k
mfa_w = {k: w[k] for k in ("S_q", "S_k", "Q_c", "O_c")}
mfa_w["S_v"] = w["S_k"]
same = A.attn_forward(A.ArchSpec("mfa", pos_embed="rope"), mfa_w, dims, X).data
print("alpha=0 vs MFA:", np.abs(A.attn_forward(kr, w, dims, X).data - same).max())

# the variant ladder on a single key row
k = rng.normal(size=(1, 8))
N = rng.normal(size=(8, 8))
for variant in A.KR_VARIANTS:
    alpha = np.full(8, 0.5) if variant == "gated" else None
    v = A.kr_value_from_key(variant, k, None if variant == "vanilla" else N, alpha)
    print(f"{variant:10s} |v - k| = {np.linalg.norm(v - k):.3f}")

# the effective value projection in weight space
S_v = A.effective_value_projection("gated", w["S_k"], w["N"], np.full(8, 0.5))
print("S_v shape", S_v.shape)
