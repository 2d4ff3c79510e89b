"""
Two ways to evaluate the same attention
=======================================

The inference route projects keys and values per token.  The factored
route folds each head into a pair of H x H matrices and evaluates a
bilinear sum.  Both give the same output, and the folded matrices have
low rank.

"""

import numpy as np

from gmha import attention as A

rng = np.random.default_rng(0)
spec = A.ArchSpec("mfa")
dims = A.ModelDims(H=16, n_heads=4, head_dim=6, latent_C=6)
w = A.init_attn_weights(spec, dims, rng)
X = rng.normal(size=(8, dims.H))

# the two routes agree to rounding
a = A.attn_forward(spec, w, dims, X).data
b = A.attn_forward_factored(spec, w, dims, X).data
print("max |inference - factored| =", np.abs(a - b).max())

# every folded QK matrix has rank C
qk, vo = A.folded_matrices(spec, w, dims)
for h, M in enumerate(qk):
    s = np.linalg.svd(M, compute_uv=False)
    print(f"head {h}: rank {int((s > 1e-10 * s[0]).sum())} of {dims.H}")

# MHA is a grouped version of the fully parameterized bilinear form
mha = A.ArchSpec("mha")
mdims = A.ModelDims(H=16, n_heads=4, head_dim=4)
mw = A.init_attn_weights(mha, mdims, rng)
Ws, Us, groups, scale = A.fpba_grouping(mha, mw, mdims)
ref = A.fpba_forward(X, Ws, Us, scale, channel_group=groups).data
print("max |mha - grouped fpba| =", np.abs(A.attn_forward(mha, mw, mdims, X).data - ref).max())
