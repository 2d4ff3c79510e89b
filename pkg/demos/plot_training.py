"""
Training a small byte-level model
=================================

Three hundred steps of MFA and MFA-KR on a repetitive corpus with the
clipped AdamW, warmup and cosine recipe.  Both start from the same loss
because the zero gate makes MFA-KR behave like MFA at step 0.

"""

from gmha import attention as A
from gmha.train import TrainConfig, make_corpus, train_loop

dims = A.ModelDims(H=64, L=2, n_heads=4, head_dim=32, latent_C=32, vocab_V=257, ffn_F=172)
corpus = make_corpus(1 << 20)

for arch in (A.ArchSpec("mfa", pos_embed="rope"), A.ArchSpec("mfa_kr", kr_variant="gated", pos_embed="rope")):
    cfg = TrainConfig(dims=dims, arch=arch, peak_lr=3e-3, warmup_steps=30, total_steps=300,
                      batch_tokens=1024, seq_len=64)
    res = train_loop(cfg, corpus)
    for row in res.metrics[::50] + res.metrics[-1:]:
        print(f"{arch.kind:7s} step {row['step']:3d} loss {row['loss']:.3f} lr {row['lr']:.2e}")
    prompt = list(b"the cache ")
    out, cache = res.model.generate(prompt, 30)
    print(repr(bytes(prompt + out).decode(errors="replace")), "| cached bytes", cache.measured_bytes())
