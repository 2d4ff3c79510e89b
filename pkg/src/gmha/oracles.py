"""Randomized correctness oracles: dual formulation, grouped FPBA, incremental
decoding, GQA degeneration and folded-rank bounds.

Each oracle returns the worst deviation it observed; :func:`run_suite` turns
them into a pass/fail summary.
"""

from __future__ import annotations

import numpy as np

from . import attention as A
from .capacity import capacity_report
from .errors import UnsupportedCombinationError
from .kvcache import KvCacheState, decode_step

ARCHS = ("fpba", "mha", "mqa", "gqa", "mla", "mfa", "mfa_kr")
ORACLES = ("dual_formulation", "grouped_fpba", "incremental_decode", "degeneration", "rank_bound")
TOL = {
    "dual_formulation": 1e-10,
    "grouped_fpba": 1e-10,
    "incremental_decode": 1e-8,
    "degeneration": 1e-12,
    "rank_bound": 1e-10,
}


def random_dims(kind: str, rng: np.random.Generator, pos_embed: str = "none", H_max: int = 16) -> A.ModelDims:
    rope = pos_embed == "rope"
    if kind == "fpba":
        return A.ModelDims(H=int(rng.integers(2, 5)))
    if kind in ("mha", "mqa", "gqa"):
        options = [(H, n) for H in range(2, H_max + 1) for n in range(2, H + 1)
                   if H % n == 0 and (not rope or (H // n) % 2 == 0)]
        H, n = options[rng.integers(len(options))]
        g = 1
        if kind == "gqa":
            divs = [x for x in range(1, n + 1) if n % x == 0]
            g = divs[rng.integers(len(divs))]
        return A.ModelDims(H=H, n_heads=n, head_dim=H // n, groups_g=g)
    H = int(rng.integers(4, H_max + 1))
    m = int(rng.integers(1, 5))
    if kind == "mla":
        C = int(rng.integers(2, H + 1))
        d = int(rng.integers(1, C + 1))
        dr = int(rng.choice([2, 4])) if rope else int(rng.choice([0, 2]))
        return A.ModelDims(H=H, n_heads=m, head_dim=d, latent_C=C, rope_dim_dr=dr)
    C = int(rng.integers(1, H // 2 + 1)) * 2 if rope else int(rng.integers(1, H + 1))
    return A.ModelDims(H=H, n_heads=m, head_dim=C, latent_C=C)


def random_case(kind: str, rng: np.random.Generator, pos_embed: str = "none", T_max: int = 8, H_max: int = 16):
    """(spec, dims, weights, X) with Gaussian weights; a random gate for gated MFA-KR."""
    variant = str(rng.choice(A.KR_VARIANTS)) if kind == "mfa_kr" else None
    spec = A.ArchSpec(kind, kr_variant=variant, pos_embed=pos_embed)
    dims = random_dims(kind, rng, pos_embed, H_max)
    w = A.init_attn_weights(spec, dims, rng)
    if "alpha" in w:
        w["alpha"] = rng.normal(size=w["alpha"].shape)
    X = rng.normal(size=(int(rng.integers(1, T_max + 1)), dims.H))
    return spec, dims, w, X


def dual_formulation(spec, dims, w, X) -> float:
    inference = A.attn_forward(spec, w, dims, X).data
    if spec.kind == "fpba":
        factored = A.fpba_forward(X, list(w["W_c"]), list(w["U_c"]), A.score_scale(spec, dims),
                                  bias=A.score_bias(spec, dims, X.shape[0])).data
    else:
        factored = A.attn_forward_factored(spec, w, dims, X).data
    return float(np.abs(inference - factored).max())


def grouped_fpba(spec, dims, w, X) -> float:
    if spec.pos_embed == "rope":
        raise UnsupportedCombinationError("rotary embeddings do not fold into per-channel bilinear maps")
    Ws, Us, groups, scale = A.fpba_grouping(spec, w, dims)
    bias = None
    if spec.pos_embed == "alibi":
        bias = A.alibi_bias(dims.n_heads, X.shape[0]).data[groups]
    ref = A.fpba_forward(X, Ws, Us, scale, channel_group=groups, bias=bias).data
    return float(np.abs(A.attn_forward(spec, w, dims, X).data - ref).max())


def incremental_decode(spec, dims, w, X, elem_bytes: int = 2) -> float:
    """Max deviation of streamed rows from the full forward; inf if cache accounting is off."""
    from .kvcache import cache_bytes_per_token

    full = A.attn_forward(spec, w, dims, X).data
    cache = KvCacheState.empty(spec, dims.replace(L=1), elem_bytes)
    worst = 0.0
    for t in range(X.shape[0]):
        o, _ = decode_step(spec, w, dims, cache, X[t:t + 1], t)
        worst = max(worst, float(np.abs(o.data[0] - full[t]).max()))
    if cache.measured_bytes() != cache_bytes_per_token(spec, dims.replace(L=1), elem_bytes) * X.shape[0]:
        return float("inf")
    return worst


def degeneration(rng: np.random.Generator, pos_embed: str = "none") -> float:
    """GQA(g=n) == MHA and GQA(g=1) == MQA on shared weights; MQA(n=1) == MHA(n=1)."""
    base = random_dims("mha", rng, pos_embed)
    n = base.n_heads
    X = rng.normal(size=(int(rng.integers(1, 9)), base.H))
    mha = A.ArchSpec("mha", pos_embed=pos_embed)
    w = A.init_attn_weights(mha, base, rng)
    gqa = A.ArchSpec("gqa", pos_embed=pos_embed)
    ref = A.attn_forward(mha, w, base, X).data
    wg = {"Q_c": w["Q_c"], "K_g": w["K_c"], "V_g": w["V_c"], "O_c": w["O_c"]}
    worst = float(np.abs(A.attn_forward(gqa, wg, base.replace(groups_g=n), X).data - ref).max())

    mqa = A.ArchSpec("mqa", pos_embed=pos_embed)
    wq = {"Q_c": w["Q_c"], "K": w["K_c"][0], "V": w["V_c"][0], "O_c": w["O_c"]}
    w1 = {"Q_c": w["Q_c"], "K_g": w["K_c"][:1], "V_g": w["V_c"][:1], "O_c": w["O_c"]}
    ref_q = A.attn_forward(mqa, wq, base, X).data
    worst = max(worst, float(np.abs(A.attn_forward(gqa, w1, base.replace(groups_g=1), X).data - ref_q).max()))

    single = A.ModelDims(H=base.head_dim, n_heads=1, head_dim=base.head_dim)
    ws = {"Q_c": w["Q_c"][:1, : single.H], "K_c": w["K_c"][:1, : single.H],
          "V_c": w["V_c"][:1, : single.H], "O_c": w["O_c"][:1, : single.H]}
    wsq = {"Q_c": ws["Q_c"], "K": ws["K_c"][0], "V": ws["V_c"][0], "O_c": ws["O_c"]}
    Xs = X[:, : single.H]
    return max(worst, float(np.abs(A.attn_forward(mha, ws, single, Xs).data
                                   - A.attn_forward(mqa, wsq, single, Xs).data).max()))


def folded_rank_excess(spec, dims, w) -> float:
    """Largest sigma_{k+1}/sigma_max over heads and both circuits, k = rank bound.

    The bound is the per-head factorization rank, plus d_r for MLA's decoupled
    rotary block when present.  Returns 0.0 when the bound reaches H.
    """
    bound = capacity_report(spec, dims, measure=False).frh
    if spec.kind == "mla":
        bound += dims.rope_dim_dr
    if bound >= dims.H:
        return 0.0
    worst = 0.0
    for mats in A.folded_matrices(spec, w, dims):
        for M in mats:
            s = np.linalg.svd(M, compute_uv=False)
            if s[0] > 0:
                worst = max(worst, float(s[bound] / s[0]))
    return worst


def run_suite(archs=ARCHS, pos_embed: str = "none", trials: int = 20, seed: int = 0, oracles=ORACLES) -> dict:
    """Run every requested oracle; returns a JSON-ready summary with an overall ``passed`` flag."""
    rng = np.random.default_rng(seed)
    summary: dict = {"seed": seed, "trials": trials, "pos_embed": pos_embed, "results": {}}
    if trials == 0:
        summary["passed"] = True
        return summary
    results = summary["results"]

    def record(key, fn):
        entry = results.setdefault(key, {"status": "pass", "max_deviation": 0.0, "tolerance": None})
        try:
            dev = fn()
        except UnsupportedCombinationError as exc:
            entry.update(status="unsupported-combination", detail=str(exc))
            return
        entry["max_deviation"] = max(entry["max_deviation"], dev)

    for arch in archs:
        for _ in range(trials):
            case = random_case(arch, rng, pos_embed)
            spec = case[0]
            if "dual_formulation" in oracles:
                record(f"{arch}/dual_formulation", lambda: dual_formulation(*case))
            if "grouped_fpba" in oracles and arch in ("mha", "mqa", "gqa"):
                record(f"{arch}/grouped_fpba", lambda: grouped_fpba(*case))
            if "incremental_decode" in oracles:
                record(f"{arch}/incremental_decode", lambda: incremental_decode(*case))
            if "rank_bound" in oracles and arch != "fpba":
                record(f"{arch}/rank_bound", lambda: folded_rank_excess(spec, case[1], case[2]))
        if arch == "gqa" and "degeneration" in oracles:
            for _ in range(trials):
                record("gqa/degeneration", lambda: degeneration(rng, pos_embed))
    for key, entry in results.items():
        tol = TOL[key.split("/")[1]]
        entry["tolerance"] = tol
        if entry["status"] == "pass" and not entry["max_deviation"] <= tol:
            entry["status"] = "fail"
    summary["passed"] = all(e["status"] != "fail" for e in results.values())
    return summary
