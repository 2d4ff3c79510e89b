import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmha import attention as A
from gmha.errors import ConfigurationError, DimensionError, UnsupportedCombinationError
from gmha.oracles import ARCHS, random_case
from gmha.tensor import rope_apply


def mha_loop_reference(X, w, scale):
    """Independent per-head, per-position MHA with explicit causal softmax."""
    T, H = X.shape
    out = np.zeros((T, H))
    for h in range(w["Q_c"].shape[0]):
        q, k, v = X @ w["Q_c"][h], X @ w["K_c"][h], X @ w["V_c"][h]
        for i in range(T):
            s = np.array([q[i] @ k[j] * scale for j in range(i + 1)])
            p = np.exp(s - s.max())
            p /= p.sum()
            out[i] += sum(p[j] * v[j] for j in range(i + 1)) @ w["O_c"][h].T
    return out


def mha_case(rng, H=8, n=2, T=4):
    spec = A.ArchSpec("mha")
    dims = A.ModelDims(H=H, n_heads=n, head_dim=H // n)
    return spec, dims, A.init_attn_weights(spec, dims, rng), rng.normal(size=(T, H))


# -- FPBA ----------------------------------------------------------------------------------

def test_fpba_single_token(rng):
    H = 3
    W, U = list(rng.normal(size=(H, H, H))), list(rng.normal(size=(H, H, H)))
    x = rng.normal(size=(1, H))
    np.testing.assert_allclose(A.fpba_forward(x, W, U).data, sum(x @ u for u in U), atol=1e-12)


def test_fpba_zero_scores_give_running_mean(rng):
    H, T = 2, 5
    U = list(rng.normal(size=(H, H, H)))
    X = rng.normal(size=(T, H))
    out = A.fpba_forward(X, [np.zeros((H, H))] * H, U).data
    for i in range(T):
        np.testing.assert_allclose(out[i], sum(X[: i + 1].mean(axis=0) @ u for u in U), atol=1e-12)


def test_fpba_rejects_non_square():
    with pytest.raises(DimensionError):
        A.fpba_forward(np.ones((2, 2)), [np.ones((2, 3))] * 2, [np.ones((2, 2))] * 2)


def test_fpba_reproduces_mha_under_channel_grouping(rng):
    spec, dims, w, X = mha_case(rng)
    d = dims.head_dim
    W = [w["Q_c"][h] @ w["K_c"][h].T for h in range(dims.n_heads)]
    U = [w["V_c"][h] @ w["O_c"][h].T / d for h in range(dims.n_heads)]
    groups = [c // d for c in range(dims.H)]
    ref = A.fpba_forward(X, W, U, 1 / math.sqrt(d), channel_group=groups).data
    np.testing.assert_allclose(A.attn_forward(spec, w, dims, X).data, ref, atol=1e-10, rtol=0)


# -- inference formulation ---------------------------------------------------------------------

def test_mha_matches_loop_reference(rng):
    spec, dims, w, X = mha_case(rng, H=12, n=3, T=6)
    ref = mha_loop_reference(X, w, 1 / math.sqrt(dims.head_dim))
    np.testing.assert_allclose(A.attn_forward(spec, w, dims, X).data, ref, atol=1e-12, rtol=0)


def test_batched_input_matches_rows(rng):
    spec, dims, w, _ = mha_case(rng)
    X = rng.normal(size=(3, 5, dims.H))
    batched = A.attn_forward(spec, w, dims, X).data
    for b in range(3):
        np.testing.assert_array_equal(batched[b], A.attn_forward(spec, w, dims, X[b]).data)


def test_mqa_single_head_equals_mha(rng):
    dims = A.ModelDims(H=4, n_heads=1, head_dim=4)
    w = A.init_attn_weights(A.ArchSpec("mha"), dims, rng)
    wq = {"Q_c": w["Q_c"], "K": w["K_c"][0], "V": w["V_c"][0], "O_c": w["O_c"]}
    X = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(A.attn_forward(A.ArchSpec("mha"), w, dims, X).data,
                                  A.attn_forward(A.ArchSpec("mqa"), wq, dims, X).data)


def test_gqa_degenerates_to_mha_and_mqa(rng):
    spec, dims, w, X = mha_case(rng, H=8, n=4)
    gqa = A.ArchSpec("gqa")
    wg = {"Q_c": w["Q_c"], "K_g": w["K_c"], "V_g": w["V_c"], "O_c": w["O_c"]}
    np.testing.assert_allclose(A.attn_forward(gqa, wg, dims.replace(groups_g=4), X).data,
                               A.attn_forward(spec, w, dims, X).data, atol=1e-12, rtol=0)
    w1 = {"Q_c": w["Q_c"], "K_g": w["K_c"][:1], "V_g": w["V_c"][:1], "O_c": w["O_c"]}
    wq = {"Q_c": w["Q_c"], "K": w["K_c"][0], "V": w["V_c"][0], "O_c": w["O_c"]}
    np.testing.assert_allclose(A.attn_forward(gqa, w1, dims.replace(groups_g=1), X).data,
                               A.attn_forward(A.ArchSpec("mqa"), wq, dims, X).data, atol=1e-12, rtol=0)


def test_gqa_contiguous_head_groups():
    assert A.head_groups(A.ModelDims(H=8, n_heads=4, head_dim=2, groups_g=2)).tolist() == [0, 0, 1, 1]


def test_mla_rope_needs_rotary_dims(rng):
    with pytest.raises(ConfigurationError):
        A.validate_dims(A.ArchSpec("mla", pos_embed="rope"),
                        A.ModelDims(H=8, n_heads=2, head_dim=4, latent_C=6, rope_dim_dr=0))


def test_mfa_needs_head_dim_equal_latent():
    with pytest.raises(ConfigurationError):
        A.validate_dims(A.ArchSpec("mfa"), A.ModelDims(H=8, n_heads=2, head_dim=3, latent_C=4))


def test_mha_needs_full_width():
    with pytest.raises(ConfigurationError):
        A.validate_dims(A.ArchSpec("mha"), A.ModelDims(H=8, n_heads=3, head_dim=2))


def test_score_scale_default_and_override():
    dims = A.ModelDims(H=8, n_heads=2, head_dim=4, latent_C=4)
    assert A.score_scale(A.ArchSpec("mfa"), dims) == 1 / math.sqrt(4)
    assert A.score_scale(A.ArchSpec("mfa", score_scale=0.125), dims) == 0.125
    mla = A.ModelDims(H=8, n_heads=2, head_dim=4, latent_C=6, rope_dim_dr=2)
    assert A.score_scale(A.ArchSpec("mla"), mla) == 1 / math.sqrt(6)


# -- dual formulation -------------------------------------------------------------------------------

def test_mfa_dual_formulation_example(rng):
    spec = A.ArchSpec("mfa")
    dims = A.ModelDims(H=8, n_heads=2, head_dim=4, latent_C=4)
    w = A.init_attn_weights(spec, dims, rng)
    X = rng.normal(size=(3, 8))
    np.testing.assert_allclose(A.attn_forward(spec, w, dims, X).data,
                               A.attn_forward_factored(spec, w, dims, X).data, atol=1e-10, rtol=0)


def test_mha_dual_formulation_example(rng):
    spec, dims, w, X = mha_case(rng)
    np.testing.assert_allclose(A.attn_forward(spec, w, dims, X).data,
                               A.attn_forward_factored(spec, w, dims, X).data, atol=1e-10, rtol=0)


def test_mla_dual_formulation_example(rng):
    spec = A.ArchSpec("mla")
    dims = A.ModelDims(H=8, n_heads=2, head_dim=4, latent_C=6)
    w = A.init_attn_weights(spec, dims, rng)
    X = rng.normal(size=(4, 8))
    np.testing.assert_allclose(A.attn_forward(spec, w, dims, X).data,
                               A.attn_forward_factored(spec, w, dims, X).data, atol=1e-10, rtol=0)


def test_factored_route_rejects_rope(rng):
    spec = A.ArchSpec("mha", pos_embed="rope")
    dims = A.ModelDims(H=8, n_heads=2, head_dim=4)
    w = A.init_attn_weights(spec, dims, rng)
    with pytest.raises(UnsupportedCombinationError):
        A.attn_forward_factored(spec, w, dims, rng.normal(size=(3, 8)))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(ARCHS[1:]), st.sampled_from(["none", "alibi"]), st.integers(0, 2**32 - 1))
def test_dual_formulation_property(kind, pos, seed):
    spec, dims, w, X = random_case(kind, np.random.default_rng(seed), pos)
    np.testing.assert_allclose(A.attn_forward(spec, w, dims, X).data,
                               A.attn_forward_factored(spec, w, dims, X).data, atol=1e-10, rtol=0)


# -- rank bounds -----------------------------------------------------------------------------------------

def _rank(M, rel=1e-10):
    s = np.linalg.svd(M, compute_uv=False)
    return int((s > rel * s[0]).sum())


def test_folded_mfa_rank_at_most_c(rng):
    spec = A.ArchSpec("mfa")
    dims = A.ModelDims(H=12, n_heads=3, head_dim=4, latent_C=4)
    qk, vo = A.folded_matrices(spec, A.init_attn_weights(spec, dims, rng), dims)
    assert max(_rank(M) for M in qk) == 4
    assert max(_rank(M) for M in vo) == 4


@pytest.mark.parametrize("kind,dims,bound", [
    ("mha", A.ModelDims(H=12, n_heads=4, head_dim=3), 3),
    ("mqa", A.ModelDims(H=12, n_heads=4, head_dim=3), 3),
    ("gqa", A.ModelDims(H=12, n_heads=4, head_dim=3, groups_g=2), 3),
    ("mla", A.ModelDims(H=12, n_heads=3, head_dim=2, latent_C=6), 2),
])
def test_folded_qk_rank_bounds(rng, kind, dims, bound):
    spec = A.ArchSpec(kind)
    qk, _ = A.folded_matrices(spec, A.init_attn_weights(spec, dims, rng), dims)
    assert max(_rank(M) for M in qk) == bound


# -- MFA-KR ---------------------------------------------------------------------------------------------

def test_kr_gated_zero_alpha_is_identity(rng):
    k = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(A.kr_value_from_key("gated", k, rng.normal(size=(4, 4)), np.zeros(4)), k)


def test_kr_vanilla_is_identity(rng):
    k = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(A.kr_value_from_key("vanilla", k), k)


def test_kr_gated_unit_alpha_equals_residual(rng):
    k, N = rng.normal(size=(5, 4)), rng.normal(size=(4, 4))
    np.testing.assert_allclose(A.kr_value_from_key("gated", k, N, np.ones(4)),
                               A.kr_value_from_key("residual", k, N), atol=1e-12, rtol=0)


def test_kr_extra_proj_and_gated_formulas(rng):
    k, N, a = rng.normal(size=(5, 4)), rng.normal(size=(4, 4)), rng.normal(size=4)
    np.testing.assert_allclose(A.kr_value_from_key("extra_proj", k, N), k @ N, atol=1e-14)
    np.testing.assert_allclose(A.kr_value_from_key("gated", k, N, a), k + a * (k @ N), atol=1e-14)


def test_kr_alpha_rejected_for_ungated(rng):
    with pytest.raises(ConfigurationError):
        A.kr_value_from_key("residual", np.ones((2, 2)), np.eye(2), np.zeros(2))


@pytest.mark.parametrize("pos", ["none", "rope", "alibi"])
def test_gated_kr_at_zero_gate_equals_mfa_with_shared_projection(rng, pos):
    dims = A.ModelDims(H=8, n_heads=3, head_dim=4, latent_C=4)
    kr = A.ArchSpec("mfa_kr", kr_variant="gated", pos_embed=pos)
    w = A.init_attn_weights(kr, dims, rng)
    assert (w["alpha"] == 0).all()
    mfa_w = {k: w[k] for k in ("S_q", "S_k", "Q_c", "O_c")}
    mfa_w["S_v"] = w["S_k"]
    X = rng.normal(size=(6, 8))
    np.testing.assert_array_equal(A.attn_forward(kr, w, dims, X).data,
                                  A.attn_forward(A.ArchSpec("mfa", pos_embed=pos), mfa_w, dims, X).data)


def test_effective_value_projection(rng):
    S_k, N, a = rng.normal(size=(8, 4)), rng.normal(size=(4, 4)), rng.normal(size=4)
    np.testing.assert_allclose(A.effective_value_projection("gated", S_k, N, a), S_k @ (np.eye(4) + N * a), atol=1e-13)


# -- positional embeddings ----------------------------------------------------------------------------

def test_rope_position_zero_is_identity(rng):
    x = rng.normal(size=(1, 6))
    np.testing.assert_array_equal(rope_apply(x, [0]).data, x)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000), st.integers(0, 2**32 - 1))
def test_rope_preserves_norm(half, pos, seed):
    x = np.random.default_rng(seed).normal(size=(1, 2 * half))
    out = rope_apply(x, [pos]).data
    assert abs(np.linalg.norm(out) - np.linalg.norm(x)) <= 1e-12


def test_rope_is_shift_invariant(rng):
    q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))

    def score(m, n):
        return float((rope_apply(q, [m], 100.0).data @ rope_apply(k, [n], 100.0).data.T)[0, 0])

    assert abs(score(5, 3) - score(12, 10)) <= 1e-10


def test_rope_pair_rotation_matches_formula():
    D, pos, base = 4, 3, 10.0
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    out = rope_apply(x, [pos], base).data[0]
    for i in range(D // 2):
        th = pos * base ** (-2 * i / D)
        a, b = x[0, 2 * i], x[0, 2 * i + 1]
        assert out[2 * i] == pytest.approx(a * math.cos(th) - b * math.sin(th), abs=1e-14)
        assert out[2 * i + 1] == pytest.approx(a * math.sin(th) + b * math.cos(th), abs=1e-14)


def test_rope_odd_dimension():
    with pytest.raises(DimensionError):
        rope_apply(np.ones((2, 3)), [0, 1])


def test_alibi_slopes_for_eight_heads():
    assert A.alibi_slopes(8).tolist() == [2.0 ** -k for k in range(1, 9)]


def test_alibi_bias_structure():
    b = A.alibi_bias(4, 5).data
    slopes = A.alibi_slopes(4)
    assert b.shape == (4, 5, 5)
    assert (np.diagonal(b, axis1=1, axis2=2) == 0).all()
    assert np.isneginf(b[:, 0, 1:]).all()
    assert b[2, 4, 1] == -slopes[2] * 3


def test_alibi_single_position():
    assert A.alibi_bias(3, 1).data.tolist() == [[[0.0]], [[0.0]], [[0.0]]]


# -- shape audit ------------------------------------------------------------------------------------------

MFA_DIMS = A.ModelDims(H=8, n_heads=2, head_dim=4, latent_C=4)


def test_audit_complete_mfa(rng):
    spec = A.ArchSpec("mfa")
    assert A.audit_shapes(spec, MFA_DIMS, A.init_attn_weights(spec, MFA_DIMS, rng)) == []


def test_audit_missing_sv(rng):
    spec = A.ArchSpec("mfa")
    w = A.init_attn_weights(spec, MFA_DIMS, rng)
    del w["S_v"]
    problems = A.audit_shapes(spec, MFA_DIMS, w)
    assert len(problems) == 1 and "S_v" in problems[0]


def test_audit_reports_wrong_shape(rng):
    spec = A.ArchSpec("mla")
    dims = A.ModelDims(H=8, n_heads=2, head_dim=4, latent_C=6)
    w = A.init_attn_weights(spec, dims, rng)
    w["Q_c"] = np.zeros((2, 6, 5))
    problems = A.audit_shapes(spec, dims, w)
    assert len(problems) == 1 and "Q_c" in problems[0] and "6x4" in problems[0]


def test_audit_lists_every_violation(rng):
    spec = A.ArchSpec("mfa")
    w = A.init_attn_weights(spec, MFA_DIMS, rng)
    del w["S_v"], w["S_q"]
    w["bogus"] = np.zeros(1)
    assert len(A.audit_shapes(spec, MFA_DIMS, w)) == 3


def test_kr_weight_sets_by_variant():
    dims = A.ModelDims(H=8, n_heads=2, head_dim=4, latent_C=4)
    names = {v: set(A.expected_shapes(A.ArchSpec("mfa_kr", kr_variant=v), dims)) for v in A.KR_VARIANTS}
    assert names["vanilla"] == {"S_q", "S_k", "Q_c", "O_c"}
    assert names["residual"] == names["extra_proj"] == names["vanilla"] | {"N"}
    assert names["gated"] == names["residual"] | {"alpha"}


def test_kr_variant_only_for_kr():
    with pytest.raises(ConfigurationError):
        A.ArchSpec("mfa", kr_variant="gated")
    with pytest.raises(ConfigurationError):
        A.ArchSpec("mfa_kr")


def test_fpba_rope_unsupported():
    with pytest.raises(UnsupportedCombinationError):
        A.validate_dims(A.ArchSpec("fpba", pos_embed="rope"), A.ModelDims(H=4))


# -- causality --------------------------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.sampled_from(ARCHS), st.sampled_from(["none", "rope", "alibi"]), st.integers(0, 2**32 - 1))
def test_future_tokens_do_not_leak(kind, pos, seed):
    if kind == "fpba" and pos == "rope":
        return
    rng = np.random.default_rng(seed)
    spec, dims, w, X = random_case(kind, rng, pos)
    T = X.shape[0]
    i = int(rng.integers(T))
    Y = X.copy()
    Y[i + 1:] += rng.normal(size=Y[i + 1:].shape)
    np.testing.assert_array_equal(A.attn_forward(spec, w, dims, X).data[: i + 1],
                                  A.attn_forward(spec, w, dims, Y).data[: i + 1])
