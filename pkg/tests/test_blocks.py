import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehdr import blocks as B
from ehdr.tensor import ConvSpec, ShapeError, conv2d_oracle, gelu


def f32(*shape, g, lo=-1.0, hi=1.0):
    return g.uniform(lo, hi, shape).astype(np.float32)


def zeros_like_params(p):
    return type(p)(**{k: (np.zeros_like(v) if isinstance(v, np.ndarray) else v) for k, v in vars(p).items()})


def make_se(c, r, g=None):
    h = c // r
    if g is None:
        return B.SEParams(np.zeros((h, c), np.float32), np.zeros(h, np.float32),
                          np.zeros((c, h), np.float32), np.zeros(c, np.float32))
    return B.SEParams(f32(h, c, g=g), f32(h, g=g), f32(c, h, g=g), f32(c, g=g))


def make_ire(cin, cout, ratio, stride, g):
    e = cin * ratio
    return B.IREParams(f32(e, cin, 1, 1, g=g), f32(e, g=g), f32(e, 1, 3, 3, g=g), f32(e, g=g),
                       make_se(e, 2, g), f32(cout, e, 1, 1, g=g), f32(cout, g=g), stride)


def make_emsdc(c, g, scale=0.3):
    return B.EMSDCParams([f32(c, c // 4, 3, 3, g=g, lo=-scale, hi=scale) for _ in range(3)],
                         [f32(c, g=g, lo=-0.1, hi=0.1) for _ in range(3)],
                         f32(c, c, 1, 1, g=g, lo=-scale, hi=scale), f32(c, g=g, lo=-0.1, hi=0.1))


def make_attention(c, heads, g):
    s = 1 / math.sqrt(c)
    return B.AttentionParams(f32(3 * c, c, g=g, lo=-s, hi=s), f32(3 * c, g=g, lo=-0.1, hi=0.1),
                             f32(c, c, g=g, lo=-s, hi=s), f32(c, g=g, lo=-0.1, hi=0.1), heads)


def make_block(c, heads, g, m=2):
    dyt = lambda: B.DyTParams(np.array([0.5], np.float32), f32(c, g=g, lo=0.5, hi=1.5), f32(c, g=g, lo=-0.1, hi=0.1))
    return B.CAViTBlockParams(
        dyt1=dyt(),
        attn=make_attention(c, heads, g),
        lce=B.LCEParams(f32(c, 1, 3, 3, g=g), f32(c, g=g), f32(c, c, 1, 1, g=g), f32(c, g=g), make_se(c, 2, g)),
        dyt2=dyt(),
        mlp=B.MLPParams(f32(m * c, c, g=g), f32(m * c, g=g), f32(c, m * c, g=g), f32(c, g=g)),
        emsdc=make_emsdc(c, g),
    )


def make_iaaf(c, g):
    def w(o, i):
        s = 1 / math.sqrt(9 * i)
        return f32(o, i, 3, 3, g=g, lo=-s, hi=s), f32(o, g=g, lo=-s, hi=s)

    return B.IAAFParams(*w(c, 2 * c), *w(c, c), *w(c, c), *w(c, c))


def oracle(x, w, b, **kw):
    return conv2d_oracle(x, w, b, B.conv_spec_for(w, **kw))


# ---------------------------------------------------------------------------
# DyT


def test_dyt_known_values():
    p = B.DyTParams(np.array([0.5], np.float32), np.ones(1, np.float32), np.zeros(1, np.float32))
    assert B.dyt_forward(np.zeros((1, 1), np.float32), p)[0, 0] == 0
    p = B.DyTParams(np.array([1.0], np.float32), np.full(1, 2.0, np.float32), np.ones(1, np.float32))
    out = float(B.dyt_forward(np.full((1, 1), 0.5, np.float32), p)[0, 0])
    assert out == pytest.approx(2 * math.tanh(0.5) + 1, abs=1e-6)
    assert out == pytest.approx(1.924234, abs=1e-6)


def test_dyt_unit_gamma_is_bounded(rng):
    p = B.DyTParams(np.array([3.0], np.float32), np.ones(4, np.float32), np.zeros(4, np.float32))
    y = B.dyt_forward(rng.uniform(-5, 5, (50, 4)).astype(np.float32), p)
    assert np.all(np.abs(y) <= 1)


def test_dyt_feature_map_axis(rng):
    p = B.DyTParams(np.array([1.0], np.float32), np.array([1, 2, 3], np.float32), np.array([0, 1, 2], np.float32))
    x = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
    y = B.dyt_forward(x, p)
    np.testing.assert_allclose(y[0, 2], 3 * np.tanh(x[0, 2]) + 2, rtol=1e-6)
    with pytest.raises(ShapeError):
        B.dyt_forward(np.zeros((2, 4), np.float32), p)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 11), st.integers(0, 3))
def test_dyt_locality(seed, row, col):
    g = np.random.default_rng(seed)
    p = B.DyTParams(np.array([g.uniform(0.1, 2)], np.float32), f32(4, g=g), f32(4, g=g))
    x = f32(12, 4, g=g, lo=-3, hi=3)
    bumped = x.copy()
    bumped[row, col] += 1.0
    changed = B.dyt_forward(bumped, p) != B.dyt_forward(x, p)
    changed[row, col] = False
    assert not changed.any()


# ---------------------------------------------------------------------------
# SE / IRE


def test_se_zero_weights_halve_input(rng):
    x = rng.standard_normal((1, 4, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(B.se_forward(x, make_se(4, 2)), 0.5 * x)
    assert np.all(B.se_forward(np.zeros_like(x), make_se(4, 2)) == 0)


def test_se_hand_computed_two_channels():
    x = np.stack([np.ones((2, 2)), np.full((2, 2), 2.0)])[None].astype(np.float32)
    eye = np.eye(2, dtype=np.float32)
    p = B.SEParams(eye, np.zeros(2, np.float32), eye, np.zeros(2, np.float32))
    sig = lambda v: 1 / (1 + math.exp(-v))
    out = B.se_forward(x, p)
    np.testing.assert_allclose(out[0, 0], sig(1.0) * 1.0, rtol=1e-6)
    np.testing.assert_allclose(out[0, 1], sig(2.0) * 2.0, rtol=1e-6)


def test_ire_hand_traced_chain():
    x = (np.arange(16, dtype=np.float32) / 16).reshape(1, 1, 4, 4)
    dw = np.zeros((1, 1, 3, 3), np.float32)
    dw[0, 0, 1, 1] = 1.0
    one = np.ones((1, 1), np.float32)
    se = B.SEParams(one, np.zeros(1, np.float32), one, np.zeros(1, np.float32))
    p = B.IREParams(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32), dw, np.zeros(1, np.float32),
                    se, np.full((1, 1, 1, 1), 2.0, np.float32), np.zeros(1, np.float32), stride=2)
    # expand (x1) -> depthwise picks every second pixel -> SE gate -> project (x2)
    picked = [0.0, 2 / 16, 8 / 16, 10 / 16]
    gate = 1 / (1 + math.exp(-sum(picked) / 4))
    out = B.ire_forward(x, p)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(out.ravel(), [2 * v * gate for v in picked], rtol=1e-6)


def test_ire_shapes_and_zero_weights(rng):
    p = make_ire(3, 8, 2, 2, rng)
    out = B.ire_forward(f32(1, 3, 128, 128, g=rng), zeros_like_params_ire(p))
    assert out.shape == (1, 8, 64, 64) and np.all(out == 0)


def zeros_like_params_ire(p):
    z = zeros_like_params(p)
    z.se = zeros_like_params(p.se)
    return z


@pytest.mark.parametrize("s", [1, 2, 4])
@pytest.mark.parametrize("h,w", [(4, 4), (5, 7), (9, 4), (16, 13)])
def test_ire_output_is_ceil_of_stride(rng, s, h, w):
    out = B.ire_forward(f32(1, 2, h, w, g=rng), make_ire(2, 4, 2, s, rng))
    assert out.shape == (1, 4, -(-h // s), -(-w // s))


# ---------------------------------------------------------------------------
# E-MSDC


def test_emsdc_zero_merge_is_identity(rng):
    p = make_emsdc(8, rng)
    p.merge_w[:] = 0
    p.merge_b[:] = 0
    x = f32(1, 8, 16, 16, g=rng)
    assert np.array_equal(B.emsdc_forward(x, p), x)


def test_emsdc_branches_keep_spatial_size(rng):
    p = make_emsdc(8, rng)
    x = f32(1, 8, 16, 16, g=rng)
    for w, d in zip(p.branch_w, B.EMSDC_DILATIONS):
        assert B.conv(x, w, None, dilation=d, groups=4, padding=d).shape == x.shape
    assert B.emsdc_forward(x, p).shape == x.shape


def test_emsdc_single_branch_against_oracle(rng):
    p = make_emsdc(8, rng)
    for i in (1, 2):
        p.branch_w[i][:] = 0
        p.branch_b[i][:] = 0
    x = f32(1, 8, 7, 6, g=rng)
    branch = gelu(oracle(x, p.branch_w[0], p.branch_b[0], dilation=1, groups=4, padding=1))
    want = x + oracle(branch, p.merge_w, p.merge_b)
    np.testing.assert_allclose(B.emsdc_forward(x, p), want, rtol=1e-5, atol=1e-6)


def test_emsdc_rejects_bad_channels(rng):
    with pytest.raises(ShapeError):
        B.emsdc_forward(f32(1, 6, 4, 4, g=rng), make_emsdc(8, rng))


def test_emsdc_rprelu_option(rng):
    p = make_emsdc(4, rng)
    p.activation = "rprelu"
    p.rprelu = [B.RPReLUParams(np.zeros(4, np.float32), np.full(4, 0.25, np.float32), np.zeros(4, np.float32))] * 3
    x = f32(1, 4, 6, 6, g=rng)
    branches = sum(
        (lambda b: np.where(b > 0, b, 0.25 * b))(oracle(x, w, b, dilation=d, groups=4, padding=d))
        for w, b, d in zip(p.branch_w, p.branch_b, B.EMSDC_DILATIONS)
    )
    np.testing.assert_allclose(B.emsdc_forward(x, p), x + oracle(branches, p.merge_w, p.merge_b), rtol=1e-5, atol=1e-5)


# ---------------------------------------------------------------------------
# attention / LCE / block


def test_msa_single_token(rng):
    p = make_attention(8, 2, rng)
    t = f32(1, 8, g=rng)
    v = t @ p.qkv_w[16:].T + p.qkv_b[16:]
    np.testing.assert_allclose(B.msa_forward(t, p), v @ p.out_w.T + p.out_b, rtol=1e-5, atol=1e-6)


def test_msa_zero_projections(rng):
    p = zeros_like_params(make_attention(8, 4, rng))
    assert np.all(B.msa_forward(f32(5, 8, g=rng), p) == 0)


def test_msa_two_tokens_by_hand():
    eye = np.eye(2, dtype=np.float32)
    p = B.AttentionParams(np.vstack([eye, eye, eye]), np.zeros(6, np.float32), eye, np.zeros(2, np.float32), 1)
    out = B.msa_forward(eye, p)
    a = 1 / math.sqrt(2)
    pr = math.exp(a) / (math.exp(a) + 1)
    np.testing.assert_allclose(out, [[pr, 1 - pr], [1 - pr, pr]], rtol=1e-6)


def test_msa_permutation_equivariance(rng):
    p = make_attention(16, 4, rng)
    t = f32(10, 16, g=rng)
    perm = rng.permutation(10)
    np.testing.assert_allclose(B.msa_forward(t[perm], p), B.msa_forward(t, p)[perm], rtol=1e-5, atol=1e-6)


def test_msa_shape_errors(rng):
    with pytest.raises(ShapeError):
        B.msa_forward(f32(4, 6, g=rng), make_attention(8, 2, rng))
    with pytest.raises(ShapeError):
        B.msa_forward(f32(4, 8, g=rng), make_attention(8, 3, rng))


def test_lce_constant_field_by_hand():
    c, v = 4, 0.1
    p = B.LCEParams(np.ones((c, 1, 3, 3), np.float32), np.zeros(c, np.float32),
                    np.eye(c, dtype=np.float32).reshape(c, c, 1, 1), np.zeros(c, np.float32), make_se(c, 2))
    out = B.lce_forward(np.full((16, c), v, np.float32), (4, 4), p).reshape(4, 4, c)
    gelu_ = lambda z: z * 0.5 * (1 + math.erf(z / math.sqrt(2)))
    np.testing.assert_allclose(out[1, 1], 0.5 * gelu_(9 * v), rtol=1e-6)
    np.testing.assert_allclose(out[0, 1], 0.5 * gelu_(6 * v), rtol=1e-6)
    np.testing.assert_allclose(out[0, 0], 0.5 * gelu_(4 * v), rtol=1e-6)


def test_lce_zero_weights_and_shape(rng):
    c = 8
    zero = B.LCEParams(np.zeros((c, 1, 3, 3), np.float32), np.zeros(c, np.float32),
                       np.zeros((c, c, 1, 1), np.float32), np.zeros(c, np.float32), make_se(c, 2))
    assert np.all(B.lce_forward(f32(64, c, g=rng), (8, 8), zero) == 0)
    live = make_block(c, 2, rng).lce
    assert B.lce_forward(f32(64, c, g=rng), (8, 8), live).shape == (64, c)
    with pytest.raises(ShapeError):
        B.lce_forward(f32(63, c, g=rng), (8, 8), live)


def zero_block(c, heads, g):
    p = make_block(c, heads, g)
    for sub in (p.attn, p.mlp):
        for k, v in vars(sub).items():
            if isinstance(v, np.ndarray):
                v[:] = 0
    for arr in (p.lce.dw_w, p.lce.dw_b, p.lce.pw_w, p.lce.pw_b, p.emsdc.merge_w, p.emsdc.merge_b):
        arr[:] = 0
    for d in (p.dyt1, p.dyt2):
        d.alpha[:] = 0.5
        d.gamma[:] = 1
        d.beta[:] = 0
    return p


def test_block_with_zero_projections_is_identity(rng):
    t = f32(64, 16, g=rng)
    assert np.array_equal(B.cavit_block_forward(t, (8, 8), zero_block(16, 4, rng)), t)


def test_block_shape(rng):
    assert B.cavit_block_forward(f32(64, 16, g=rng), (8, 8), make_block(16, 4, rng)).shape == (64, 16)


@pytest.mark.parametrize("attach", ["input", "z"])
def test_block_trace_against_composed_sub_ops(rng, attach):
    c, grid = 4, (2, 2)
    p = make_block(c, 2, rng)
    p.emsdc_attach = attach
    t = f32(4, c, g=rng)
    y = t + B.msa_forward(B.dyt_forward(t, p.dyt1), p.attn) + B.lce_forward(t, grid, p.lce)
    z = y + B.mlp_forward(B.dyt_forward(y, p.dyt2), p.mlp)
    src = (t if attach == "input" else z).T.reshape(1, c, 2, 2)
    inc = B.emsdc_forward(src, p.emsdc) - src
    want = z + inc.reshape(c, 4).T
    np.testing.assert_allclose(B.cavit_block_forward(t, grid, p), want, rtol=1e-5, atol=1e-6)


def test_mlp_against_direct_formula(rng):
    p = make_block(4, 2, rng).mlp
    t = f32(3, 4, g=rng)
    h = t.astype(np.float64) @ p.fc1_w.T + p.fc1_b
    from scipy.special import erf

    h = h * 0.5 * (1 + erf(h / math.sqrt(2)))
    np.testing.assert_allclose(B.mlp_forward(t, p), h @ p.fc2_w.T + p.fc2_b, rtol=1e-5, atol=1e-6)


# ---------------------------------------------------------------------------
# IAAF


def test_iaaf_zero_weights(rng):
    p = zeros_like_params(make_iaaf(4, rng))
    f1, f2 = f32(1, 4, 6, 6, g=rng), f32(1, 4, 6, 6, g=rng)
    assert np.all(B.iaaf_intersection(f1, f2, p) == 0)
    assert np.array_equal(B.iaaf_fuse(f1, f2, p), f1 + f2)


def test_iaaf_shapes(rng):
    f = f32(1, 16, 32, 32, g=rng)
    assert B.iaaf_intersection(f, f, make_iaaf(16, rng)).shape == (1, 16, 32, 32)
    with pytest.raises(ShapeError):
        B.iaaf_fuse(f, f[:, :, :16], make_iaaf(16, rng))


def test_iaaf_trace_against_oracle_composition(rng):
    p = make_iaaf(2, rng)
    fa, fb = f32(1, 2, 2, 2, g=rng), f32(1, 2, 2, 2, g=rng)
    h = oracle(np.concatenate([fa, fb], axis=1), p.pre_w, p.pre_b)
    h = h + oracle(gelu(oracle(h, p.res0_w, p.res0_b)), p.res1_w, p.res1_b)
    want = oracle(h, p.post_w, p.post_b)
    np.testing.assert_allclose(B.iaaf_intersection(fa, fb, p), want, rtol=1e-5, atol=1e-6)


def test_iaaf_fuse_when_intersection_equals_second_input(rng, monkeypatch):
    f1, f2 = f32(1, 4, 5, 5, g=rng), f32(1, 4, 5, 5, g=rng)
    monkeypatch.setattr(B, "iaaf_intersection", lambda a, b, p: b)
    np.testing.assert_allclose(B.iaaf_fuse(f1, f2, None), f1, rtol=0, atol=1e-6)


def test_iaaf_rearrangement_identity(rng):
    for _ in range(5):
        p = make_iaaf(4, rng)
        f1, f2 = f32(1, 4, 8, 8, g=rng), f32(1, 4, 8, 8, g=rng)
        total = B.iaaf_fuse(f1, f2, p) + B.iaaf_intersection(f1, f2, p)
        assert np.abs(total - (f1 + f2)).max() <= 1e-6
