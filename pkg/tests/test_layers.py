"""Forward semantics, equivariance, and VJP correctness for every layer."""
import dataclasses
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from octic import group, layers, steerable
from octic.layers import (
    EquivLinearWeights,
    add_posenc_cls,
    add_posenc_cls_vjp,
    assemble_dense,
    attention,
    attention_logits,
    attention_vjp,
    block_forward,
    block_vjp,
    dense_linear,
    dense_linear_vjp,
    equiv_gelu,
    equiv_gelu_vjp,
    equiv_layernorm,
    equiv_layernorm_vjp,
    equiv_linear,
    equiv_linear_param_count,
    equiv_linear_vjp,
    gelu,
    gelu_scalar,
    gelu_vjp,
    init_dense,
    init_equiv_linear,
    init_octic_block,
    init_patch_embed,
    init_standard_block,
    layernorm,
    layernorm_vjp,
    merge_heads,
    patch_embed,
    patch_embed_vjp,
    split_heads,
)
from octic.steerable import GridGeometry, SteerableFeature

RNG = lambda s: np.random.default_rng(s)


def rel_close(a, b, rtol=1e-6, atol=1e-9):
    return math.isclose(a, b, rel_tol=rtol, abs_tol=atol)


def fd_directional(f, x, d, h=1e-6):
    """Central-difference directional derivative of a scalar-valued f."""
    return (f(x + h * d) - f(x - h * d)) / (2.0 * h)


def channel_residual(f, x, tol):
    """max_g |f(g.x) - g.f(x)| relative, channel action only (no tokens)."""
    ref = f(x)
    worst = 0.0
    for g in range(8):
        lhs = f(steerable.channel_action(g, x))
        rhs = steerable.channel_action(g, ref)
        worst = max(worst, np.max(np.abs(lhs - rhs)))
    assert worst / (np.max(np.abs(ref)) + 1e-30) < tol, worst


# ---------------------------------------------------------------------------
# equivariant linear


def test_equiv_linear_identity_weights():
    rng = RNG(0)
    x = rng.standard_normal((16, 5))
    eye = EquivLinearWeights(*(np.eye(2),) * 4, np.eye(4), np.zeros(2))
    y, _ = equiv_linear(eye, x)
    assert_allclose(y, x, atol=0)


def test_equiv_linear_matches_assembled_dense():
    rng = RNG(1)
    w = init_equiv_linear(rng, 16, 24)
    w.bias[:] = rng.standard_normal(3)
    x = rng.standard_normal((2, 16, 7))
    y, _ = equiv_linear(w, x)
    ref = np.einsum("ij,bjl->bil", assemble_dense(w), x)
    ref[:, :3, :] += w.bias[:, None]
    assert np.max(np.abs(y - ref)) < 1e-13


def test_assembled_dense_is_intertwiner():
    rng = RNG(2)
    dense = assemble_dense(init_equiv_linear(rng, 16, 32, bias=False))
    rin, rout = steerable.Rep.iso_multiple(16), steerable.Rep.iso_multiple(32)
    for g in range(8):
        assert np.max(np.abs(dense @ rin.matrix(g) - rout.matrix(g) @ dense)) < 1e-12


def test_equiv_linear_channel_equivariance():
    rng = RNG(3)
    w = init_equiv_linear(rng, 24, 24)
    x = rng.standard_normal((24, 6))
    channel_residual(lambda t: equiv_linear(w, t)[0], x, 1e-12)


def test_equiv_linear_param_count():
    assert equiv_linear_param_count(8, 8, bias=False) == 8
    for ci, co in ((16, 16), (16, 24), (64, 256)):
        w = init_equiv_linear(RNG(4), ci, co)
        n = sum(a.size for a in (w.w_a1, w.w_a2, w.w_b1, w.w_b2, w.w_e, w.bias))
        assert n == equiv_linear_param_count(ci, co) == co * ci // 8 + co // 8


def test_equiv_linear_rejects_mismatch():
    w = init_equiv_linear(RNG(5), 16, 16)
    with pytest.raises(ValueError):
        equiv_linear(w, np.zeros((24, 3)))


def test_equiv_linear_vjp_zero_and_directions():
    rng = RNG(6)
    w = init_equiv_linear(rng, 16, 24)
    x = rng.standard_normal((3, 16, 4))
    y, cache = equiv_linear(w, x)
    xbar, wbar = equiv_linear_vjp(w, cache, np.zeros_like(y))
    assert not np.any(xbar) and not np.any(wbar.w_e) and not np.any(wbar.bias)

    ybar = rng.standard_normal(y.shape)
    xbar, wbar = equiv_linear_vjp(w, cache, ybar)
    for _ in range(20):
        d = rng.standard_normal(x.shape)
        got = float((xbar * d).sum())
        want = fd_directional(
            lambda t: float((equiv_linear(w, t)[0] * ybar).sum()), x, d)
        assert rel_close(got, want)


def test_equiv_linear_vjp_weight_grads_share_e_columns():
    rng = RNG(7)
    w = init_equiv_linear(rng, 16, 16)
    x = np.zeros((16, 3))
    x[10:12] = rng.standard_normal((2, 3))   # E12 channels only
    x[14:16] = rng.standard_normal((2, 3))   # E22 channels only
    ybar = rng.standard_normal((16, 3))
    y, cache = equiv_linear(w, x)
    _, wbar = equiv_linear_vjp(w, cache, ybar)
    # second doublet components alone still drive the shared E matrix
    assert np.max(np.abs(wbar.w_e)) > 1e-3
    d = rng.standard_normal(w.w_e.shape)

    def loss_we(we):
        return float((equiv_linear(
            dataclasses.replace(w, w_e=we), x)[0] * ybar).sum())

    assert rel_close(float((wbar.w_e * d).sum()), fd_directional(loss_we, w.w_e, d))

    dbias = rng.standard_normal(w.bias.shape)

    def loss_bias(b):
        return float((equiv_linear(
            dataclasses.replace(w, bias=b), x)[0] * ybar).sum())

    _, wbar2 = equiv_linear_vjp(w, cache, ybar)
    assert rel_close(float((wbar2.bias * dbias).sum()),
                     fd_directional(loss_bias, w.bias, dbias))


def test_dense_linear_and_vjp():
    rng = RNG(8)
    w = init_dense(rng, 6, 10)
    w.bias[:] = rng.standard_normal(10)
    x = rng.standard_normal((2, 6, 4))
    y, cache = dense_linear(w, x)
    assert_allclose(y, np.einsum("ij,bjl->bil", w.w, x) + w.bias[:, None], atol=0)
    ybar = rng.standard_normal(y.shape)
    xbar, wbar = dense_linear_vjp(w, cache, ybar)
    d = rng.standard_normal(x.shape)
    want = fd_directional(lambda t: float((dense_linear(w, t)[0] * ybar).sum()), x, d)
    assert rel_close(float((xbar * d).sum()), want)
    assert_allclose(wbar.bias, ybar.sum(axis=(0, 2)), atol=1e-12)


# ---------------------------------------------------------------------------
# layer norms


def test_equiv_layernorm_removes_constant_a1():
    x = np.zeros((16, 3))
    x[:2] = 4.2  # constant over the A1 sub-block
    y, _ = equiv_layernorm(x, np.ones(6))
    assert np.max(np.abs(y)) == 0.0


def test_equiv_layernorm_output_centered_per_block():
    rng = RNG(9)
    y, _ = equiv_layernorm(rng.standard_normal((2, 32, 5)), np.ones(6))
    means = y.reshape(2, 8, 4, 5).mean(axis=2)
    assert np.max(np.abs(means)) < 1e-13


def test_equiv_layernorm_equivariance():
    rng = RNG(10)
    gains = rng.uniform(0.5, 1.5, 6)
    x = rng.standard_normal((24, 7))
    channel_residual(lambda t: equiv_layernorm(t, gains)[0], x, 1e-12)


def test_equiv_layernorm_vjp():
    rng = RNG(11)
    gains = rng.uniform(0.5, 1.5, 6)
    x = rng.standard_normal((2, 16, 3))
    y, cache = equiv_layernorm(x, gains)
    ybar = rng.standard_normal(y.shape)
    xbar, gbar = equiv_layernorm_vjp(gains, cache, ybar)
    for _ in range(10):
        d = rng.standard_normal(x.shape)
        want = fd_directional(
            lambda t: float((equiv_layernorm(t, gains)[0] * ybar).sum()), x, d)
        assert rel_close(float((xbar * d).sum()), want)
    dg = rng.standard_normal(6)
    want = fd_directional(
        lambda g: float((equiv_layernorm(x, g)[0] * ybar).sum()), gains, dg)
    assert rel_close(float((gbar * dg).sum()), want)


def test_standard_layernorm_and_vjp():
    rng = RNG(12)
    gamma, beta = rng.uniform(0.5, 1.5, 8), rng.standard_normal(8)
    x = rng.standard_normal((3, 8, 4))
    y, cache = layernorm(x, gamma, beta)
    centered = y - beta[:, None]
    assert np.max(np.abs((centered / gamma[:, None]).mean(axis=1))) < 1e-13
    ybar = rng.standard_normal(y.shape)
    xbar, gammabar, betabar = layernorm_vjp(gamma, cache, ybar)
    d = rng.standard_normal(x.shape)
    want = fd_directional(
        lambda t: float((layernorm(t, gamma, beta)[0] * ybar).sum()), x, d)
    assert rel_close(float((xbar * d).sum()), want)
    assert_allclose(betabar, ybar.sum(axis=(0, 2)), atol=1e-12)
    dgm = rng.standard_normal(8)
    want = fd_directional(
        lambda g: float((layernorm(x, g, beta)[0] * ybar).sum()), gamma, dgm)
    assert rel_close(float((gammabar * dgm).sum()), want)


# ---------------------------------------------------------------------------
# activations


def test_equiv_gelu_zero_and_pure_a1():
    y, _ = equiv_gelu(np.zeros((16, 2)))
    assert np.max(np.abs(y)) == 0.0
    a = 1.7
    x = np.zeros((8, 1))
    x[0, 0] = a
    y, _ = equiv_gelu(x)
    s = 2.0 * np.sqrt(2.0)
    assert abs(y[0, 0] - s * gelu_scalar(a / s)) < 1e-14
    assert np.max(np.abs(y[1:])) < 1e-14


def test_equiv_gelu_matches_dense_conjugation():
    rng = RNG(13)
    x = rng.standard_normal((16, 5))
    y, _ = equiv_gelu(x)
    q = group.fourier_matrix()
    # one iso copy = one channel per sub-block, strided across the layout
    blocks = x.reshape(8, 2, 5)
    ref = np.empty_like(blocks)
    for copy in range(2):
        ref[:, copy, :] = q.T @ gelu_scalar(q @ blocks[:, copy, :])
    assert np.max(np.abs(y - ref.reshape(16, 5))) < 1e-12


def test_equiv_gelu_equivariance():
    rng = RNG(14)
    x = rng.standard_normal((32, 6))
    channel_residual(lambda t: equiv_gelu(t)[0], x, 1e-12)


def test_gelu_vjps():
    rng = RNG(15)
    x = rng.standard_normal((2, 16, 3))
    for fwd, bwd in ((gelu, gelu_vjp), (equiv_gelu, equiv_gelu_vjp)):
        y, cache = fwd(x)
        ybar = rng.standard_normal(y.shape)
        xbar = bwd(cache, ybar)
        for _ in range(5):
            d = rng.standard_normal(x.shape)
            want = fd_directional(
                lambda t: float((fwd(t)[0] * ybar).sum()), x, d)
            assert rel_close(float((xbar * d).sum()), want)


# ---------------------------------------------------------------------------
# attention


def test_head_split_round_trip():
    rng = RNG(16)
    x = rng.standard_normal((2, 32, 5))
    for octic in (True, False):
        h = split_heads(x, 2, octic)
        assert h.shape == (2, 2, 16, 5)
        assert_allclose(merge_heads(h, octic), x, atol=0)
    # octic split hands each head whole iso copies: sub-block structure intact
    h = split_heads(x, 2, True)
    assert_allclose(h[0, 0].reshape(8, 2, 5), x[0].reshape(8, 4, 5)[:, :2], atol=0)


def test_attention_single_token():
    rng = RNG(17)
    ws = [init_equiv_linear(rng, 16, 16) for _ in range(4)]
    x = rng.standard_normal((16, 1))
    y, _ = attention(x, *ws, heads=1)
    v, _ = equiv_linear(ws[2], x)
    ref, _ = equiv_linear(ws[3], v)
    assert np.max(np.abs(y - ref)) < 1e-13


def test_attention_logit_invariance():
    rng = RNG(18)
    geom = GridGeometry(3, has_cls=True)
    wq = init_equiv_linear(rng, 16, 16)
    wk = init_equiv_linear(rng, 16, 16)
    x = rng.standard_normal((16, geom.num_tokens))
    scale = np.sqrt(16.0)

    def logits_of(t):
        q, _ = equiv_linear(wq, t)
        k, _ = equiv_linear(wk, t)
        return attention_logits(split_heads(q, 2, True),
                                split_heads(k, 2, True), scale)

    base = logits_of(x)
    for g in range(8):
        acted = steerable.apply_token_permutation(
            g, steerable.channel_action(g, x), geom)
        perm = steerable.token_permutation(g, geom)
        assert np.max(np.abs(logits_of(acted) - base[:, perm][:, :, perm])) < 1e-12


def test_attention_full_equivariance():
    rng = RNG(19)
    geom = GridGeometry(4, has_cls=True)
    ws = [init_equiv_linear(rng, 32, 32) for _ in range(4)]
    x = SteerableFeature(
        rng.standard_normal((32, geom.num_tokens)), steerable.ISO_MULTIPLE, geom)

    def f(feat):
        return SteerableFeature(
            attention(feat.data, *ws, heads=2)[0], feat.channel_rep, feat.geometry)

    assert steerable.equivariance_residual(f, x) < 1e-11


def test_attention_vjp():
    rng = RNG(20)
    for octic in (True, False):
        init = init_equiv_linear if octic else init_dense
        ws = [init(rng, 16, 16) for _ in range(4)]
        x = rng.standard_normal((2, 16, 5))
        y, cache = attention(x, *ws, heads=2)
        ybar = rng.standard_normal(y.shape)
        xbar, *wbars = attention_vjp(*ws, cache, ybar)
        for _ in range(10):
            d = rng.standard_normal(x.shape)
            want = fd_directional(
                lambda t: float((attention(t, *ws, heads=2)[0] * ybar).sum()), x, d)
            assert rel_close(float((xbar * d).sum()), want)
        # spot-check one weight gradient per projection
        for i, field in ((0, "w_a1"), (2, "w_e")) if octic else ((1, "w"), (3, "w")):
            warr = getattr(ws[i], field)
            d = rng.standard_normal(warr.shape)

            def loss(a, i=i, field=field):
                ws2 = list(ws)
                ws2[i] = dataclasses.replace(ws[i], **{field: a})
                return float((attention(x, *ws2, heads=2)[0] * ybar).sum())

            got = float((getattr(wbars[i], field) * d).sum())
            assert rel_close(got, fd_directional(loss, warr, d))


def test_attention_rejects_bad_heads():
    rng = RNG(21)
    ws = [init_equiv_linear(rng, 16, 16) for _ in range(4)]
    with pytest.raises(ValueError):
        attention(np.zeros((16, 4)), *ws, heads=3)


# ---------------------------------------------------------------------------
# patch embedding and token assembly


def test_patch_embed_zero_image_and_constraint():
    rng = RNG(22)
    w = init_patch_embed(rng, 16, 4, octic=True)
    y, _ = patch_embed(w, np.zeros((3, 16, 16)))
    assert np.max(np.abs(y)) == 0.0
    rin, rout = steerable.Rep.patch(4), steerable.Rep.iso_multiple(16)
    for g in range(8):
        resid = w.kernel @ rin.matrix(g) - rout.matrix(g) @ w.kernel
        assert np.max(np.abs(resid)) < 1e-12


def test_patch_embed_equivariance():
    rng = RNG(23)
    w = init_patch_embed(rng, 16, 4, octic=True)
    img = rng.standard_normal((3, 16, 16))
    geom = GridGeometry(4)
    base, _ = patch_embed(w, img)
    for g in range(8):
        lhs, _ = patch_embed(w, steerable.apply_image_action(g, img))
        rhs = steerable.apply_token_permutation(
            g, steerable.channel_action(g, base), geom)
        assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_patch_embed_vjp():
    rng = RNG(24)
    w = init_patch_embed(rng, 8, 2, octic=False)
    w.bias[:] = rng.standard_normal(8)
    img = rng.standard_normal((2, 3, 8, 8))
    y, cache = patch_embed(w, img)
    ybar = rng.standard_normal(y.shape)
    imgbar, wbar = patch_embed_vjp(w, cache, ybar)
    d = rng.standard_normal(img.shape)
    want = fd_directional(
        lambda t: float((patch_embed(w, t)[0] * ybar).sum()), img, d)
    assert rel_close(float((imgbar * d).sum()), want)
    dk = rng.standard_normal(w.kernel.shape)

    def loss_k(kern):
        return float((patch_embed(
            dataclasses.replace(w, kernel=kern), img)[0] * ybar).sum())

    assert rel_close(float((wbar.kernel * dk).sum()), fd_directional(loss_k, w.kernel, dk))


def test_add_posenc_cls_zero_and_guard():
    rng = RNG(25)
    x = rng.standard_normal((16, 16))
    y, _ = add_posenc_cls(x, np.zeros((16, 16)), np.zeros(16), octic=True)
    assert y.shape == (16, 17)
    assert np.max(np.abs(y[:, -1])) == 0.0
    assert_allclose(y[:, :16], x, atol=0)
    bad_cls = np.zeros(16)
    bad_cls[5] = 1.0  # B1 channel
    with pytest.raises(ValueError):
        add_posenc_cls(x, np.zeros((16, 16)), bad_cls, octic=True)


def test_embed_posenc_cls_composite_equivariance():
    rng = RNG(26)
    w = init_patch_embed(rng, 16, 4, octic=True)
    geom_grid = GridGeometry(4)
    geom = GridGeometry(4, has_cls=True)
    posenc = steerable.reynolds_project_posenc(
        rng.uniform(-0.02, 0.02, (16, 16)), geom_grid)
    cls_token = steerable.reynolds_project_token(rng.uniform(-0.02, 0.02, 16))
    img = rng.standard_normal((3, 16, 16))

    base, _ = add_posenc_cls(patch_embed(w, img)[0], posenc, cls_token, octic=True)
    for g in range(8):
        lhs, _ = add_posenc_cls(
            patch_embed(w, steerable.apply_image_action(g, img))[0],
            posenc, cls_token, octic=True)
        rhs = steerable.apply_token_permutation(
            g, steerable.channel_action(g, base), geom)
        assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_add_posenc_cls_vjp():
    rng = RNG(27)
    x = rng.standard_normal((2, 8, 4))
    posenc = np.zeros((8, 4))
    cls_token = np.zeros(8)
    y, cache = add_posenc_cls(x, posenc, cls_token, octic=False)
    ybar = rng.standard_normal(y.shape)
    xbar, pbar, clsbar = add_posenc_cls_vjp(cache, ybar)
    assert_allclose(xbar, ybar[..., :-1], atol=0)
    assert_allclose(pbar, ybar[..., :-1].sum(axis=0), atol=0)
    assert_allclose(clsbar, ybar[..., -1].sum(axis=0), atol=0)


# ---------------------------------------------------------------------------
# full blocks


def test_octic_block_equivariance():
    rng = RNG(28)
    p = init_octic_block(rng, 32, heads=2)
    geom = GridGeometry(4, has_cls=True)
    x = SteerableFeature(
        rng.standard_normal((32, geom.num_tokens)), steerable.ISO_MULTIPLE, geom)

    def f(feat):
        return SteerableFeature(
            block_forward(p, feat.data)[0], feat.channel_rep, feat.geometry)

    assert steerable.equivariance_residual(f, x) < 1e-11


def test_block_vjp_both_families():
    rng = RNG(29)
    for init, channels in ((init_octic_block, 16), (init_standard_block, 12)):
        p = init(rng, channels, heads=2)
        x = rng.standard_normal((2, channels, 5))
        y, cache = block_forward(p, x)
        assert y.shape == x.shape
        ybar = rng.standard_normal(y.shape)
        xbar, grads = block_vjp(p, cache, ybar)
        for _ in range(10):
            d = rng.standard_normal(x.shape)
            want = fd_directional(
                lambda t: float((block_forward(p, t)[0] * ybar).sum()), x, d)
            assert rel_close(float((xbar * d).sum()), want)
        # one weight direction deep inside the MLP
        field = "w_e" if init is init_octic_block else "w"
        warr = getattr(p.w_up, field)
        d = rng.standard_normal(warr.shape)

        def loss(a):
            p2 = dataclasses.replace(
                p, w_up=dataclasses.replace(p.w_up, **{field: a}))
            return float((block_forward(p2, x)[0] * ybar).sum())

        got = float((getattr(grads.w_up, field) * d).sum())
        assert rel_close(got, fd_directional(loss, warr, d))


def test_block_residual_passthrough():
    rng = RNG(30)
    p = init_octic_block(rng, 16, heads=1)
    zero = dataclasses.replace(
        p,
        wo=dataclasses.replace(
            p.wo, **{f: np.zeros_like(getattr(p.wo, f))
                     for f in ("w_a1", "w_a2", "w_b1", "w_b2", "w_e", "bias")}),
        w_down=dataclasses.replace(
            p.w_down, **{f: np.zeros_like(getattr(p.w_down, f))
                         for f in ("w_a1", "w_a2", "w_b1", "w_b2", "w_e", "bias")}))
    x = rng.standard_normal((16, 4))
    y, _ = block_forward(zero, x)
    assert_allclose(y, x, atol=0)
