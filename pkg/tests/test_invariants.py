"""Invariance, dimensions, and VJPs of the six invariantization maps."""
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from octic import invariants, steerable
from octic.invariants import (
    POLYNOMIAL_GENERATORS,
    TRIPLE_CORRELATION_GENERATORS,
    InvariantHeadParams,
    apply_psi,
    eval_generators,
    init_invariant_head,
    invariant_head,
    invariant_head_vjp,
    psi_canonise,
    psi_linear,
    psi_max_filter,
    psi_output_dim,
    psi_poly,
    psi_power,
    psi_triple,
)
from octic.steerable import GridGeometry, channel_action

RNG = lambda s: np.random.default_rng(s)


def rel_close(a, b, rtol=1e-6, atol=1e-9):
    return math.isclose(a, b, rel_tol=rtol, abs_tol=atol)


def fd_directional(f, x, d, h=1e-6):
    return (f(x + h * d) - f(x - h * d)) / (2.0 * h)


def test_generator_counts_and_dims():
    assert len(TRIPLE_CORRELATION_GENERATORS) == 15
    assert len(POLYNOMIAL_GENERATORS) == 32
    assert psi_output_dim("linear", 16) == 2
    assert psi_output_dim("power", 16) == 12
    assert psi_output_dim("triple", 16) == 30
    assert psi_output_dim("poly", 16) == 64
    assert psi_output_dim("maxfilter", 16) == 32
    assert psi_output_dim("canon", 16) == 16


def test_psi_linear_examples():
    x = np.zeros((16, 2))
    x[:2] = 3.0                       # A1 channels
    feats, _ = psi_linear(x)
    assert_allclose(feats, 3.0, atol=0)
    x2 = np.zeros((16, 2))
    x2[4:6] = 1.0                     # B1 channels
    assert np.max(np.abs(psi_linear(x2)[0])) == 0.0
    rng = RNG(0)
    x3 = rng.standard_normal((16, 4))
    for g in range(8):
        assert np.array_equal(psi_linear(channel_action(g, x3))[0],
                              psi_linear(x3)[0])


def test_psi_power_doublet_example():
    x = np.zeros((8, 1))
    x[4, 0], x[5, 0] = 3.0, 4.0       # first E doublet
    feats, _ = psi_power(x)
    assert feats.shape == (6, 1)
    assert feats[4, 0] == 5.0
    assert np.max(np.abs(np.delete(feats, 4, axis=0))) == 0.0
    assert np.max(np.abs(psi_power(np.zeros((8, 1)))[0])) == 0.0


def test_psi_power_invariance():
    rng = RNG(1)
    for _ in range(20):
        x = rng.standard_normal((24, 3))
        base, _ = psi_power(x)
        for g in range(8):
            acted, _ = psi_power(channel_action(g, x))
            assert np.max(np.abs(acted - base)) < 1e-13


def test_psi_triple_pure_a1():
    x = np.zeros((8, 1))
    x[0, 0] = 2.0
    feats, _ = psi_triple(x)
    assert feats.shape == (15, 1)
    assert feats[0, 0] == 8.0
    assert np.max(np.abs(feats[1:])) == 0.0


def test_psi_triple_homogeneity():
    rng = RNG(2)
    x = rng.standard_normal((16, 3))
    base, _ = psi_triple(x)
    for t in (0.5, -1.3, 2.0):
        scaled, _ = psi_triple(t * x)
        assert np.max(np.abs(scaled - t ** 3 * base)) < 1e-12


def test_psi_poly_pure_a1():
    x = np.zeros((8, 2))
    x[0] = 1.5
    feats, _ = psi_poly(x)
    assert_allclose(feats[0], 1.5, atol=0)
    assert np.max(np.abs(feats[1:])) == 0.0


def test_psi_poly_generator_two_on_second_doublet():
    x = np.zeros((8, 1))
    x[6, 0], x[7, 0] = 1.0, 2.0
    feats, _ = psi_poly(x)
    assert feats[1, 0] == 5.0


@pytest.mark.parametrize("gi", range(32))
def test_each_polynomial_generator_invariant(gi):
    rng = RNG(100 + gi)
    gens = (POLYNOMIAL_GENERATORS[gi],)
    for _ in range(5):
        xb = rng.standard_normal((8, 2, 3))
        base = eval_generators(gens, xb)
        for g in range(8):
            actedb = channel_action(g, xb.reshape(16, 3)).reshape(8, 2, 3)
            acted = eval_generators(gens, actedb)
            assert np.max(np.abs(acted - base)) < 1e-12


@pytest.mark.parametrize("gi", range(15))
def test_each_triple_generator_invariant(gi):
    rng = RNG(200 + gi)
    gens = (TRIPLE_CORRELATION_GENERATORS[gi],)
    xb = rng.standard_normal((8, 3, 2))
    base = eval_generators(gens, xb)
    for g in range(8):
        actedb = channel_action(g, xb.reshape(24, 2)).reshape(8, 3, 2)
        acted = eval_generators(gens, actedb)
        assert np.max(np.abs(acted - base)) < 1e-12


def test_psi_max_filter_examples():
    rng = RNG(3)
    x = rng.standard_normal((16, 1))
    templates = np.broadcast_to(x[:, 0], (32, 16)).copy()
    feats, _ = psi_max_filter(templates, x)
    assert_allclose(feats[:, 0], float(x[:, 0] @ x[:, 0]), rtol=1e-13)

    templates = rng.standard_normal((32, 16))
    xs = rng.standard_normal((2, 16, 3))
    base, _ = psi_max_filter(templates, xs)
    for g in range(8):
        acted, _ = psi_max_filter(templates, channel_action(g, xs))
        assert np.array_equal(acted, base)

    pure = np.zeros((16, 1))
    pure[:2] = 1.0
    feats, (acted, best, _) = psi_max_filter(templates, pure)
    assert_allclose(feats[:, 0], templates[:, :2].sum(axis=1), atol=1e-15)


def test_psi_canonise_examples():
    rng = RNG(4)
    x = rng.standard_normal((16, 1))
    feats, best = psi_canonise(x[:, 0], x)
    assert best[0] == 0
    assert np.array_equal(feats, x)

    ref = rng.standard_normal(16)
    xs = rng.standard_normal((16, 5))
    base, _ = psi_canonise(ref, xs)
    for g in range(8):
        acted, _ = psi_canonise(ref, channel_action(g, xs))
        assert np.array_equal(acted, base)

    pure = np.zeros((16, 2))
    pure[:2] = 0.7
    feats, best = psi_canonise(ref, pure)
    assert np.all(best == 0)
    assert np.array_equal(feats, pure)


@pytest.mark.parametrize("method", invariants.METHODS)
def test_invariant_head_composition(method):
    rng = RNG(5)
    geom = GridGeometry(2, has_cls=True)
    p = init_invariant_head(rng, 16, method)
    x = rng.standard_normal((16, geom.num_tokens))
    base, _ = invariant_head(p, x)
    assert base.shape == (16, geom.num_tokens)
    for g in range(8):
        acted_in = steerable.apply_token_permutation(
            g, channel_action(g, x), geom)
        acted, _ = invariant_head(p, acted_in)
        perm = steerable.token_permutation(g, geom)
        assert np.max(np.abs(acted - base[:, perm])) < 1e-11


def test_invariant_head_zero_mlp():
    rng = RNG(6)
    p = init_invariant_head(rng, 16, "power")
    p.w1.w[:] = 0.0
    p.w2.w[:] = 0.0
    y, _ = invariant_head(p, rng.standard_normal((16, 3)))
    assert np.max(np.abs(y)) == 0.0


@pytest.mark.parametrize("method", invariants.METHODS)
def test_invariant_head_vjp(method):
    rng = RNG(7)
    p = init_invariant_head(rng, 16, method)
    x = rng.standard_normal((2, 16, 3))
    y, cache = invariant_head(p, x)
    ybar = rng.standard_normal(y.shape)
    xbar, grads = invariant_head_vjp(p, cache, ybar)
    for _ in range(5):
        d = rng.standard_normal(x.shape)
        want = fd_directional(
            lambda t: float((invariant_head(p, t)[0] * ybar).sum()), x, d)
        assert rel_close(float((xbar * d).sum()), want)
    dw = rng.standard_normal(p.w1.w.shape)

    def loss_w1(a):
        p2 = InvariantHeadParams(
            p.method, p.templates,
            type(p.w1)(a, p.w1.bias), p.w2)
        return float((invariant_head(p2, x)[0] * ybar).sum())

    assert rel_close(float((grads.w1.w * dw).sum()), fd_directional(loss_w1, p.w1.w, dw))
    if method == "maxfilter":
        dt = rng.standard_normal(p.templates.shape)

        def loss_t(t):
            p2 = InvariantHeadParams(p.method, t, p.w1, p.w2)
            return float((invariant_head(p2, x)[0] * ybar).sum())

        assert rel_close(float((grads.templates * dt).sum()),
                         fd_directional(loss_t, p.templates, dt))
    if method == "canon":
        assert not np.any(grads.templates)


def test_init_rejects_unknown_method():
    with pytest.raises(ValueError):
        init_invariant_head(RNG(8), 16, "fourier")
