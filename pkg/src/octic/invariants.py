"""Invariantization maps from isotypic tokens to invariant features.

Six methods, each collapsing the channel action to quantities unchanged by
every group element, plus a small unconstrained MLP head. Channel variables
inside one iso copy are indexed by sub-block: 0..3 the one-dimensional
irreps A1, A2, B1, B2; 4..7 the two doublet components (E11, E12) of the
first E copy and (E21, E22) of the second.

Polynomial generators are stored as sums of monomials: each generator is a
tuple of (coefficient, ((variable, power), ...)) terms evaluated channelwise.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import group, layers, steerable

# degree-3 homogeneous invariants (triple correlation), 15 generators
TRIPLE_CORRELATION_GENERATORS = (
    ((1, ((0, 3),)),),
    ((1, ((0, 1), (6, 2))), (1, ((0, 1), (7, 2)))),
    ((1, ((0, 1), (4, 1), (6, 1))), (1, ((0, 1), (5, 1), (7, 1)))),
    ((1, ((0, 1), (4, 2))), (1, ((0, 1), (5, 2)))),
    ((1, ((0, 1), (3, 2))),),
    ((1, ((0, 1), (2, 2))),),
    ((1, ((0, 1), (1, 2))),),
    ((1, ((3, 1), (6, 1), (7, 1))),),
    ((1, ((3, 1), (5, 1), (6, 1))), (1, ((3, 1), (4, 1), (7, 1)))),
    ((1, ((3, 1), (4, 1), (5, 1))),),
    ((1, ((2, 1), (6, 2))), (-1, ((2, 1), (7, 2)))),
    ((1, ((2, 1), (4, 1), (6, 1))), (-1, ((2, 1), (5, 1), (7, 1)))),
    ((1, ((2, 1), (4, 2))), (-1, ((2, 1), (5, 2)))),
    ((1, ((1, 1), (5, 1), (6, 1))), (-1, ((1, 1), (4, 1), (7, 1)))),
    ((1, ((1, 1), (2, 1), (3, 1))),),
)

# generating set of the full invariant ring, 32 generators up to degree 4
POLYNOMIAL_GENERATORS = (
    ((1, ((0, 1),)),),
    ((1, ((6, 2),)), (1, ((7, 2),))),
    ((1, ((4, 1), (6, 1))), (1, ((5, 1), (7, 1)))),
    ((1, ((4, 2),)), (1, ((5, 2),))),
    ((1, ((3, 2),)),),
    ((1, ((2, 2),)),),
    ((1, ((1, 2),)),),
) + TRIPLE_CORRELATION_GENERATORS[7:15] + (
    ((1, ((6, 4),)), (1, ((7, 4),))),
    ((1, ((4, 1), (6, 3))), (1, ((5, 1), (7, 3)))),
    ((1, ((4, 2), (6, 2))), (1, ((5, 2), (7, 2)))),
    ((1, ((4, 3), (6, 1))), (1, ((5, 3), (7, 1)))),
    ((1, ((4, 4),)), (1, ((5, 4),))),
    ((1, ((2, 1), (3, 1), (5, 1), (6, 1))), (-1, ((2, 1), (3, 1), (4, 1), (7, 1)))),
    ((1, ((1, 1), (3, 1), (6, 2))), (-1, ((1, 1), (3, 1), (7, 2)))),
    ((1, ((1, 1), (3, 1), (4, 1), (6, 1))), (-1, ((1, 1), (3, 1), (5, 1), (7, 1)))),
    ((1, ((1, 1), (3, 1), (4, 2))), (-1, ((1, 1), (3, 1), (5, 2)))),
    ((1, ((1, 1), (2, 1), (6, 1), (7, 1))),),
    ((1, ((1, 1), (2, 1), (5, 1), (6, 1))), (1, ((1, 1), (2, 1), (4, 1), (7, 1)))),
    ((1, ((1, 1), (2, 1), (4, 1), (5, 1))),),
    ((1, ((1, 1), (6, 3), (7, 1))), (-1, ((1, 1), (6, 1), (7, 3)))),
    ((1, ((1, 1), (5, 1), (6, 3))), (-1, ((1, 1), (4, 1), (7, 3)))),
    ((1, ((1, 1), (4, 1), (5, 1), (6, 2))), (-1, ((1, 1), (4, 1), (5, 1), (7, 2)))),
    ((1, ((1, 1), (4, 2), (5, 1), (6, 1))), (-1, ((1, 1), (4, 1), (5, 2), (7, 1)))),
    ((1, ((1, 1), (4, 3), (5, 1))), (-1, ((1, 1), (4, 1), (5, 3)))),
)

METHODS = ("linear", "power", "triple", "poly", "maxfilter", "canon")


def psi_output_dim(method: str, channels: int) -> int:
    c8 = channels // 8
    return {"linear": c8, "power": 6 * c8, "triple": 15 * c8,
            "poly": 32 * c8, "maxfilter": 2 * channels,
            "canon": channels}[method]


def _blocks(x):
    c = x.shape[-2]
    return x.reshape(x.shape[:-2] + (8, c // 8, x.shape[-1]))


def eval_generators(gens, xb):
    """Evaluate each generator channelwise; returns (..., K, C/8, L)."""
    outs = []
    for terms in gens:
        acc = np.zeros(xb.shape[:-3] + xb.shape[-2:])
        for coeff, expo in terms:
            t = float(coeff)
            for v, e in expo:
                t = t * xb[..., v, :, :] ** e
            acc = acc + t
        outs.append(acc)
    return np.stack(outs, axis=-3)


def eval_generators_vjp(gens, xb, obar):
    xbar = np.zeros_like(xb)
    for gi, terms in enumerate(gens):
        ob = obar[..., gi, :, :]
        for coeff, expo in terms:
            for v, e in expo:
                t = float(coeff * e) * xb[..., v, :, :] ** (e - 1)
                for w, ew in expo:
                    if w != v:
                        t = t * xb[..., w, :, :] ** ew
                xbar[..., v, :, :] += ob * t
    return xbar


# ---------------------------------------------------------------------------
# the six maps; each forward returns (features, cache)


def psi_linear(x):
    return _blocks(x)[..., 0, :, :], x.shape


def psi_linear_vjp(cache, obar):
    shape = cache
    xbar = np.zeros(shape)
    _blocks(xbar)[..., 0, :, :] = obar
    return xbar


def psi_power(x):
    xb = _blocks(x)
    r1 = np.hypot(xb[..., 4, :, :], xb[..., 5, :, :])
    r2 = np.hypot(xb[..., 6, :, :], xb[..., 7, :, :])
    feats = np.stack([xb[..., 0, :, :],
                      np.abs(xb[..., 1, :, :]),
                      np.abs(xb[..., 2, :, :]),
                      np.abs(xb[..., 3, :, :]),
                      r1, r2], axis=-3)
    flat = feats.reshape(x.shape[:-2] + (-1, x.shape[-1]))
    return flat, (xb, r1, r2)


def psi_power_vjp(cache, obar):
    xb, r1, r2 = cache
    ob = obar.reshape(xb.shape[:-3] + (6,) + xb.shape[-2:])
    xbar = np.zeros_like(xb)
    xbar[..., 0, :, :] = ob[..., 0, :, :]
    for i in range(1, 4):
        xbar[..., i, :, :] = np.sign(xb[..., i, :, :]) * ob[..., i, :, :]
    # radial direction; subgradient 0 at the origin
    for (a, b), r, k in (((4, 5), r1, 4), ((6, 7), r2, 5)):
        safe = np.where(r > 0.0, r, 1.0)
        scale = np.where(r > 0.0, ob[..., k, :, :] / safe, 0.0)
        xbar[..., a, :, :] = scale * xb[..., a, :, :]
        xbar[..., b, :, :] = scale * xb[..., b, :, :]
    return xbar.reshape(obar.shape[:-2] + (8 * xb.shape[-2],) + obar.shape[-1:])


def psi_triple(x):
    xb = _blocks(x)
    feats = eval_generators(TRIPLE_CORRELATION_GENERATORS, xb)
    return feats.reshape(x.shape[:-2] + (-1, x.shape[-1])), xb


def psi_triple_vjp(cache, obar):
    xb = cache
    ob = obar.reshape(xb.shape[:-3] + (15,) + xb.shape[-2:])
    xbar = eval_generators_vjp(TRIPLE_CORRELATION_GENERATORS, xb, ob)
    return xbar.reshape(obar.shape[:-2] + (8 * xb.shape[-2],) + obar.shape[-1:])


def psi_poly(x):
    xb = _blocks(x)
    feats = eval_generators(POLYNOMIAL_GENERATORS, xb)
    return feats.reshape(x.shape[:-2] + (-1, x.shape[-1])), xb


def psi_poly_vjp(cache, obar):
    xb = cache
    ob = obar.reshape(xb.shape[:-3] + (32,) + xb.shape[-2:])
    xbar = eval_generators_vjp(POLYNOMIAL_GENERATORS, xb, ob)
    return xbar.reshape(obar.shape[:-2] + (8 * xb.shape[-2],) + obar.shape[-1:])


def _orbit_scores(templates, x):
    """acted[g] = R_g x; scores[..., k, l, g] = <template_k, acted[g][:, l]>."""
    acted = np.stack([steerable.channel_action(g, x) for g in range(8)])
    scores = np.einsum("kc,g...cl->...klg", np.atleast_2d(templates), acted)
    return acted, scores


def psi_max_filter(templates, x):
    acted, scores = _orbit_scores(templates, x)
    best = scores.argmax(axis=-1)
    feats = np.take_along_axis(scores, best[..., None], axis=-1)[..., 0]
    return feats, (acted, best, x.shape)


def psi_max_filter_vjp(templates, cache, obar):
    acted, best, xshape = cache
    xbar = np.zeros(xshape)
    tbar = np.zeros_like(templates)
    for g in range(8):
        m = np.where(best == g, obar, 0.0)          # (..., 2C, L)
        if not np.any(m):
            continue
        # route through the element that attained the max
        contrib = np.einsum("kc,...kl->...cl", templates, m)
        xbar += steerable.channel_action(group.inverse(g), contrib)
        tbar += np.einsum("bkl,bcl->kc",
                          m.reshape((-1,) + m.shape[-2:]),
                          acted[g].reshape((-1,) + acted[g].shape[-2:]))
    return xbar, tbar


def psi_canonise(reference, x):
    acted, scores = _orbit_scores(reference, x)
    best = scores[..., 0, :, :].argmax(axis=-1)      # (..., L), ties pick e
    acted_last = np.moveaxis(acted, 0, -1)           # (..., C, L, 8)
    feats = np.take_along_axis(
        acted_last, best[..., None, :, None], axis=-1)[..., 0]
    return feats, best


def psi_canonise_vjp(cache, obar):
    best = cache
    xbar = np.zeros_like(obar)
    for g in range(8):
        m = np.where(best[..., None, :] == g, obar, 0.0)
        if np.any(m):
            xbar += steerable.channel_action(group.inverse(g), m)
    # the reference token gets no gradient almost everywhere
    return xbar, np.zeros(obar.shape[-2])


# ---------------------------------------------------------------------------
# invariant head


@dataclass
class InvariantHeadParams:
    method: str
    templates: Optional[np.ndarray]
    w1: layers.DenseWeights
    w2: layers.DenseWeights


def init_invariant_head(rng, channels, method) -> InvariantHeadParams:
    if method not in METHODS:
        raise ValueError(f"unknown invariant method {method!r}")
    if method == "maxfilter":
        templates = rng.uniform(-1, 1, (2 * channels, channels)) / np.sqrt(channels)
    elif method == "canon":
        templates = rng.uniform(-1, 1, channels) / np.sqrt(channels)
    else:
        templates = None
    return InvariantHeadParams(
        method, templates,
        layers.init_dense(rng, psi_output_dim(method, channels), channels),
        layers.init_dense(rng, channels, channels))


def apply_psi(p: InvariantHeadParams, x):
    if p.method == "linear":
        return psi_linear(x)
    if p.method == "power":
        return psi_power(x)
    if p.method == "triple":
        return psi_triple(x)
    if p.method == "poly":
        return psi_poly(x)
    if p.method == "maxfilter":
        return psi_max_filter(p.templates, x)
    if p.method == "canon":
        return psi_canonise(p.templates, x)
    raise ValueError(f"unknown invariant method {p.method!r}")


def apply_psi_vjp(p: InvariantHeadParams, cache, obar):
    """Returns (xbar, templates_grad_or_None)."""
    if p.method == "linear":
        return psi_linear_vjp(cache, obar), None
    if p.method == "power":
        return psi_power_vjp(cache, obar), None
    if p.method == "triple":
        return psi_triple_vjp(cache, obar), None
    if p.method == "poly":
        return psi_poly_vjp(cache, obar), None
    if p.method == "maxfilter":
        return psi_max_filter_vjp(p.templates, cache, obar)
    xbar, tbar = psi_canonise_vjp(cache, obar)
    return xbar, tbar


def invariant_head(p: InvariantHeadParams, x):
    feats, c_psi = apply_psi(p, x)
    h, c1 = layers.dense_linear(p.w1, feats)
    a, c_act = layers.gelu(h)
    y, c2 = layers.dense_linear(p.w2, a)
    return y, (c_psi, c1, c_act, c2)


def invariant_head_vjp(p: InvariantHeadParams, cache, ybar):
    c_psi, c1, c_act, c2 = cache
    abar, w2bar = layers.dense_linear_vjp(p.w2, c2, ybar)
    hbar = layers.gelu_vjp(c_act, abar)
    fbar, w1bar = layers.dense_linear_vjp(p.w1, c1, hbar)
    xbar, tbar = apply_psi_vjp(p, c_psi, fbar)
    return xbar, InvariantHeadParams(p.method, tbar, w1bar, w2bar)
