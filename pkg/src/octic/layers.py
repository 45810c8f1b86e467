"""Transformer building blocks, octic and plain, with hand-written VJPs.

Features are arrays of shape (..., C, L): channel by token, arbitrary leading
batch axes. Octic features use the contiguous isotypic channel layout of
group.BLOCK_NAMES, C/8 channels per sub-block. Every forward returns
(output, cache); the matching *_vjp consumes the cache and a cotangent and
returns cotangents for inputs and parameters. All math is f64.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import erf

from . import group, steerable

LN_EPS = 1e-6
CLS_GUARD_TOL = 1e-10
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# gain slot per iso sub-block: the two components of each E copy share a gain
_GAIN_OF_BLOCK = np.array([0, 1, 2, 3, 4, 4, 5, 5])


def _flat2(x):
    """Collapse leading batch axes, keeping the trailing (C, L) pair."""
    return x.reshape(-1, x.shape[-2], x.shape[-1])


def _outer_cl(ybar, x):
    """Sum of ybar[..., :, l] x[..., :, l]^T over batch axes and tokens."""
    return np.einsum("bil,bjl->ij", _flat2(ybar), _flat2(x))


# ---------------------------------------------------------------------------
# linear maps


@dataclass
class DenseWeights:
    w: np.ndarray
    bias: Optional[np.ndarray] = None


@dataclass
class EquivLinearWeights:
    """Block-diagonal map in the isotypic basis.

    Four square-ish blocks act on the one-dimensional irrep channels; w_e
    mixes the two E copies while acting identically on both components of
    each doublet, so it is applied once to the stacked (E11, E21) channels
    and once to (E12, E22).
    """

    w_a1: np.ndarray
    w_a2: np.ndarray
    w_b1: np.ndarray
    w_b2: np.ndarray
    w_e: np.ndarray
    bias: Optional[np.ndarray] = None

    @property
    def c_in(self) -> int:
        return 8 * self.w_a1.shape[1]

    @property
    def c_out(self) -> int:
        return 8 * self.w_a1.shape[0]


def init_dense(rng, c_in, c_out, bias=True) -> DenseWeights:
    bound = 1.0 / np.sqrt(c_in)
    w = rng.uniform(-bound, bound, size=(c_out, c_in))
    return DenseWeights(w, np.zeros(c_out) if bias else None)


def init_equiv_linear(rng, c_in, c_out, bias=True) -> EquivLinearWeights:
    if c_in % 8 or c_out % 8:
        raise ValueError("channel counts must be divisible by 8")
    bound = 1.0 / np.sqrt(c_in)
    ci8, co8 = c_in // 8, c_out // 8

    def draw(rows, cols):
        return rng.uniform(-bound, bound, size=(rows, cols))

    return EquivLinearWeights(
        draw(co8, ci8), draw(co8, ci8), draw(co8, ci8), draw(co8, ci8),
        draw(2 * co8, 2 * ci8),
        np.zeros(co8) if bias else None)


def dense_linear(w: DenseWeights, x):
    y = np.einsum("ij,...jl->...il", w.w, x)
    if w.bias is not None:
        y = y + w.bias[:, None]
    return y, x


def dense_linear_vjp(w: DenseWeights, cache, ybar):
    x = cache
    xbar = np.einsum("ji,...jl->...il", w.w, ybar)
    wbar = _outer_cl(ybar, x)
    bbar = None if w.bias is None else _flat2(ybar).sum(axis=(0, 2))
    return xbar, DenseWeights(wbar, bbar)


def _iso_blocks(x):
    c = x.shape[-2]
    return x.reshape(x.shape[:-2] + (8, c // 8, x.shape[-1]))


def equiv_linear(w: EquivLinearWeights, x):
    if x.shape[-2] != w.c_in:
        raise ValueError(f"expected {w.c_in} channels, got {x.shape[-2]}")
    xb = _iso_blocks(x)
    co8 = w.w_a1.shape[0]
    outs = [np.einsum("ij,...jl->...il", m, xb[..., i, :, :])
            for i, m in enumerate((w.w_a1, w.w_a2, w.w_b1, w.w_b2))]
    if w.bias is not None:
        outs[0] = outs[0] + w.bias[:, None]
    # first components of both E copies share w_e with the second components
    u1 = np.concatenate([xb[..., 4, :, :], xb[..., 6, :, :]], axis=-2)
    u2 = np.concatenate([xb[..., 5, :, :], xb[..., 7, :, :]], axis=-2)
    v1 = np.einsum("ij,...jl->...il", w.w_e, u1)
    v2 = np.einsum("ij,...jl->...il", w.w_e, u2)
    yb = np.stack(
        outs + [v1[..., :co8, :], v2[..., :co8, :],
                v1[..., co8:, :], v2[..., co8:, :]], axis=-3)
    return yb.reshape(x.shape[:-2] + (w.c_out, x.shape[-1])), (x, u1, u2)


def equiv_linear_vjp(w: EquivLinearWeights, cache, ybar):
    x, u1, u2 = cache
    xb, yb = _iso_blocks(x), _iso_blocks(ybar)
    ci8 = w.w_a1.shape[1]
    grads, xbar_blocks = [], []
    for i, m in enumerate((w.w_a1, w.w_a2, w.w_b1, w.w_b2)):
        grads.append(_outer_cl(yb[..., i, :, :], xb[..., i, :, :]))
        xbar_blocks.append(np.einsum("ji,...jl->...il", m, yb[..., i, :, :]))
    v1bar = np.concatenate([yb[..., 4, :, :], yb[..., 6, :, :]], axis=-2)
    v2bar = np.concatenate([yb[..., 5, :, :], yb[..., 7, :, :]], axis=-2)
    webar = _outer_cl(v1bar, u1) + _outer_cl(v2bar, u2)
    u1bar = np.einsum("ji,...jl->...il", w.w_e, v1bar)
    u2bar = np.einsum("ji,...jl->...il", w.w_e, v2bar)
    xbar = np.stack(
        xbar_blocks + [u1bar[..., :ci8, :], u2bar[..., :ci8, :],
                       u1bar[..., ci8:, :], u2bar[..., ci8:, :]], axis=-3)
    bbar = None if w.bias is None else _flat2(yb[..., 0, :, :]).sum(axis=(0, 2))
    return xbar.reshape(x.shape), EquivLinearWeights(*grads, webar, bbar)


def assemble_dense(w: EquivLinearWeights) -> np.ndarray:
    """Expand the block parameterization to the equivalent dense matrix."""
    co8, ci8 = w.w_a1.shape
    dense = np.zeros((8 * co8, 8 * ci8))
    for i, m in enumerate((w.w_a1, w.w_a2, w.w_b1, w.w_b2)):
        dense[i * co8:(i + 1) * co8, i * ci8:(i + 1) * ci8] = m
    sub = {(0, 0): w.w_e[:co8, :ci8], (0, 1): w.w_e[:co8, ci8:],
           (1, 0): w.w_e[co8:, :ci8], (1, 1): w.w_e[co8:, ci8:]}
    for (io, jo), a in sub.items():
        for comp in range(2):
            r = (4 + 2 * io + comp) * co8
            c = (4 + 2 * jo + comp) * ci8
            dense[r:r + co8, c:c + ci8] = a
    return dense


def equiv_linear_param_count(c_in, c_out, bias=True) -> int:
    return c_out * c_in // 8 + (c_out // 8 if bias else 0)


# ---------------------------------------------------------------------------
# layer norms


def _rms_normalize(centered):
    c = centered.shape[-2]
    s = np.sqrt((centered * centered).sum(axis=-2, keepdims=True) / c + LN_EPS)
    return centered / s, s


def _rms_center_vjp(cbar_from_above, centered, s):
    """Cotangent through c -> c/s for s = sqrt(mean c^2 + eps)."""
    c = centered.shape[-2]
    dot = (cbar_from_above * centered).sum(axis=-2, keepdims=True)
    return cbar_from_above / s - centered * dot / (c * s ** 3)


def equiv_layernorm(x, gains):
    """Per-sub-block centering, whole-token RMS, 6 shared gains."""
    xb = _iso_blocks(x)
    centered = (xb - xb.mean(axis=-2, keepdims=True)).reshape(x.shape)
    normed, s = _rms_normalize(centered)
    y = _iso_blocks(normed) * gains[_GAIN_OF_BLOCK][:, None, None]
    return y.reshape(x.shape), (centered, s)


def equiv_layernorm_vjp(gains, cache, ybar):
    centered, s = cache
    ybb = _iso_blocks(ybar)
    w = (ybb * gains[_GAIN_OF_BLOCK][:, None, None]).reshape(ybar.shape)
    cbar = _rms_center_vjp(w, centered, s)
    cb = _iso_blocks(cbar)
    xbar = (cb - cb.mean(axis=-2, keepdims=True)).reshape(ybar.shape)
    per_block = (ybb * _iso_blocks(centered / s)).sum(
        axis=tuple(i for i in range(ybb.ndim) if i != ybb.ndim - 3))
    gbar = np.zeros(6)
    np.add.at(gbar, _GAIN_OF_BLOCK, per_block)
    return xbar, gbar


def layernorm(x, gamma, beta):
    centered = x - x.mean(axis=-2, keepdims=True)
    normed, s = _rms_normalize(centered)
    return gamma[:, None] * normed + beta[:, None], (centered, s)


def layernorm_vjp(gamma, cache, ybar):
    centered, s = cache
    w = gamma[:, None] * ybar
    cbar = _rms_center_vjp(w, centered, s)
    xbar = cbar - cbar.mean(axis=-2, keepdims=True)
    reduce_axes = tuple(i for i in range(ybar.ndim) if i != ybar.ndim - 2)
    gammabar = (ybar * centered / s).sum(axis=reduce_axes)
    betabar = ybar.sum(axis=reduce_axes)
    return xbar, gammabar, betabar


# ---------------------------------------------------------------------------
# activations


def gelu_scalar(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_scalar_grad(x):
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def gelu(x):
    return gelu_scalar(x), x


def gelu_vjp(cache, ybar):
    return gelu_scalar_grad(cache) * ybar


def equiv_gelu(x):
    """Pointwise GELU in the regular basis, one transform per iso copy."""
    xb = _iso_blocks(x)
    reg = group.isotypical_to_regular(xb, axis=-3)
    y = group.regular_to_isotypical(gelu_scalar(reg), axis=-3)
    return y.reshape(x.shape), reg


def equiv_gelu_vjp(cache, ybar):
    reg = cache
    yb = _iso_blocks(ybar)
    inner = gelu_scalar_grad(reg) * group.isotypical_to_regular(yb, axis=-3)
    return group.regular_to_isotypical(inner, axis=-3).reshape(ybar.shape)


# ---------------------------------------------------------------------------
# attention


def _linear(w, x):
    if isinstance(w, EquivLinearWeights):
        return equiv_linear(w, x)
    return dense_linear(w, x)


def _linear_vjp(w, cache, ybar):
    if isinstance(w, EquivLinearWeights):
        return equiv_linear_vjp(w, cache, ybar)
    return dense_linear_vjp(w, cache, ybar)


def split_heads(x, heads, octic):
    c = x.shape[-2]
    if octic:
        # heads own whole iso copies: per head all 8 sub-blocks, C/(8H) each
        xb = x.reshape(x.shape[:-2] + (8, heads, c // (8 * heads), x.shape[-1]))
        xb = np.swapaxes(xb, -4, -3)
        return xb.reshape(x.shape[:-2] + (heads, c // heads, x.shape[-1]))
    return x.reshape(x.shape[:-2] + (heads, c // heads, x.shape[-1]))


def merge_heads(x, octic):
    heads, ch = x.shape[-3], x.shape[-2]
    if octic:
        xb = x.reshape(x.shape[:-3] + (heads, 8, ch // 8, x.shape[-1]))
        xb = np.swapaxes(xb, -4, -3)
        return xb.reshape(x.shape[:-3] + (heads * ch, x.shape[-1]))
    return x.reshape(x.shape[:-3] + (heads * ch, x.shape[-1]))


def _softmax_last(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_logits(q, k, scale):
    return np.einsum("...hcl,...hcm->...hlm", q, k) / scale


def attention(x, wq, wk, wv, wo, heads):
    """Pre-projection multi-head self-attention over the token axis."""
    octic = isinstance(wq, EquivLinearWeights)
    c = x.shape[-2]
    if c % (heads * (8 if octic else 1)):
        raise ValueError("head count incompatible with channel layout")
    scale = np.sqrt(c / heads)
    q, cq = _linear(wq, x)
    k, ck = _linear(wk, x)
    v, cv = _linear(wv, x)
    qh, kh, vh = (split_heads(t, heads, octic) for t in (q, k, v))
    probs = _softmax_last(attention_logits(qh, kh, scale))
    out = np.einsum("...hij,...hcj->...hci", probs, vh)
    merged = merge_heads(out, octic)
    y, co = _linear(wo, merged)
    cache = (cq, ck, cv, co, qh, kh, vh, probs, heads, octic, scale)
    return y, cache


def attention_vjp(wq, wk, wv, wo, cache, ybar):
    cq, ck, cv, co, qh, kh, vh, probs, heads, octic, scale = cache
    mbar, wobar = _linear_vjp(wo, co, ybar)
    obar = split_heads(mbar, heads, octic)
    pbar = np.einsum("...hci,...hcj->...hij", obar, vh)
    vhbar = np.einsum("...hij,...hci->...hcj", probs, obar)
    lbar = probs * (pbar - (pbar * probs).sum(axis=-1, keepdims=True))
    qhbar = np.einsum("...hlm,...hcm->...hcl", lbar, kh) / scale
    khbar = np.einsum("...hlm,...hcl->...hcm", lbar, qh) / scale
    xbar = 0.0
    grads = []
    for w, c_, tbar in ((wq, cq, qhbar), (wk, ck, khbar), (wv, cv, vhbar)):
        xb, wbar = _linear_vjp(w, c_, merge_heads(tbar, octic))
        xbar = xbar + xb
        grads.append(wbar)
    return xbar, grads[0], grads[1], grads[2], wobar


# ---------------------------------------------------------------------------
# patch embedding, positional encoding, class token


@dataclass
class PatchEmbedWeights:
    kernel: np.ndarray      # (C, 3 * P * P)
    bias: np.ndarray        # (C,)
    patch: int

    @property
    def channels(self) -> int:
        return self.kernel.shape[0]


def project_patch_kernel(kernel, patch) -> np.ndarray:
    rep_in = steerable.Rep.patch(patch)
    rep_out = steerable.Rep.iso_multiple(kernel.shape[0])
    return steerable.reynolds_project_intertwiner(kernel, rep_in, rep_out)


def init_patch_embed(rng, channels, patch, octic) -> PatchEmbedWeights:
    bound = 1.0 / np.sqrt(3 * patch * patch)
    kernel = rng.uniform(-bound, bound, size=(channels, 3 * patch * patch))
    if octic:
        kernel = project_patch_kernel(kernel, patch)
    return PatchEmbedWeights(kernel, np.zeros(channels), patch)


def patch_embed(w: PatchEmbedWeights, img):
    if img.shape[-1] % w.patch:
        raise ValueError("image side not divisible by patch size")
    tokens = steerable.patchify(img, w.patch)
    y = np.einsum("ij,...jl->...il", w.kernel, tokens) + w.bias[:, None]
    return y, tokens


def patch_embed_vjp(w: PatchEmbedWeights, cache, ybar):
    tokens = cache
    kbar = _outer_cl(ybar, tokens)
    tbar = np.einsum("ji,...jl->...il", w.kernel, ybar)
    imgbar = steerable.unpatchify(tbar, w.patch)
    bbar = _flat2(ybar).sum(axis=(0, 2))
    return imgbar, PatchEmbedWeights(kbar, bbar, w.patch)


def check_cls_is_invariant(cls_token):
    # Tolerance is relative so the guard stays meaningful at any weight scale.
    nona1 = cls_token[cls_token.shape[0] // 8:]
    worst = np.max(np.abs(nona1)) if nona1.size else 0.0
    scale = np.max(np.abs(cls_token)) + 1.0
    if worst > CLS_GUARD_TOL * scale:
        raise ValueError(
            f"class token has non-invariant components ({worst:.2e})")


def check_posenc_constraint(posenc, geom):
    scale = np.max(np.abs(posenc)) + 1.0
    for g in range(8):
        acted = steerable.apply_token_permutation(
            g, steerable.channel_action(g, posenc), geom)
        if np.max(np.abs(acted - posenc)) > CLS_GUARD_TOL * scale:
            raise ValueError("positional encoding is off its fixed-point set")


def add_posenc_cls(x, posenc, cls_token, octic):
    if octic:
        check_cls_is_invariant(cls_token)
        check_posenc_constraint(
            posenc, steerable.GridGeometry(int(round(np.sqrt(posenc.shape[-1])))))
    col = np.broadcast_to(
        cls_token[:, None], x.shape[:-2] + (x.shape[-2], 1))
    return np.concatenate([x + posenc, col], axis=-1), None


def add_posenc_cls_vjp(cache, ybar):
    del cache
    grid = ybar[..., :-1]
    pbar = _flat2(grid).sum(axis=0)
    clsbar = _flat2(ybar[..., -1:]).sum(axis=(0, 2))
    return grid, pbar, clsbar


# ---------------------------------------------------------------------------
# transformer blocks


@dataclass
class OcticBlock:
    ln1: np.ndarray
    wq: EquivLinearWeights
    wk: EquivLinearWeights
    wv: EquivLinearWeights
    wo: EquivLinearWeights
    ln2: np.ndarray
    w_up: EquivLinearWeights
    w_down: EquivLinearWeights
    heads: int


@dataclass
class StandardBlock:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wq: DenseWeights
    wk: DenseWeights
    wv: DenseWeights
    wo: DenseWeights
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w_up: DenseWeights
    w_down: DenseWeights
    heads: int


def init_octic_block(rng, channels, heads, hidden=None) -> OcticBlock:
    if channels % (8 * heads):
        raise ValueError("octic attention needs 8*heads to divide channels")
    hidden = 4 * channels if hidden is None else hidden
    lin = lambda ci, co: init_equiv_linear(rng, ci, co)
    return OcticBlock(
        np.ones(6),
        lin(channels, channels), lin(channels, channels),
        lin(channels, channels), lin(channels, channels),
        np.ones(6),
        lin(channels, hidden), lin(hidden, channels),
        heads)


def init_standard_block(rng, channels, heads, hidden=None) -> StandardBlock:
    if channels % heads:
        raise ValueError("heads must divide channels")
    hidden = 4 * channels if hidden is None else hidden
    lin = lambda ci, co: init_dense(rng, ci, co)
    return StandardBlock(
        np.ones(channels), np.zeros(channels),
        lin(channels, channels), lin(channels, channels),
        lin(channels, channels), lin(channels, channels),
        np.ones(channels), np.zeros(channels),
        lin(channels, hidden), lin(hidden, channels),
        heads)


def _block_ln(p, which, x):
    if isinstance(p, OcticBlock):
        gains = p.ln1 if which == 1 else p.ln2
        return equiv_layernorm(x, gains)
    gamma = p.ln1_gamma if which == 1 else p.ln2_gamma
    beta = p.ln1_beta if which == 1 else p.ln2_beta
    return layernorm(x, gamma, beta)


def _block_gelu(p, x):
    return equiv_gelu(x) if isinstance(p, OcticBlock) else gelu(x)


def block_forward(p, x):
    """Pre-norm residual block: x + attn(ln(x)), then + mlp(ln(.))."""
    n1, c_ln1 = _block_ln(p, 1, x)
    a, c_attn = attention(n1, p.wq, p.wk, p.wv, p.wo, p.heads)
    h = x + a
    n2, c_ln2 = _block_ln(p, 2, h)
    u, c_up = _linear(p.w_up, n2)
    act, c_act = _block_gelu(p, u)
    d, c_down = _linear(p.w_down, act)
    return h + d, (c_ln1, c_attn, c_ln2, c_up, c_act, c_down)


def block_vjp(p, cache, ybar):
    c_ln1, c_attn, c_ln2, c_up, c_act, c_down = cache
    octic = isinstance(p, OcticBlock)
    actbar, downbar = _linear_vjp(p.w_down, c_down, ybar)
    ubar = equiv_gelu_vjp(c_act, actbar) if octic else gelu_vjp(c_act, actbar)
    n2bar, upbar = _linear_vjp(p.w_up, c_up, ubar)
    if octic:
        h_mlp, ln2bar = equiv_layernorm_vjp(p.ln2, c_ln2, n2bar)
        hbar = ybar + h_mlp
    else:
        h_mlp, g2bar, b2bar = layernorm_vjp(p.ln2_gamma, c_ln2, n2bar)
        hbar = ybar + h_mlp
    n1bar, qbar, kbar, vbar, obar = attention_vjp(
        p.wq, p.wk, p.wv, p.wo, c_attn, hbar)
    if octic:
        x_attn, ln1bar = equiv_layernorm_vjp(p.ln1, c_ln1, n1bar)
        grads = OcticBlock(ln1bar, qbar, kbar, vbar, obar,
                           ln2bar, upbar, downbar, p.heads)
    else:
        x_attn, g1bar, b1bar = layernorm_vjp(p.ln1_gamma, c_ln1, n1bar)
        grads = StandardBlock(g1bar, b1bar, qbar, kbar, vbar, obar,
                              g2bar, b2bar, upbar, downbar, p.heads)
    return hbar + x_attn, grads
