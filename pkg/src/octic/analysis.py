"""Cost accounting and microbenchmarks for octic versus dense transformer layers.

All matmul counts are multiply-accumulates (MACs) per forward pass. The octic
linear layers touch only the block-diagonal weights, so their MAC count is 3/16
of the dense equivalent; attention score and mixing matmuls are shared between
the two families and keep the end-to-end ratio below 16/3.
"""
from dataclasses import dataclass, fields
import time

import numpy as np

from . import group, invariants, layers


@dataclass
class CostBreakdown:
    """MACs (matmul) and scalar flops (elementwise) per forward pass."""
    qkv: float = 0.0
    attn_scores: float = 0.0
    attn_mix: float = 0.0
    proj: float = 0.0
    mlp: float = 0.0
    embed: float = 0.0
    head: float = 0.0
    elementwise: float = 0.0

    @property
    def matmul(self) -> float:
        return (self.qkv + self.attn_scores + self.attn_mix + self.proj
                + self.mlp + self.embed + self.head)

    @property
    def total(self) -> float:
        return self.matmul + self.elementwise

    def __add__(self, other):
        return CostBreakdown(*[getattr(self, f.name) + getattr(other, f.name)
                               for f in fields(self)])


def count_block_flops(channels, heads, tokens, octic, hidden=None) -> CostBreakdown:
    """One pre-norm transformer block; `octic` switches the linear layers only."""
    c, l = channels, tokens
    d = 4 * c if hidden is None else hidden
    lin = 3.0 / 16.0 if octic else 1.0
    out = CostBreakdown(
        qkv=lin * 3 * c * c * l,
        proj=lin * c * c * l,
        mlp=lin * 2 * c * d * l,
        attn_scores=l * l * c,
        attn_mix=l * l * c,
    )
    # softmax: exp + sum + divide per score row
    out.elementwise += 3.0 * heads * l * l
    # two layer norms: center, square, reduce, scale, shift per channel
    ln = 6.0 if octic else 5.0
    out.elementwise += 2 * ln * c * l
    # activation: erf-based unit, plus the two butterflies around it when octic
    out.elementwise += (12.0 if octic else 4.0) * d * l
    # residual adds
    out.elementwise += 2.0 * c * l
    return out


def invariant_head_flops(channels, tokens, method="power") -> CostBreakdown:
    """Tokenwise map to invariants followed by the two dense mixing layers."""
    c, l = channels, tokens
    k = invariants.psi_output_dim(method, c)
    out = CostBreakdown(head=(k * c + c * c) * l)
    out.elementwise += k * l + 4.0 * c * l
    return out


@dataclass
class ModelShape:
    channels: int
    depth: int
    hidden: int
    heads: int
    tokens: int = 257
    patch: int = 14
    classes: int = 1000


# Published ViT sizes used for the end-to-end ratio comparison, with the
# reference dense-over-octic MAC ratios they should land near.
VIT_SHAPES = {
    "vitl": ModelShape(1024, 24, 4096, 16),
    "vith": ModelShape(1280, 32, 5120, 16),
    "vitg": ModelShape(1664, 48, 8192, 16),
    "vite": ModelShape(1792, 56, 15360, 16),
    "vit22b": ModelShape(6144, 36, 24576, 48),
}


def count_model_flops(shape: ModelShape, octic) -> CostBreakdown:
    """Full classifier forward pass: embed + blocks (+ invariant map) + head."""
    c, l = shape.channels, shape.tokens
    grid_tokens = l - 1
    out = CostBreakdown(embed=3.0 * shape.patch ** 2 * c * grid_tokens)
    for _ in range(shape.depth):
        out = out + count_block_flops(c, shape.heads, l, octic, shape.hidden)
    if octic:
        out = out + invariant_head_flops(c, l)
    out = out + CostBreakdown(head=float(c * shape.classes))
    return out


def flop_ratio(shape: ModelShape, kind="matmul") -> float:
    """Dense-over-octic cost for one shape.

    `kind="matmul"` compares MAC budgets (the headline number); `kind="total"`
    folds in elementwise work (norms, softmax, activations, butterflies),
    which lowers the ratio slightly. Both are monotone in width.
    """
    dense = count_model_flops(shape, octic=False)
    octic = count_model_flops(shape, octic=True)
    if kind not in ("matmul", "total"):
        raise ValueError(f"unknown ratio kind {kind!r}")
    return getattr(dense, kind) / getattr(octic, kind)


REFERENCE_RATIOS = {
    "vitl": 4.58,
    "vith": 4.58,
    "vitg": 4.88,
    "vite": 5.01,
    "vit22b": 5.18,
}


def reference_ratios() -> dict:
    return {name: flop_ratio(shape) for name, shape in VIT_SHAPES.items()}


# ---------------------------------------------------------------------------
# arithmetic intensity of the feedforward matmul


def _intensity(batch, channels, hidden, bytes_per_scalar, mac_scale, weight_scale):
    b, c, f = float(batch), float(channels), float(hidden)
    macs = 2.0 * b * c * f * mac_scale
    data = bytes_per_scalar * (b * c + c * f * weight_scale + b * f)
    return macs / data


def mlp_intensity(batch, channels, hidden, bytes_per_scalar, octic) -> float:
    """MACs per byte moved for a B x C by C x F matmul (weights + both operands).

    The octic weight lives in its block-diagonal form, so only C*F/8 weight
    scalars move, while the useful MAC count drops by 16/3. With both savings
    switched off the two families share one formula.
    """
    if octic:
        return _intensity(batch, channels, hidden, bytes_per_scalar,
                          3.0 / 16.0, 1.0 / 8.0)
    return _intensity(batch, channels, hidden, bytes_per_scalar, 1.0, 1.0)


def intensity_crossover(batch, bytes_per_scalar, hidden_ratio,
                        lo=64.0, hi=65536.0, tol=1e-9) -> float:
    """Channel count where the octic feedforward matches dense intensity.

    Below the crossover the dense layer is the more bandwidth-friendly one;
    above it the octic layout wins despite the smaller MAC count. Bisection on
    the smooth difference function; `tol` is relative on the bracket width.
    """
    def gap(c):
        f = hidden_ratio * c
        return (mlp_intensity(batch, c, f, bytes_per_scalar, octic=True)
                - mlp_intensity(batch, c, f, bytes_per_scalar, octic=False))

    if gap(lo) >= 0 or gap(hi) <= 0:
        raise ValueError("crossover is not bracketed by the given range")
    while (hi - lo) > tol * hi:
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# feedforward wall-clock benchmark


@dataclass
class BenchResult:
    channels: int
    dense_us: float
    octic_us: float
    dense_std_us: float
    octic_std_us: float

    @property
    def speedup(self) -> float:
        return self.dense_us / self.octic_us

    @property
    def mac_ratio(self) -> float:
        """Analytic dense-over-octic MAC count for the two feedforward matmuls."""
        return 16.0 / 3.0


def _median_of_means(samples, chunk=5):
    samples = np.asarray(samples)
    n = (len(samples) // chunk) * chunk
    means = samples[:n].reshape(-1, chunk).mean(axis=1)
    return float(np.median(means))


def _time_fn(fn, warmup, trials):
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return _median_of_means(out) * 1e6, float(np.std(out) * 1e6)


def bench_mlp(channels, tokens=256, warmup=10, trials=30, dtype=np.float32) -> BenchResult:
    """Times one feedforward (up-projection, GELU, down-projection) per family.

    The octic path runs the five block matmuls plus the two butterflies it
    actually needs at inference time; both paths share dtype and token count.
    """
    c, l = channels, tokens
    d = 4 * c
    rng = np.random.default_rng(c)
    x = rng.standard_normal((c, l)).astype(dtype)
    w_up = rng.standard_normal((d, c)).astype(dtype) / np.sqrt(c)
    w_down = rng.standard_normal((c, d)).astype(dtype) / np.sqrt(d)

    def dense():
        h = w_up @ x
        h = layers.gelu_scalar(h)
        return w_down @ h

    c8, d8_ = c // 8, d // 8
    wu = {n: rng.standard_normal(s).astype(dtype) / np.sqrt(c)
          for n, s in [("a1", (d8_, c8)), ("a2", (d8_, c8)), ("b1", (d8_, c8)),
                       ("b2", (d8_, c8)), ("e", (2 * d8_, 2 * c8))]}
    wd = {n: rng.standard_normal(s).astype(dtype) / np.sqrt(d)
          for n, s in [("a1", (c8, d8_)), ("a2", (c8, d8_)), ("b1", (c8, d8_)),
                       ("b2", (c8, d8_)), ("e", (2 * c8, 2 * d8_))]}

    def octic_apply(w, v, cin8):
        blocks = v.reshape(8, cin8, l)
        outs = [w["a1"] @ blocks[0], w["a2"] @ blocks[1],
                w["b1"] @ blocks[2], w["b2"] @ blocks[3]]
        u1 = np.concatenate([blocks[4], blocks[6]])
        u2 = np.concatenate([blocks[5], blocks[7]])
        v1, v2 = w["e"] @ u1, w["e"] @ u2
        half = v1.shape[0] // 2
        return np.concatenate(
            outs + [v1[:half], v2[:half], v1[half:], v2[half:]])

    def octic():
        h = octic_apply(wu, x, c8)
        reg = group.isotypical_to_regular(h.reshape(8, d8_, l), axis=0)
        reg = layers.gelu_scalar(reg)
        h = group.regular_to_isotypical(reg, axis=0).reshape(d, l)
        return octic_apply(wd, h, d8_)

    assert dense().shape == (c, l) and octic().shape == (c, l)
    d_us, d_std = _time_fn(dense, warmup, trials)
    o_us, o_std = _time_fn(octic, warmup, trials)
    return BenchResult(c, d_us, o_us, d_std, o_std)


def bench_sweep(channel_list, tokens=256, warmup=10, trials=30):
    return [bench_mlp(c, tokens, warmup, trials) for c in channel_list]
