"""Self-check suites behind the command line `check` subcommand.

Each check produces one row with eight residual columns, one per group
element, so a failure points at the element that broke. The group suite
accepts externally supplied irrep tables, which makes deliberate mutations
(an off-by-sign rotation matrix, a desynchronized weight pair) visible as
order-one residuals instead of silently passing.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import group, invariants, layers, model, steerable

SCOPES = ("group", "layers", "invariants", "model", "all")


@dataclass
class CheckRow:
    suite: str
    name: str
    tol: float
    residuals: list = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.residuals)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def as_dict(self) -> dict:
        return {"suite": self.suite, "name": self.name, "tol": self.tol,
                "residuals": [float(r) for r in self.residuals],
                "worst": float(self.worst), "passed": self.passed}


def _iso_from_tables(tables, g):
    out = np.zeros((8, 8))
    for i, name in enumerate(("A1", "A2", "B1", "B2")):
        out[i, i] = tables[name][g, 0, 0]
    out[4:6, 4:6] = tables["E"][g]
    out[6:8, 6:8] = tables["E"][g]
    return out


def mutated_tables() -> dict:
    """Irrep tables with the 2d rotation generator knocked off the group."""
    tables = group.irrep_tables()
    tables["E"][1] = np.array([[0.0, -1.0], [1.0, 0.5]])
    return tables


def run_group_checks(tables: Optional[dict] = None, seed=0) -> list:
    if tables is None:
        tables = group.irrep_tables()
    rng = np.random.default_rng(seed)
    rows = []

    for name in group.IRREP_NAMES:
        t = tables[name]
        res = [max(np.max(np.abs(t[group.mul(g, h)] - t[g] @ t[h]))
                   for h in range(8)) for g in range(8)]
        rows.append(CheckRow("group", f"homomorphism/{name}", 1e-13, res))

    for name in group.IRREP_NAMES:
        t = tables[name]
        eye = np.eye(t.shape[-1])
        res = [np.max(np.abs(t[g].T @ t[g] - eye)) for g in range(8)]
        rows.append(CheckRow("group", f"orthogonality/{name}", 1e-13, res))

    q = group.fourier_matrix()
    ortho = np.max(np.abs(q.T @ q - np.eye(8)))
    rows.append(CheckRow("group", "fourier/orthogonal", 1e-13, [ortho] * 8))

    res = [np.max(np.abs(q.T @ group.regular_matrix(g) @ q
                         - _iso_from_tables(tables, g))) for g in range(8)]
    rows.append(CheckRow("group", "fourier/conjugation", 1e-13, res))

    x = rng.standard_normal((8, 64))
    reg = group.isotypical_to_regular(x, axis=0)
    res = [np.max(np.abs(group.apply_regular(g, reg, axis=0)
                         - group.isotypical_to_regular(
                             np.einsum("ij,jn->in", _iso_from_tables(tables, g), x),
                             axis=0))) for g in range(8)]
    rows.append(CheckRow("group", "butterfly/intertwines", 1e-13, res))

    round_trip = np.max(np.abs(group.regular_to_isotypical(reg, axis=0) - x))
    dense_gap = np.max(np.abs(reg - np.einsum("ij,jn->in", q, x)))
    rows.append(CheckRow("group", "butterfly/inverse", 1e-13, [round_trip] * 8))
    rows.append(CheckRow("group", "butterfly/matches_dense", 1e-13, [dense_gap] * 8))
    return rows


def _intertwiner_row(name, dense, rep_in, rep_out, tol=1e-12):
    scale = np.max(np.abs(dense)) + 1e-30
    res = [np.max(np.abs(rep_out.matrix(g) @ dense - dense @ rep_in.matrix(g))) / scale
           for g in range(8)]
    return CheckRow("layers", name, tol, res)


def _layer_equivariance_row(name, fn, c, seed, tol=1e-11, trials=3, tokens=9):
    rng = np.random.default_rng(seed)
    res = np.zeros(8)
    for _ in range(trials):
        x = rng.standard_normal((c, tokens))
        y = fn(x)
        scale = np.max(np.abs(y)) + 1e-30
        for g in range(8):
            lhs = fn(steerable.channel_action(g, x))
            rhs = steerable.channel_action(g, y)
            res[g] = max(res[g], np.max(np.abs(lhs - rhs)) / scale)
    return CheckRow("layers", name, tol, list(res))


def run_layer_checks(seed=0, break_e_sharing=False) -> list:
    rng = np.random.default_rng(seed)
    c = 16
    rows = []

    w = layers.init_equiv_linear(rng, c, c)
    dense = layers.assemble_dense(w)
    if break_e_sharing:
        # desynchronize the two E component blocks of the assembled matrix
        dense[4 * c // 8: 5 * c // 8, 4 * c // 8: 5 * c // 8] += 0.5
    rin = rout = steerable.Rep.iso_multiple(c)
    rows.append(_intertwiner_row("equiv_linear/intertwiner", dense, rin, rout))

    full_bias = np.zeros(c)
    full_bias[:c // 8] = w.bias

    def lin(x):
        if break_e_sharing:
            return dense @ x + full_bias[:, None]
        return layers.equiv_linear(w, x)[0]

    rows.append(_layer_equivariance_row("equiv_linear/equivariance", lin, c, seed + 1))

    gains = rng.standard_normal(6)
    rows.append(_layer_equivariance_row(
        "equiv_layernorm", lambda x: layers.equiv_layernorm(x, gains)[0], c, seed + 2))
    rows.append(_layer_equivariance_row(
        "equiv_gelu", lambda x: layers.equiv_gelu(x)[0], c, seed + 3))

    heads = 2
    attn = {n: layers.init_equiv_linear(rng, c, c) for n in ("q", "k", "v", "o")}

    def attn_fn(x):
        return layers.attention(x, attn["q"], attn["k"], attn["v"], attn["o"], heads)[0]

    rows.append(_layer_equivariance_row("attention", attn_fn, c, seed + 4, tokens=6))

    blk = layers.init_octic_block(rng, c, heads)
    rows.append(_layer_equivariance_row(
        "octic_block", lambda x: layers.block_forward(blk, x)[0], c, seed + 5, tokens=6))

    embed = layers.init_patch_embed(rng, c, patch=4, octic=True)
    rows.append(_intertwiner_row(
        "patch_embed/intertwiner", embed.kernel,
        steerable.Rep.patch(4), steerable.Rep.iso_multiple(c)))
    return rows


def run_invariant_checks(seed=0, c=16, trials=5) -> list:
    rng = np.random.default_rng(seed)
    rows = []
    for method in invariants.METHODS:
        params = invariants.init_invariant_head(rng, c, method)
        res = np.zeros(8)
        for _ in range(trials):
            x = rng.standard_normal((c, 7))
            y = invariants.apply_psi(params, x)[0]
            scale = np.max(np.abs(y)) + 1e-30
            for g in range(8):
                acted = invariants.apply_psi(params, steerable.channel_action(g, x))[0]
                res[g] = max(res[g], np.max(np.abs(acted - y)) / scale)
        rows.append(CheckRow("invariants", f"psi/{method}", 1e-12, list(res)))
    return rows


def run_model_checks(seed=0) -> list:
    rows = []
    for family, k in (("d8", 2), ("i8", 1)):
        cfg = model.ModelConfig(family, 2, k, 16, 1, 4, 16, seed=seed)
        m = model.build_model(cfg)
        rng = np.random.default_rng(seed + 1)
        imgs = rng.standard_normal((2, 3, 16, 16))
        base = model.forward(m, imgs)
        scale = np.max(np.abs(base)) + 1e-30
        res = []
        for g in range(8):
            acted = np.stack([steerable.apply_image_action(g, im) for im in imgs])
            res.append(np.max(np.abs(model.forward(m, acted) - base)) / scale)
        rows.append(CheckRow("model", f"logit_invariance/{family}", 1e-9, res))

        geom = steerable.GridGeometry(cfg.grid)
        res = [np.max(np.abs(steerable.apply_token_permutation(
            g, steerable.channel_action(g, m.posenc), geom) - m.posenc))
            for g in range(8)]
        rows.append(CheckRow("model", f"posenc_fixed_point/{family}", 1e-12, res))

        rin, rout = steerable.Rep.patch(cfg.patch), steerable.Rep.iso_multiple(16)
        rows.append(_intertwiner_row(
            f"patch_kernel/{family}", m.embed.kernel, rin, rout))
        rows[-1].suite = "model"
    return rows


def run_checks(scope="all", tables=None, seed=0, break_e_sharing=False) -> list:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; pick one of {SCOPES}")
    rows = []
    if scope in ("group", "all"):
        rows += run_group_checks(tables=tables, seed=seed)
    if scope in ("layers", "all"):
        rows += run_layer_checks(seed=seed, break_e_sharing=break_e_sharing)
    if scope in ("invariants", "all"):
        rows += run_invariant_checks(seed=seed)
    if scope in ("model", "all"):
        rows += run_model_checks(seed=seed)
    return rows
