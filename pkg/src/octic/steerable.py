"""Steerable feature tensors and the dihedral actions on images, patches, tokens, channels.

A feature map is a C x L matrix of tokens.  The group acts two-sidedly,
g . x = rho_chan(g) x rho_token(g)^T: channels through copies of the isotypic
8-block action, tokens through the permutation induced by rotating/mirroring
the N x N token grid (an optional class token sits in the last slot and is a
fixed point).  Reynolds averaging over the 8 elements projects arbitrary
parameter arrays onto the equivariant subspaces used for patch-embed kernels
and positional encodings.

Grid convention: token index t = row * N + col; the quarter turn sends the
entry at (row, col) of the old grid into slot (N-1-col, row), i.e. new[i, j] =
old[j, N-1-i], which is numpy's rot90 with k=1 over the last two axes.  The
mirror is a left-right flip.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import group

RESIDUAL_EPS = 1e-30

ISO_MULTIPLE = "iso_multiple"
A1_MULTIPLE = "a1_multiple"
NO_REP = "none"


@dataclass
class GridGeometry:
    n: int
    has_cls: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("token grid must have N >= 1")

    @property
    def num_tokens(self) -> int:
        return self.n * self.n + (1 if self.has_cls else 0)


@dataclass
class SteerableFeature:
    """C x L token matrix with a declared channel representation and grid geometry.

    data may carry leading batch axes; the last two axes are (channels, tokens).
    """

    data: np.ndarray
    channel_rep: str
    geometry: GridGeometry

    def __post_init__(self):
        if self.channel_rep not in (ISO_MULTIPLE, A1_MULTIPLE, NO_REP):
            raise ValueError(f"unknown channel_rep {self.channel_rep!r}")
        if self.channel_rep == ISO_MULTIPLE and self.data.shape[-2] % 8 != 0:
            raise ValueError("iso_multiple features need channel count divisible by 8")
        if self.data.shape[-1] != self.geometry.num_tokens:
            raise ValueError(
                f"token axis {self.data.shape[-1]} does not match geometry "
                f"L={self.geometry.num_tokens}"
            )

    @property
    def channels(self) -> int:
        return self.data.shape[-2]


def grid_index_action(g: int, grid: np.ndarray) -> np.ndarray:
    """Act on the last two axes of an n x n array: rot90^a then fliplr^b for s^b r^a."""
    b, a = divmod(g, 4)
    out = np.rot90(grid, k=a, axes=(-2, -1))
    if b:
        out = np.flip(out, axis=-1)
    return out


def apply_image_action(g: int, img: np.ndarray) -> np.ndarray:
    """Pixel permutation rho_image(g) on (..., M, M) arrays (color axes untouched)."""
    return grid_index_action(g, img)


def grid_permutation(g: int, n: int) -> np.ndarray:
    """Flat-index permutation of an n x n grid: new_flat[i] = old_flat[perm[i]]."""
    idx = np.arange(n * n).reshape(n, n)
    return grid_index_action(g, idx).reshape(-1)


def token_permutation(g: int, geom: GridGeometry) -> np.ndarray:
    """Permutation of the L token slots; the class token slot maps to itself."""
    perm = grid_permutation(g, geom.n)
    if geom.has_cls:
        perm = np.concatenate([perm, [geom.n * geom.n]])
    return perm


def patch_permutation(g: int, patch: int) -> np.ndarray:
    """Permutation of the 3*P^2 patch-pixel slots (color-major layout, color fixed)."""
    if patch < 1:
        raise ValueError("patch size must be >= 1")
    pix = grid_permutation(g, patch)
    return (np.arange(3)[:, None] * patch * patch + pix[None, :]).reshape(-1)


def permutation_matrix(perm: np.ndarray) -> np.ndarray:
    P = np.zeros((perm.size, perm.size))
    P[np.arange(perm.size), perm] = 1.0
    return P


def apply_channel_action(g: int, x: SteerableFeature) -> SteerableFeature:
    if x.channel_rep == NO_REP:
        raise ValueError("feature has no declared channel representation")
    return replace(x, data=channel_action(g, x.data, x.channel_rep))


def channel_action(g: int, data: np.ndarray, channel_rep: str = ISO_MULTIPLE) -> np.ndarray:
    """rho_chan(g) applied to (..., C, L) data."""
    if channel_rep == A1_MULTIPLE:
        return data.copy()
    if channel_rep != ISO_MULTIPLE:
        raise ValueError(f"no channel action for rep {channel_rep!r}")
    c = data.shape[-2]
    if c % 8 != 0:
        raise ValueError("channel count must be divisible by 8")
    blocks = data.reshape(*data.shape[:-2], 8, c // 8, data.shape[-1])
    rho = group.isotypic_matrix(g)
    out = np.einsum("ab,...bkl->...akl", rho, blocks)
    return out.reshape(data.shape)


def apply_token_permutation(g: int, data: np.ndarray, geom: GridGeometry) -> np.ndarray:
    """Right action x rho_token(g)^T on (..., C, L) data."""
    return data[..., token_permutation(g, geom)]


def apply_group(g: int, x: SteerableFeature) -> SteerableFeature:
    """Full action rho_chan(g) x rho_token(g)^T."""
    data = x.data if x.channel_rep == NO_REP else channel_action(g, x.data, x.channel_rep)
    return replace(x, data=apply_token_permutation(g, data, x.geometry))


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """(..., 3, M, M) image to (..., 3*P^2, N^2) patch columns, token t = row*N + col.

    Patch-channel layout is color-major: slot c*P^2 + pi*P + pj holds color c,
    patch pixel (pi, pj).
    """
    m = img.shape[-1]
    if img.shape[-2] != m or img.shape[-3] != 3:
        raise ValueError("expected (..., 3, M, M) image")
    if m % patch != 0:
        raise ValueError(f"image side {m} not divisible by patch {patch}")
    n = m // patch
    lead = img.shape[:-3]
    x = img.reshape(*lead, 3, n, patch, n, patch)
    x = np.einsum("...cipjq->...cpqij", x)
    return x.reshape(*lead, 3 * patch * patch, n * n)


def unpatchify(patches: np.ndarray, patch: int) -> np.ndarray:
    """Inverse of patchify: (..., 3*P^2, N^2) back to (..., 3, M, M)."""
    nsq = patches.shape[-1]
    n = int(round(np.sqrt(nsq)))
    if n * n != nsq or patches.shape[-2] != 3 * patch * patch:
        raise ValueError("patch matrix shape inconsistent with patch size")
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, 3, patch, patch, n, n)
    x = np.einsum("...cpqij->...cipjq", x)
    return x.reshape(*lead, 3, n * patch, n * patch)


class Rep:
    """A finite orthogonal representation given by its 8 stacked matrices."""

    def __init__(self, matrices: np.ndarray):
        self.matrices = np.asarray(matrices, dtype=np.float64)
        if self.matrices.shape[0] != 8 or self.matrices.shape[1] != self.matrices.shape[2]:
            raise ValueError("expected shape (8, d, d)")

    @property
    def dim(self) -> int:
        return self.matrices.shape[1]

    def matrix(self, g: int) -> np.ndarray:
        return self.matrices[g]

    @staticmethod
    def iso_multiple(channels: int) -> "Rep":
        if channels % 8 != 0:
            raise ValueError("iso multiple needs 8 | C")
        k = channels // 8
        mats = np.zeros((8, channels, channels))
        for g in range(8):
            mats[g] = np.kron(group.isotypic_matrix(g), np.eye(k))
        # kron(iso, I_k) matches the contiguous sub-block layout: channel b*k + j
        return Rep(mats)

    @staticmethod
    def a1_multiple(channels: int) -> "Rep":
        return Rep(np.broadcast_to(np.eye(channels), (8, channels, channels)).copy())

    @staticmethod
    def permutation(perms: np.ndarray) -> "Rep":
        mats = np.stack([permutation_matrix(p) for p in perms])
        return Rep(mats)

    @staticmethod
    def token(geom: GridGeometry) -> "Rep":
        return Rep.permutation(np.stack([token_permutation(g, geom) for g in range(8)]))

    @staticmethod
    def patch(patch: int) -> "Rep":
        return Rep.permutation(np.stack([patch_permutation(g, patch) for g in range(8)]))


def reynolds_project_intertwiner(w: np.ndarray, rep_in: Rep, rep_out: Rep) -> np.ndarray:
    """Average (1/8) sum_g rho_out(g)^T W rho_in(g): the projector onto intertwiners."""
    if w.shape != (rep_out.dim, rep_in.dim):
        raise ValueError(f"weight shape {w.shape} does not match reps "
                         f"({rep_out.dim}, {rep_in.dim})")
    acc = np.zeros_like(w, dtype=np.float64)
    for g in range(8):
        acc += rep_out.matrix(g).T @ w @ rep_in.matrix(g)
    return acc / 8.0


def reynolds_project_posenc(e: np.ndarray, geom: GridGeometry) -> np.ndarray:
    """Project a C x L positional table onto the fixed points of g: e -> rho_chan(g) e rho_token(g)^T."""
    if e.shape[-1] != geom.num_tokens:
        raise ValueError("positional table token axis does not match geometry")
    acc = np.zeros_like(e, dtype=np.float64)
    for g in range(8):
        gi = group.inverse(g)
        # rho_chan(g)^T e rho_token(g) = rho_chan(g^-1) e rho_token(g^-1)^T
        acc += apply_token_permutation(gi, channel_action(gi, e), geom)
    return acc / 8.0


def reynolds_project_token(v: np.ndarray) -> np.ndarray:
    """Project a single C-vector onto the rho_chan fixed subspace (A1 blocks survive).

    The average over the group keeps the A1 sub-block untouched and kills the
    rest, so the projection is done by masking: that form is exact in floating
    point, which keeps downstream constraint guards quiet at any weight scale.
    """
    out = np.zeros_like(v, dtype=np.float64)
    sub = v.shape[0] // 8
    out[:sub] = v[:sub]
    return out


def equivariance_residual_general(f, x, act_in, act_out) -> float:
    """max_g ||f(g.x) - g.f(x)||_inf / (||f(x)||_inf + eps) with explicit actions."""
    y = f(x)
    scale = np.max(np.abs(y)) + RESIDUAL_EPS
    worst = 0.0
    for g in range(8):
        diff = np.max(np.abs(f(act_in(g, x)) - act_out(g, y)))
        worst = max(worst, diff / scale)
    return worst


def equivariance_residual(f, x: SteerableFeature) -> float:
    """Equivariance defect of a steerable-to-steerable map under the declared actions."""
    y = f(x)
    scale = np.max(np.abs(y.data)) + RESIDUAL_EPS
    worst = 0.0
    for g in range(8):
        diff = np.max(np.abs(f(apply_group(g, x)).data - apply_group(g, y).data))
        worst = max(worst, diff / scale)
    return worst
