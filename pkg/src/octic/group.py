"""Dihedral group of order 8: element arithmetic, irreps, and the regular Fourier pair.

Elements are written s^b r^a with b in {0,1} (mirror) and a in {0,..,3}
(quarter turns, anticlockwise) and encoded as index 4*b + a, i.e.
(e, r, r2, r3, s, sr, sr2, sr3).  Composition follows r*s = s*r^-1.

Regular-domain vectors use a fixed slot order (e, r3, r2, r, s, sr3, sr2, sr);
isotypic vectors use the component order (A1, A2, B1, B2, E11, E12, E21, E22),
where (E11, E12) and (E21, E22) are the two doublets rotated/reflected by the
2-dimensional irrep.  The change of basis between the two domains is an
orthogonal 8x8 matrix applied here as a 24-add butterfly, never as a matmul.
"""
from __future__ import annotations

import numpy as np

ORDER = 8
ELEMENT_NAMES = ("e", "r", "r2", "r3", "s", "sr", "sr2", "sr3")
IRREP_NAMES = ("A1", "A2", "B1", "B2", "E")
IRREP_DIMS = {"A1": 1, "A2": 1, "B1": 1, "B2": 1, "E": 2}
BLOCK_NAMES = ("A1", "A2", "B1", "B2", "E11", "E12", "E21", "E22")

# regular-vector slot s holds the function value at SLOT_ELEMENTS[s]
SLOT_ELEMENTS = (0, 3, 2, 1, 4, 7, 6, 5)

SQRT2_OVER_4 = np.sqrt(2.0) / 4.0


def _mul_scalar(x: int, y: int) -> int:
    b1, a1 = divmod(x, 4)
    b2, a2 = divmod(y, 4)
    # r^a s = s r^-a, so pulling s^b2 through r^a1 flips a1's sign b2 times
    return 4 * ((b1 + b2) % 2) + (a1 * (-1) ** b2 + a2) % 4


MUL_TABLE = np.array([[_mul_scalar(x, y) for y in range(8)] for x in range(8)], dtype=np.int64)
INV_TABLE = np.array([int(np.nonzero(MUL_TABLE[x] == 0)[0][0]) for x in range(8)], dtype=np.int64)


def mul(x: int, y: int) -> int:
    """Compose two elements, x after y on images (left action)."""
    return int(MUL_TABLE[x, y])


def inverse(x: int) -> int:
    return int(INV_TABLE[x])


def _irrep_tables() -> dict[str, np.ndarray]:
    rot_E = np.array([[0.0, -1.0], [1.0, 0.0]])
    mir_E = np.array([[-1.0, 0.0], [0.0, 1.0]])
    chars = {"A1": (1.0, 1.0), "A2": (1.0, -1.0), "B1": (-1.0, 1.0), "B2": (-1.0, -1.0)}
    tables: dict[str, np.ndarray] = {}
    for name, (chi_r, chi_s) in chars.items():
        vals = []
        for g in range(8):
            b, a = divmod(g, 4)
            vals.append([[chi_s**b * chi_r**a]])
        tables[name] = np.array(vals)
    mats = []
    for g in range(8):
        b, a = divmod(g, 4)
        mats.append(np.linalg.matrix_power(mir_E, b) @ np.linalg.matrix_power(rot_E, a))
    tables["E"] = np.array(mats)
    return tables


_IRREPS = _irrep_tables()


def irrep_matrix(name: str, g: int) -> np.ndarray:
    """Matrix of the named irrep at element g (1x1 for A-type/B-type, 2x2 for E)."""
    return _IRREPS[name][g].copy()


def irrep_tables() -> dict[str, np.ndarray]:
    """Copies of all five irrep tables, keyed by name, shaped (8, d, d)."""
    return {name: table.copy() for name, table in _IRREPS.items()}


def isotypic_matrix(g: int) -> np.ndarray:
    """8x8 block-diagonal action on one isotypic copy: A1, A2, B1, B2, then E twice."""
    out = np.zeros((8, 8))
    for i, name in enumerate(("A1", "A2", "B1", "B2")):
        out[i, i] = _IRREPS[name][g, 0, 0]
    out[4:6, 4:6] = _IRREPS["E"][g]
    out[6:8, 6:8] = _IRREPS["E"][g]
    return out


def _regular_permutations() -> np.ndarray:
    slot_of = {e: i for i, e in enumerate(SLOT_ELEMENTS)}
    perms = np.empty((8, 8), dtype=np.int64)
    for g in range(8):
        gi = inverse(g)
        for i in range(8):
            # (rho_reg(g) phi)(h_i) = phi(g^-1 h_i)
            perms[g, i] = slot_of[mul(gi, SLOT_ELEMENTS[i])]
    return perms


# REG_PERMS[g, i] = source slot feeding slot i under rho_reg(g)
REG_PERMS = _regular_permutations()


def regular_permutation(g: int) -> np.ndarray:
    return REG_PERMS[g].copy()


def regular_matrix(g: int) -> np.ndarray:
    P = np.zeros((8, 8))
    P[np.arange(8), REG_PERMS[g]] = 1.0
    return P


def apply_regular(g: int, x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Permute regular-domain components along `axis` by rho_reg(g)."""
    return np.take(x, REG_PERMS[g], axis=axis)


def fourier_matrix() -> np.ndarray:
    """Dense orthogonal change of basis, isotypic -> regular (columns follow BLOCK_NAMES)."""
    signs = np.array([
        [1, 1, 1, 1, 1, 1, 1, -1],
        [1, 1, -1, -1, 1, -1, -1, -1],
        [1, 1, 1, 1, -1, -1, -1, 1],
        [1, 1, -1, -1, -1, 1, 1, 1],
        [1, -1, 1, -1, -1, 1, -1, -1],
        [1, -1, -1, 1, -1, -1, 1, -1],
        [1, -1, 1, -1, 1, -1, 1, 1],
        [1, -1, -1, 1, 1, 1, -1, 1],
    ], dtype=np.float64)
    return SQRT2_OVER_4 * signs


def isotypical_to_regular(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Butterfly transform of isotypic 8-vectors to the regular domain.

    24 additions and 8 scalings per 8-vector; equals fourier_matrix() @ x.
    Broadcasts over every other axis of x.
    """
    xs = np.moveaxis(np.asarray(x), axis, 0)
    if xs.shape[0] != 8:
        raise ValueError(f"axis {axis} must have length 8, got {xs.shape[0]}")
    x_a1, x_a2, x_b1, x_b2, x_e11, x_e12, x_e21, x_e22 = xs
    a = x_a1 + x_a2
    b = x_a1 - x_a2
    c = x_b1 + x_b2
    d = x_b1 - x_b2
    e = x_e11 + x_e12
    f = x_e11 - x_e12
    g = x_e21 + x_e22
    h = x_e21 - x_e22
    apc = a + c
    amc = a - c
    bpd = b + d
    bmd = b - d
    eph = e + h
    emh = e - h
    fpg = f + g
    fmg = f - g
    out = np.stack([
        SQRT2_OVER_4 * (apc + eph),
        SQRT2_OVER_4 * (amc + fmg),
        SQRT2_OVER_4 * (apc - eph),
        SQRT2_OVER_4 * (amc - fmg),
        SQRT2_OVER_4 * (bpd - fpg),
        SQRT2_OVER_4 * (bmd - emh),
        SQRT2_OVER_4 * (bpd + fpg),
        SQRT2_OVER_4 * (bmd + emh),
    ])
    return np.moveaxis(out, 0, axis)


def regular_to_isotypical(y: np.ndarray, axis: int = -1) -> np.ndarray:
    """Inverse butterfly, regular domain back to isotypic components (transpose network)."""
    ys = np.moveaxis(np.asarray(y), axis, 0)
    if ys.shape[0] != 8:
        raise ValueError(f"axis {axis} must have length 8, got {ys.shape[0]}")
    y0, y1, y2, y3, y4, y5, y6, y7 = ys
    p0 = y0 + y2
    m0 = y0 - y2
    p1 = y1 + y3
    m1 = y1 - y3
    p2 = y4 + y6
    m2 = y4 - y6
    p3 = y5 + y7
    m3 = y5 - y7
    a = p0 + p1
    b = p0 - p1
    c = p2 + p3
    d = p2 - p3
    e = m0 + m1
    f = m0 - m1
    g = m2 + m3
    h = m2 - m3
    out = np.stack([
        SQRT2_OVER_4 * (a + c),
        SQRT2_OVER_4 * (a - c),
        SQRT2_OVER_4 * (b + d),
        SQRT2_OVER_4 * (b - d),
        SQRT2_OVER_4 * (e - g),
        SQRT2_OVER_4 * (f + h),
        SQRT2_OVER_4 * (f - h),
        SQRT2_OVER_4 * (-(e + g)),
    ])
    return np.moveaxis(out, 0, axis)
