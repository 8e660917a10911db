"""Packed monomial features and the multiplicity-weighted inner product.

``phi`` evaluates every row of the index matrix as a direct product of the
gathered coordinates, multiplied left to right. Batched variants accept
``(n, d_K)`` arrays and return ``(n, m)``.

Single-vector features also carry the rounding error of each product
(error-free transformations), and ``weighted_inner`` uses it to form a
compensated dot product. Near-orthogonal pairs make ``(q . k)^p`` tiny next
to the individual terms, and plain double sums lose all relative accuracy
there; the compensated sum stays accurate to roughly ``u^2`` times the
condition number. The attention paths use the plain batched products.
"""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np

from .basis import BasisFamily, DegreeBasis
from .exceptions import DomainError


@dataclass(frozen=True)
class FeatureVector:
    degree: int
    values: np.ndarray
    # exact product minus ``values``, to second order; None means unknown (zero)
    errors: np.ndarray | None = None


_SPLITTER = 134217729.0  # 2**27 + 1


def _split(a):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def two_product(a, b):
    """``(p, e)`` with ``p = fl(a*b)`` and ``a*b = p + e`` exactly (Dekker).

    Non-finite products get ``e = 0``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    with np.errstate(invalid="ignore", over="ignore"):
        e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, np.where(np.isfinite(e), e, 0.0)


def _as_matrix(x, key_width, dtype=np.float64):
    x = np.asarray(x, dtype=dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != key_width:
        raise DomainError(f"expected vectors of length {key_width}, got shape {x.shape}")
    return x, single


def _gather_product(xt: np.ndarray, index_matrix: np.ndarray) -> np.ndarray:
    # xt is (d, n); returns (rows, n). Product order is column 0, 1, 2, ...
    rows = index_matrix.shape[0]
    if index_matrix.shape[1] == 0:
        return np.ones((rows, xt.shape[1]), dtype=xt.dtype)
    out = xt[index_matrix[:, 0]]
    for j in range(1, index_matrix.shape[1]):
        out *= xt[index_matrix[:, j]]
    return out


def _gather_product_compensated(xt, index_matrix):
    rows = index_matrix.shape[0]
    if index_matrix.shape[1] == 0:
        return np.ones((rows, xt.shape[1])), np.zeros((rows, xt.shape[1]))
    hi = xt[index_matrix[:, 0]]
    lo = np.zeros_like(hi)
    for j in range(1, index_matrix.shape[1]):
        x = xt[index_matrix[:, j]]
        hi, e = two_product(hi, x)
        lo = lo * x + e
    return hi, lo


def phi_batch(x, basis: DegreeBasis, dtype=np.float64) -> np.ndarray:
    """Degree-``p`` features for each row of ``x``; shape ``(n, m_p)``."""
    x, _ = _as_matrix(x, basis.key_width, dtype)
    return _gather_product(np.ascontiguousarray(x.T), basis.gather_indices).T


def phi(x, basis: DegreeBasis) -> FeatureVector:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DomainError(f"phi takes a single vector, got shape {x.shape}")
    x, _ = _as_matrix(x, basis.key_width)
    hi, lo = _gather_product_compensated(np.ascontiguousarray(x.T), basis.gather_indices)
    return FeatureVector(basis.degree, hi[:, 0], lo[:, 0])


def phi_weighted(x, basis: DegreeBasis, prescale: float = 1.0) -> FeatureVector:
    """Features pre-multiplied by ``prescale * multiplicities``.

    ``phi(q).values @ phi_weighted(k, a).values == a * weighted_inner(phi(q), phi(k))``.
    """
    f = phi(x, basis)
    w = prescale * basis.multiplicities
    return FeatureVector(basis.degree, w * f.values, w * f.errors)


def inner_terms(a: FeatureVector, b: FeatureVector, basis: DegreeBasis) -> np.ndarray:
    """Floats whose exact sum is the weighted inner product, to second order."""
    if a.degree != basis.degree or b.degree != basis.degree:
        raise DomainError(
            f"degree mismatch: features {a.degree}, {b.degree}; basis {basis.degree}"
        )
    if a.values.shape != (basis.basis_size,) or b.values.shape != (basis.basis_size,):
        raise DomainError("feature length does not match basis size")
    zero = np.zeros(basis.basis_size)
    a_err = zero if a.errors is None else a.errors
    b_err = zero if b.errors is None else b.errors
    mult = basis.multiplicities.astype(np.float64)
    t, t_err = two_product(a.values, b.values)
    s, s_err = two_product(mult, t)
    cross = mult * (t_err + a.values * b_err + a_err * b.values)
    return np.concatenate([s, s_err, cross])


def weighted_inner(a: FeatureVector, b: FeatureVector, basis: DegreeBasis) -> float:
    """``sum_i C[i] a[i] b[i]``, summed with compensation."""
    return math.fsum(inner_terms(a, b, basis).tolist())


def extended_transpose(x, key_width: int, dtype=np.float64) -> np.ndarray:
    """``(d_K + 1, n)`` copy of ``x.T`` with a trailing row of ones.

    The packed index matrix pads lower degrees with index ``d_K``, which
    selects the row of ones.
    """
    x, _ = _as_matrix(x, key_width, dtype)
    ext = np.empty((key_width + 1, x.shape[0]), dtype=dtype)
    ext[:key_width] = x.T
    ext[key_width] = 1.0
    return ext


def packed_features_t(ext: np.ndarray, family: BasisFamily, rows: slice | None = None) -> np.ndarray:
    """Transposed packed features ``(m, n)`` from :func:`extended_transpose` output."""
    idx = family.packed_indices if rows is None else family.packed_indices[rows]
    return _gather_product(ext, idx)


def fill_group_features_t(ext: np.ndarray, src: np.ndarray, groups, g0: int, g1: int,
                          out: np.ndarray) -> np.ndarray:
    """Transposed features of row groups ``g0:g1`` of one degree, written into ``out``.

    ``groups`` is an entry of :attr:`BasisFamily.row_groups`; ``src`` holds
    the parent rows (indexed by packed row). Each row is its prefix row times
    one more coordinate, the same left-to-right product as direct
    evaluation, so values are bitwise identical; only contiguous slices are read.
    """
    parents, first, starts = groups
    d = ext.shape[0] - 1
    base = starts[g0]
    for g in range(g0, g1):
        np.multiply(ext[first[g]:d], src[parents[g]], out=out[starts[g] - base:starts[g + 1] - base])
    return out[:starts[g1] - base]


def lower_features_t(ext: np.ndarray, family: BasisFamily) -> np.ndarray:
    """Transposed features of every degree below the top one, ``(offsets[-2], n)``.

    With ``P = 1`` the only (top) degree is the constant, returned as one row.
    """
    if family.truncation_order == 1:
        return np.ones((1, ext.shape[1]), dtype=ext.dtype)
    low = np.empty((family.offsets[-2], ext.shape[1]), dtype=ext.dtype)
    low[0] = 1.0
    for groups in family.row_groups[:-1]:
        starts = groups[2]
        fill_group_features_t(ext, low, groups, 0, len(starts) - 1, low[starts[0]:])
    return low


def family_features(x, family: BasisFamily, dtype=np.float64) -> np.ndarray:
    """Features of every degree, concatenated in degree order; ``(n, m_total)``."""
    ext = extended_transpose(x, family.key_width, dtype)
    return np.ascontiguousarray(packed_features_t(ext, family).T)
