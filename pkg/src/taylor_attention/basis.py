"""Minimal monomial basis for powers of a dot product.

For degree ``p`` over ``d_K``-dimensional inputs, the symmetric tensor
``x^{(x)p}`` has only ``C(d_K + p - 1, p)`` distinct entries, indexed by
nondecreasing tuples ``i_1 <= ... <= i_p``. Each distinct entry stands for
``p! / prod(count_j!)`` entries of the full tensor.

Indices are 1-based in the public model (``index_matrix``, CSV export).
``DegreeBasis.gather_indices`` is the only 0-based view.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .exceptions import DomainError, ElementBudgetError

DEFAULT_ELEMENT_BUDGET = 2**28

CSV_HEADER = ("degree", "row", "indices", "multiplicity")


def _check_sizes(key_width, degree):
    if not isinstance(key_width, (int, np.integer)) or key_width < 1:
        raise DomainError(f"key_width must be an integer >= 1, got {key_width!r}")
    if not isinstance(degree, (int, np.integer)) or degree < 0:
        raise DomainError(f"degree must be an integer >= 0, got {degree!r}")


def enumerate_index_tuples(key_width: int, degree: int) -> list[tuple[int, ...]]:
    """All nondecreasing ``degree``-tuples over ``1..key_width``, lexicographic."""
    _check_sizes(key_width, degree)
    return list(
        itertools.combinations_with_replacement(range(1, key_width + 1), degree)
    )


def tuple_multiplicity(indices: Sequence[int]) -> int:
    """Number of distinct permutations of a nondecreasing index tuple."""
    indices = tuple(indices)
    if any(a > b for a, b in zip(indices, indices[1:])):
        raise DomainError(f"index tuple must be nondecreasing, got {indices}")
    out = math.factorial(len(indices))
    for count in Counter(indices).values():
        out //= math.factorial(count)
    return out


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DegreeBasis:
    degree: int
    key_width: int
    index_matrix: np.ndarray  # (m_p, p), 1-based
    multiplicities: np.ndarray  # (m_p,), int64
    gather_indices: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index_matrix", _frozen(self.index_matrix))
        object.__setattr__(self, "multiplicities", _frozen(self.multiplicities))
        object.__setattr__(self, "gather_indices", _frozen(self.index_matrix - 1))

    @property
    def basis_size(self) -> int:
        return int(self.multiplicities.shape[0])

    def rows(self):
        return [tuple(int(i) for i in row) for row in self.index_matrix]


def build_degree_basis(key_width: int, degree: int) -> DegreeBasis:
    tuples = enumerate_index_tuples(key_width, degree)
    index_matrix = np.array(tuples, dtype=np.int64).reshape(len(tuples), degree)
    multiplicities = np.array([tuple_multiplicity(t) for t in tuples], dtype=np.int64)
    return DegreeBasis(degree, key_width, index_matrix, multiplicities)


def taylor_coefficients(truncation_order: int, scale: float) -> np.ndarray:
    """``1 / (p! c^p)`` for ``p < truncation_order``, by running division."""
    alphas = np.empty(truncation_order)
    alpha = 1.0
    for p in range(truncation_order):
        if p:
            alpha /= p * scale
        alphas[p] = alpha
    return alphas


def hidden_state_elements(key_width: int, value_width: int, truncation_order: int) -> int:
    return (value_width + 1) * math.comb(key_width + truncation_order - 1, truncation_order - 1)


@dataclass(frozen=True)
class BasisFamily:
    """Bases for degrees ``0..P-1`` at a fixed key width, plus Taylor weights.

    Besides the per-degree bases, the family holds a packed layout that
    concatenates every degree's rows: ``packed_indices`` is padded to width
    ``P - 1`` with the index ``key_width``, which feature evaluation points at
    an appended constant one. ``packed_weights`` holds ``alpha_p * C_p``.
    """

    key_width: int
    truncation_order: int
    scale: float
    degree_bases: tuple[DegreeBasis, ...]
    taylor_coefficients: np.ndarray
    packed_indices: np.ndarray = field(init=False, repr=False, compare=False)
    packed_weights: np.ndarray = field(init=False, repr=False, compare=False)
    offsets: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "taylor_coefficients", _frozen(self.taylor_coefficients))
        width = self.truncation_order - 1
        blocks, weights, offsets = [], [], [0]
        for basis, alpha in zip(self.degree_bases, self.taylor_coefficients):
            block = np.full((basis.basis_size, width), self.key_width, dtype=np.int64)
            block[:, : basis.degree] = basis.gather_indices
            blocks.append(block)
            weights.append(alpha * basis.multiplicities.astype(np.float64))
            offsets.append(offsets[-1] + basis.basis_size)
        object.__setattr__(self, "packed_indices", _frozen(np.concatenate(blocks)))
        object.__setattr__(self, "packed_weights", _frozen(np.concatenate(weights)))
        object.__setattr__(self, "offsets", tuple(offsets))

    @property
    def total_size(self) -> int:
        """Number of packed features across all degrees."""
        return self.offsets[-1]

    def degree_slice(self, p: int) -> slice:
        return slice(self.offsets[p], self.offsets[p + 1])

    def state_elements(self, value_width: int) -> int:
        return (value_width + 1) * self.total_size

    @cached_property
    def row_groups(self) -> tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]:
        """Rows of each degree ``p >= 1`` grouped by their leading ``p - 1`` indices.

        In lexicographic order the rows sharing a prefix are contiguous, and
        the prefixes are exactly the rows of degree ``p - 1`` in order. Entry
        ``p - 1`` is ``(parents, first, starts)``: group ``g`` extends packed
        row ``parents[g]`` by the last index ``first[g], ..., key_width - 1``
        (0-based) and fills packed rows ``starts[g]:starts[g + 1]``.
        """
        out = []
        for p in range(1, self.truncation_order):
            prev = self.degree_bases[p - 1]
            parents = self.offsets[p - 1] + np.arange(prev.basis_size)
            if p == 1:
                first = np.zeros(1, dtype=np.int64)
            else:
                first = prev.gather_indices[:, -1].astype(np.int64)
            starts = self.offsets[p] + np.concatenate([[0], np.cumsum(self.key_width - first)])
            out.append((_frozen(parents), _frozen(first), _frozen(starts)))
        return tuple(out)


def build_basis_family(
    key_width: int,
    truncation_order: int,
    scale: float | None = None,
    *,
    value_width: int | None = None,
    max_elements: int = DEFAULT_ELEMENT_BUDGET,
) -> BasisFamily:
    """Precompute every degree basis for a truncated expansion.

    ``scale`` defaults to ``sqrt(key_width)``. The element budget is checked
    against the attention state this family implies; ``value_width`` defaults
    to ``key_width``.
    """
    _check_sizes(key_width, 0)
    if not isinstance(truncation_order, (int, np.integer)) or truncation_order < 1:
        raise DomainError(f"truncation_order must be an integer >= 1, got {truncation_order!r}")
    if scale is None:
        scale = math.sqrt(key_width)
    if not np.isfinite(scale) or scale <= 0:
        raise DomainError(f"scale must be positive, got {scale!r}")
    if value_width is None:
        value_width = key_width
    if value_width < 1:
        raise DomainError(f"value_width must be >= 1, got {value_width!r}")
    elements = hidden_state_elements(key_width, value_width, truncation_order)
    if elements > max_elements:
        raise ElementBudgetError(elements, max_elements)
    bases = tuple(build_degree_basis(key_width, p) for p in range(truncation_order))
    return BasisFamily(
        int(key_width),
        int(truncation_order),
        float(scale),
        bases,
        taylor_coefficients(truncation_order, float(scale)),
    )


def write_basis_csv(bases: Sequence[DegreeBasis], stream) -> None:
    """Write bases as ``degree,row,indices,multiplicity`` rows."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for basis in bases:
        for row, (indices, mult) in enumerate(zip(basis.index_matrix, basis.multiplicities)):
            writer.writerow(
                [basis.degree, row, "|".join(str(int(i)) for i in indices), int(mult)]
            )


def basis_csv(bases: Sequence[DegreeBasis]) -> str:
    buf = io.StringIO()
    write_basis_csv(bases, buf)
    return buf.getvalue()


def read_basis_csv(stream, key_width: int) -> list[DegreeBasis]:
    """Inverse of :func:`write_basis_csv`. Rows are taken in file order."""
    reader = csv.DictReader(stream)
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise DomainError(f"unexpected basis CSV header {reader.fieldnames}")
    grouped: dict[int, list[tuple[tuple[int, ...], int]]] = {}
    for rec in reader:
        indices = tuple(int(i) for i in rec["indices"].split("|")) if rec["indices"] else ()
        grouped.setdefault(int(rec["degree"]), []).append((indices, int(rec["multiplicity"])))
    out = []
    for degree in sorted(grouped):
        rows = grouped[degree]
        M = np.array([r[0] for r in rows], dtype=np.int64).reshape(len(rows), degree)
        C = np.array([r[1] for r in rows], dtype=np.int64)
        out.append(DegreeBasis(degree, key_width, M, C))
    return out
