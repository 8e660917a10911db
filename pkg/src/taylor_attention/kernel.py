"""Exact and truncated exponential kernels."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .basis import BasisFamily, build_basis_family
from .exceptions import DomainError
from .featuremap import inner_terms, phi, two_product


@dataclass(frozen=True)
class KernelConfig:
    truncation_order: int
    scale: float

    def __post_init__(self):
        if self.truncation_order < 1:
            raise DomainError("truncation_order must be >= 1")
        if not self.scale > 0:
            raise DomainError("scale must be positive")


def _pair(q, k):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 1 or q.shape != k.shape:
        raise DomainError(f"query/key shape mismatch: {q.shape} vs {k.shape}")
    return q, k


def kernel_exact(q, k, scale: float) -> float:
    q, k = _pair(q, k)
    if not scale > 0:
        raise DomainError("scale must be positive")
    return math.exp(float(q @ k) / scale)


def kernel_truncated(q, k, config: KernelConfig | BasisFamily) -> float:
    """``sum_{p<P} alpha_p <phi_p(q), phi_p(k)>_{C_p}`` via the feature maps."""
    q, k = _pair(q, k)
    if isinstance(config, BasisFamily):
        family = config
        if family.key_width != q.shape[0]:
            raise DomainError("family key width does not match vectors")
    else:
        family = build_basis_family(q.shape[0], config.truncation_order, config.scale)
    parts = []
    for basis, alpha in zip(family.degree_bases, family.taylor_coefficients):
        hi, lo = two_product(alpha, inner_terms(phi(q, basis), phi(k, basis), basis))
        parts.append(hi)
        parts.append(lo)
    # one compensated sum over every degree: the partial sum can cancel
    # (e.g. 1 + z near z = -1) and rounding each degree first would show
    return math.fsum(np.concatenate(parts).tolist())


def truncation_residual(dot_over_c: float, P: int) -> float:
    """``|exp(z) - sum_{p<P} z^p / p!|``."""
    z = float(dot_over_c)
    partial, term = 0.0, 1.0
    for p in range(P):
        if p:
            term *= z / p
        partial += term
    return abs(math.exp(z) - partial)
