"""Closed-form state sizes and FLOP counts, ours versus a KV cache.

Everything here is exact integer or :class:`fractions.Fraction` arithmetic.
The per-degree sums are normative; the closed forms are cross-checks, and
:func:`closed_form_disagreements` reports any configuration where they part.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .exceptions import DomainError


def _check(d_K, d_V=1, p=0):
    for name, val, lo in (("d_K", d_K, 1), ("d_V", d_V, 1), ("p", p, 0)):
        if not isinstance(val, int) or val < lo:
            raise DomainError(f"{name} must be an integer >= {lo}, got {val!r}")


def basis_size(d_K: int, p: int) -> int:
    _check(d_K, 1, p)
    return math.comb(d_K + p - 1, p)


def hidden_state_size_degree(d_K: int, d_V: int, p: int) -> int:
    _check(d_K, d_V, p)
    return (d_V + 1) * math.comb(d_K + p - 1, p)


def hidden_state_size_total(d_K: int, d_V: int, P: int) -> int:
    _check(d_K, d_V, P - 1)
    return (d_V + 1) * math.comb(d_K + P - 1, P - 1)


def hidden_state_size_sum(d_K: int, d_V: int, P: int) -> int:
    return sum(hidden_state_size_degree(d_K, d_V, p) for p in range(P))


def flops_per_token_degree(d_K: int, d_V: int, p: int) -> int:
    _check(d_K, d_V, p)
    return (4 * d_V + 2 * p + 4) * math.comb(d_K + p - 1, p)


def flops_per_token_sum(d_K: int, d_V: int, P: int) -> int:
    _check(d_K, d_V, P - 1)
    return sum(flops_per_token_degree(d_K, d_V, p) for p in range(P))


def flops_per_token_closed_form(d_K: int, d_V: int, P: int) -> Fraction:
    _check(d_K, d_V, P - 1)
    return (4 * d_V + Fraction(2 * (P * d_K + 1), d_K + 1) + 2) * math.comb(d_K + P - 1, P - 1)


def flops_per_token_total(d_K: int, d_V: int, P: int) -> Fraction:
    """FLOPs per token over all degrees, as an exact rational.

    Returns the per-degree sum; the closed form is evaluated alongside and
    must agree (see :func:`closed_form_disagreements`).
    """
    return Fraction(flops_per_token_sum(d_K, d_V, P))


def conventional_costs(n: int, d_K: int, d_V: int) -> tuple[int, int]:
    """``(kv_cache_elements, flops_per_token)`` for softmax attention at context ``n``.

    FLOPs: ``2 n d_K`` for logits, ``3 n`` for the softmax, ``2 n d_V`` for
    contracting with values (one query, one head).
    """
    _check(d_K, d_V)
    if not isinstance(n, int) or n < 1:
        raise DomainError(f"n must be an integer >= 1, got {n!r}")
    return n * (d_K + d_V), n * (2 * d_K + 2 * d_V + 3)


def naive_feature_count(d_K: int, p: int) -> int:
    _check(d_K, 1, p)
    return d_K**p


def crossover_context_length(d_K: int, d_V: int, P: int) -> int:
    """Smallest ``n`` whose KV cache holds more elements than our state."""
    return hidden_state_size_total(d_K, d_V, P) // (d_K + d_V) + 1


def multihead_state_size(width: int, heads: int, P: int) -> int:
    if width % heads:
        raise DomainError(f"width {width} is not divisible by {heads} heads")
    d = width // heads
    return heads * hidden_state_size_total(d, d, P)


def multihead_flops(width: int, heads: int, P: int) -> Fraction:
    if width % heads:
        raise DomainError(f"width {width} is not divisible by {heads} heads")
    d = width // heads
    return heads * flops_per_token_total(d, d, P)


def closed_form_disagreements(widths, orders) -> list[dict]:
    """Configurations where a closed form differs from its per-degree sum."""
    out = []
    for d in widths:
        for P in orders:
            size_sum = hidden_state_size_sum(d, d, P)
            size_cf = hidden_state_size_total(d, d, P)
            flops_sum = flops_per_token_sum(d, d, P)
            flops_cf = flops_per_token_closed_form(d, d, P)
            if size_sum != size_cf or flops_sum != flops_cf:
                out.append(dict(d_k=d, d_v=d, P=P, size_sum=size_sum, size_closed=size_cf,
                                flops_sum=flops_sum, flops_closed=flops_cf))
    return out


def flop_census(d_K: int, d_V: int, P: int) -> dict[str, int]:
    """Operation counts of one ``update_state`` plus one ``read_output``.

    Mirrors the implementation line by line, per packed row of degree ``p``:

    * key and query features: ``P - 2`` multiplies each over the ``P - 1`` padded
      index columns (padded rows multiply by one; none at ``P = 1``)
    * weight folding: 1 multiply
    * ``Z += f``: 1 add; ``S += f v^T``: ``d_V`` multiplies and ``d_V`` adds
    * readout ``f_q . Z``: 1 multiply, 1 add; ``f_q^T S``: ``d_V`` each

    plus ``d_V`` divisions for the final ratio. Divisions are counted
    separately from the multiply/add total. The total stays within 0.8x to
    1.25x of :func:`flops_per_token_total`: padding makes low degrees pay for
    products they do not need, and reusing one feature for both ``Z`` and
    ``S`` saves work the per-degree formula counts twice.
    """
    _check(d_K, d_V, P - 1)
    m = math.comb(d_K + P - 1, P - 1)
    feature_mul = 2 * max(P - 2, 0) * m
    mul = feature_mul + m + m * d_V + m + m * d_V
    add = m + m * d_V + m + m * d_V
    return {"mul": mul, "add": add, "div": d_V, "flops": mul + add}


@dataclass(frozen=True)
class CostReport:
    d_k: int
    d_v: int
    P: int
    n: int
    heads: int
    hidden_state_elements: int
    flops_per_token: Fraction
    kv_cache_elements: int
    conventional_flops_per_token: int
    naive_feature_elements: int
    crossover_n: int

    def csv_row(self) -> list:
        flops = self.flops_per_token
        return [
            self.d_k, self.d_v, self.P, self.n, self.heads,
            self.hidden_state_elements,
            flops.numerator if flops.denominator == 1 else str(flops),
            self.kv_cache_elements, self.conventional_flops_per_token,
            self.naive_feature_elements, self.crossover_n,
        ]


COST_COLUMNS = ("d_k", "d_v", "P", "n", "heads", "hidden_state", "flops_ours",
                "kv_cache", "flops_conv", "naive_features", "crossover_n")


def cost_report(d_k: int, d_v: int, P: int, n: int, heads: int = 1) -> CostReport:
    """Costs summed over ``heads`` independent heads of widths ``d_k``/``d_v``.

    ``naive_features`` counts unpacked features per head, ``sum_p d_k^p``.
    """
    kv, conv = conventional_costs(n, d_k, d_v)
    return CostReport(
        d_k, d_v, P, n, heads,
        heads * hidden_state_size_total(d_k, d_v, P),
        heads * flops_per_token_total(d_k, d_v, P),
        heads * kv,
        heads * conv,
        sum(naive_feature_count(d_k, p) for p in range(P)),
        crossover_context_length(d_k, d_v, P),
    )
