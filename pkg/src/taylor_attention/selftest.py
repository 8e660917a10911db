"""Desk-scale invariant suite behind ``taylor-attention selftest``."""

from __future__ import annotations

import math
import time
from fractions import Fraction
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import costmodel
from .attention import attend_scan, attend_stream, init_state, update_state
from .basis import build_basis_family, build_degree_basis, hidden_state_elements
from .bench import sample_tokens
from .featuremap import phi, weighted_inner
from .kernel import kernel_truncated


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def check_basis(build: Callable = build_degree_basis, widths=range(1, 9), degrees=range(6)):
    """Row counts and multiplicity sums of every basis on the grid."""
    for d in widths:
        for p in degrees:
            b = build(d, p)
            if b.basis_size != math.comb(d + p - 1, p):
                return False, f"basis_size invariant broken at d_K={d}, p={p}"
            if int(b.multiplicities.sum()) != d**p:
                return False, (f"multiplicity-sum invariant broken at d_K={d}, p={p}: "
                               f"{int(b.multiplicities.sum())} != {d**p}")
    return True, f"{len(widths) * len(degrees)} bases"


def exact_dot(q, k) -> Fraction:
    return sum((Fraction(a) * Fraction(b) for a, b in zip(q.tolist(), k.tolist())), Fraction(0))


def relative_error(got: float, want: Fraction) -> float:
    if want == 0:
        return abs(got)
    return float(abs(Fraction(got) - want) / abs(want))


def check_polynomial_identity(seed: int, pairs: int = 100, rtol: float = 1e-10):
    """Weighted inner products of features equal powers of the dot product.

    The reference power is computed in exact rational arithmetic.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d in range(1, 9):
        q = rng.standard_normal((pairs, d))
        k = rng.standard_normal((pairs, d))
        dots = [exact_dot(a, b) for a, b in zip(q, k)]
        for p in range(6):
            b = build_degree_basis(d, p)
            for qi, ki, dot in zip(q, k, dots):
                got = weighted_inner(phi(qi, b), phi(ki, b), b)
                worst = max(worst, relative_error(got, dot**p))
    return worst <= rtol, f"max relative error {worst:.2e} (tol {rtol:g})"


def check_truncated_kernel(seed: int, pairs: int = 100, rtol: float = 1e-12):
    """Feature-path truncated kernel equals the scalar partial sum."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for d in range(1, 9):
        for P in range(1, 7):
            family = build_basis_family(d, P)
            alphas = [Fraction(a) for a in family.taylor_coefficients.tolist()]
            for _ in range(pairs):
                q, k = rng.standard_normal(d), rng.standard_normal(d)
                z = exact_dot(q, k)
                want = sum(a * z**p for p, a in enumerate(alphas))
                worst = max(worst, relative_error(kernel_truncated(q, k, family), want))
    return worst <= rtol, f"max relative error {worst:.2e} (tol {rtol:g})"


def check_scan_stream(seed: int, n: int = 10_000, d: int = 4, P: int = 4, atol: float = 1e-10):
    family = build_basis_family(d, P)
    tokens = sample_tokens(n, d, seed)
    ref = attend_stream(tokens, family).outputs
    worst = 0.0
    for chunk in (1, 7, 64, 1024):
        worst = max(worst, float(np.abs(attend_scan(tokens, family, chunk).outputs - ref).max()))
    same = np.array_equal(attend_scan(tokens, family, n).outputs, ref)
    return worst <= atol and same, f"max deviation {worst:.2e}; one-chunk bitwise {same}"


def state_size_after(d_k: int, d_v: int, P: int, updates: int, seed: int = 0,
                     block: int = 1024) -> tuple[int, int]:
    """Element count of a state before and after ``updates`` real token updates."""
    family = build_basis_family(d_k, P, value_width=d_v)
    state = init_state(family, d_v)
    before = state.element_count
    rng = np.random.default_rng(seed)
    done = 0
    while done < updates:
        m = min(block, updates - done)
        update_state(state, rng.standard_normal((m, d_k)), rng.standard_normal((m, d_v)), family)
        done += m
    assert state.token_count == updates
    return before, state.element_count


def check_constant_state(seed: int, configs=((8, 8, 4), (64, 64, 4)), counts=(10**3, 10**6)):
    details = []
    for d_k, d_v, P in configs:
        want = hidden_state_elements(d_k, d_v, P)
        sizes = {state_size_after(d_k, d_v, P, n, seed)[1] for n in counts}
        if sizes != {want}:
            return False, f"({d_k},{d_v},{P}): sizes {sorted(sizes)} != {want}"
        details.append(f"({d_k},{d_v},{P})={want}")
    return True, ", ".join(details)


def check_cost_model():
    widths, orders = (16, 32, 64, 128), range(1, 7)
    bad = costmodel.closed_form_disagreements(widths, orders)
    if bad:
        return False, f"closed form differs from per-degree sum: {bad}"
    if costmodel.flops_per_token_total(64, 64, 4) != 12_738_308:
        return False, "flops_per_token_total(64, 64, 4) != 12,738,308"
    if costmodel.conventional_costs(1, 64, 64) != (128, 259):
        return False, "conventional_costs(1, 64, 64) != (128, 259)"
    return True, "closed forms agree with sums; spot values match"


def run_selftest(seed: int = 0, *, quick: bool = False, checks=None) -> list[CheckResult]:
    """Run the invariant suite. ``quick`` drops the 10^6-update state check."""
    if checks is None:
        checks = [
            ("basis", lambda: check_basis()),
            ("polynomial_identity", lambda: check_polynomial_identity(seed)),
            ("truncated_kernel", lambda: check_truncated_kernel(seed)),
            ("scan_stream", lambda: check_scan_stream(seed)),
            ("constant_state", (lambda: check_constant_state(seed, configs=((8, 8, 4),),
                                                            counts=(10**3, 10**4)))
             if quick else (lambda: check_constant_state(seed))),
            ("cost_model", check_cost_model),
        ]
    results = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - t0))
    return results
