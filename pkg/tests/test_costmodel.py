import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from taylor_attention import costmodel as cm
from taylor_attention.attention import init_state
from taylor_attention.basis import build_basis_family
from taylor_attention.exceptions import DomainError

WIDTHS = list(range(1, 9)) + [16, 32, 64, 128]


def test_state_size_examples():
    assert cm.hidden_state_size_degree(2, 2, 2) == 9
    assert cm.hidden_state_size_degree(5, 7, 0) == 8
    assert cm.hidden_state_size_degree(64, 64, 3) == 2_974_400
    assert cm.hidden_state_size_total(64, 64, 4) == 3_113_825
    assert cm.hidden_state_size_total(9, 3, 1) == 4


def test_flops_examples():
    assert cm.flops_per_token_degree(2, 2, 2) == 48
    assert cm.flops_per_token_degree(64, 64, 0) == 260
    assert cm.flops_per_token_degree(64, 64, 3) == 12_172_160
    assert cm.flops_per_token_total(64, 64, 4) == 12_738_308
    assert cm.flops_per_token_total(2, 2, 3) == 88
    assert cm.flops_per_token_closed_form(2, 2, 3) == 88


@pytest.mark.parametrize("d", WIDTHS)
def test_order_one_edge(d):
    # both forms reduce to 4 d_V + 4 at P = 1
    assert cm.flops_per_token_total(d, d, 1) == 4 * d + 4
    assert cm.flops_per_token_closed_form(d, d, 1) == 4 * d + 4


@pytest.mark.parametrize("d", WIDTHS)
@pytest.mark.parametrize("P", range(1, 7))
def test_closed_forms_equal_sums(d, P):
    assert cm.hidden_state_size_total(d, d, P) == cm.hidden_state_size_sum(d, d, P)
    cf = cm.flops_per_token_closed_form(d, d, P)
    assert isinstance(cf, Fraction)
    assert cf == cm.flops_per_token_sum(d, d, P)


def test_no_disagreements_reported():
    assert cm.closed_form_disagreements(WIDTHS, range(1, 7)) == []


@given(dk=st.integers(1, 200), dv=st.integers(1, 200), P=st.integers(1, 8))
def test_closed_forms_agree_everywhere(dk, dv, P):
    assert cm.flops_per_token_closed_form(dk, dv, P) == cm.flops_per_token_sum(dk, dv, P)
    assert cm.hidden_state_size_total(dk, dv, P) == cm.hidden_state_size_sum(dk, dv, P)


def test_conventional():
    assert cm.conventional_costs(1, 64, 64) == (128, 259)
    assert cm.conventional_costs(100_000, 64, 64)[0] == 12_800_000
    with pytest.raises(DomainError):
        cm.conventional_costs(0, 64, 64)


def test_naive_feature_count():
    assert cm.naive_feature_count(2, 3) == 8
    assert cm.naive_feature_count(64, 3) == 262_144
    assert cm.naive_feature_count(128, 12) == 128**12  # exact big integer
    ratios = [cm.basis_size(64, p) / cm.naive_feature_count(64, p) for p in range(2, 6)]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] < 1e-2


def test_crossover():
    assert cm.crossover_context_length(64, 64, 4) == 24_327
    for d in (1, 2, 8, 64):
        assert cm.crossover_context_length(d, d, 1) in (1, 2)
    values = [cm.crossover_context_length(16, 16, P) for P in range(1, 7)]
    assert values == sorted(values)


@given(dk=st.integers(1, 64), dv=st.integers(1, 64), P=st.integers(1, 5))
def test_crossover_is_smallest(dk, dv, P):
    n = cm.crossover_context_length(dk, dv, P)
    size = cm.hidden_state_size_total(dk, dv, P)
    assert n * (dk + dv) > size
    assert n == 1 or (n - 1) * (dk + dv) <= size


@pytest.mark.parametrize("dk,dv,P", [(8, 8, 4), (3, 5, 2), (2, 2, 3), (1, 4, 6)])
def test_matches_real_state(dk, dv, P):
    state = init_state(build_basis_family(dk, P, value_width=dv), dv)
    assert state.element_count == cm.hidden_state_size_total(dk, dv, P)


def test_head_scaling():
    sizes = [cm.multihead_state_size(64, H, 4) for H in (1, 2, 4, 8)]
    assert sizes[0] == 3_113_825
    assert sizes == [H * cm.hidden_state_size_total(64 // H, 64 // H, 4) for H in (1, 2, 4, 8)]
    assert all(a > b for a, b in zip(sizes, sizes[1:]))
    flops = [cm.multihead_flops(64, H, 4) for H in (1, 2, 4, 8)]
    assert all(a > b for a, b in zip(flops, flops[1:]))
    with pytest.raises(DomainError):
        cm.multihead_state_size(64, 3, 2)


@pytest.mark.parametrize("bad", [(0, 1, 1), (1, 0, 1), (1, 1, -1), (1.5, 1, 1)])
def test_domain_checks(bad):
    with pytest.raises(DomainError):
        cm.hidden_state_size_degree(*bad)


class Counted:
    """Float wrapper that tallies arithmetic."""

    tally = {"mul": 0, "add": 0, "div": 0}

    def __init__(self, x):
        self.x = x

    def __mul__(self, o):
        Counted.tally["mul"] += 1
        return Counted(self.x * o.x)

    def __add__(self, o):
        Counted.tally["add"] += 1
        return Counted(self.x + o.x)

    def __truediv__(self, o):
        Counted.tally["div"] += 1
        return Counted(self.x / o.x)


def counted_update_and_read(dk, dv, P, rng):
    """Scalar transcription of update_state + read_output on the packed layout."""
    fam = build_basis_family(dk, P, value_width=dv)
    Counted.tally = {"mul": 0, "add": 0, "div": 0}
    k = [Counted(x) for x in rng.standard_normal(dk)] + [Counted(1.0)]
    q = [Counted(x) for x in rng.standard_normal(dk)] + [Counted(1.0)]
    v = [Counted(x) for x in rng.standard_normal(dv)]
    m = fam.total_size
    Z = [Counted(0.0) for _ in range(m)]
    S = [[Counted(0.0) for _ in range(dv)] for _ in range(m)]

    def feature(x, row):
        idx = fam.packed_indices[row]
        out = x[idx[0]] if len(idx) else Counted(1.0)
        for j in idx[1:]:
            out = out * x[j]
        return out

    for r in range(m):
        f = feature(k, r) * Counted(fam.packed_weights[r])
        Z[r] = Z[r] + f
        for j in range(dv):
            S[r][j] = S[r][j] + f * v[j]
    den, num = Counted(0.0), [Counted(0.0) for _ in range(dv)]
    for r in range(m):
        fq = feature(q, r)
        den = den + fq * Z[r]
        for j in range(dv):
            num[j] = num[j] + fq * S[r][j]
    [n / den for n in num]
    return dict(Counted.tally)


@pytest.mark.parametrize("dk,dv,P", [(2, 2, 3), (3, 2, 4), (4, 1, 2), (1, 3, 5)])
def test_census_matches_instrumented_count(rng, dk, dv, P):
    got = counted_update_and_read(dk, dv, P, rng)
    census = cm.flop_census(dk, dv, P)
    assert {k: census[k] for k in ("mul", "add", "div")} == got


def test_census_fixture_and_factor():
    assert cm.flop_census(2, 2, 3) == {"mul": 48, "add": 36, "div": 2, "flops": 84}
    assert cm.flop_census(7, 3, 1) == {"mul": 8, "add": 8, "div": 3, "flops": 16}
    for d in (1, 2, 4, 8, 16, 64):
        for P in range(1, 7):
            ratio = Fraction(cm.flop_census(d, d, P)["flops"]) / cm.flops_per_token_total(d, d, P)
            assert Fraction(4, 5) <= ratio <= Fraction(5, 4)


def test_cost_report_row():
    r = cm.cost_report(64, 64, 4, 1_000_000)
    assert r.csv_row() == [64, 64, 4, 1_000_000, 1, 3_113_825, 12_738_308, 128_000_000,
                           259_000_000, 1 + 64 + 64**2 + 64**3, 24_327]
    assert len(cm.COST_COLUMNS) == len(r.csv_row())


def test_cost_report_heads_and_context_independence():
    a = cm.cost_report(16, 16, 3, 1000, heads=4)
    b = cm.cost_report(16, 16, 3, 10**7, heads=4)
    assert a.hidden_state_elements == b.hidden_state_elements == 4 * cm.hidden_state_size_total(16, 16, 3)
    assert b.kv_cache_elements == 4 * 10**7 * 32
