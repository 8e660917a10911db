from dataclasses import replace

import numpy as np
import pytest

from taylor_attention import selftest
from taylor_attention.basis import build_degree_basis


def corrupted_build(d, p):
    b = build_degree_basis(d, p)
    if d == 3 and p == 2:
        mult = b.multiplicities.copy()
        mult[1] += 1
        return replace(b, multiplicities=mult)
    return b


def test_basis_check_passes():
    assert selftest.check_basis()[0]


def test_corrupted_multiplicities_named_in_failure():
    ok, detail = selftest.check_basis(build=corrupted_build)
    assert not ok
    assert "multiplicity-sum invariant" in detail and "d_K=3, p=2" in detail


def test_corrupted_basis_fails_the_suite():
    results = selftest.run_selftest(checks=[("basis", lambda: selftest.check_basis(corrupted_build))])
    assert [r.passed for r in results] == [False]


def test_crashing_check_is_a_failure():
    def boom():
        raise RuntimeError("kaput")
    r = selftest.run_selftest(checks=[("boom", boom)])[0]
    assert not r.passed and "kaput" in r.detail


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_quick_suite_passes_for_several_seeds(seed):
    results = selftest.run_selftest(seed, quick=True)
    assert [r.name for r in results] == ["basis", "polynomial_identity", "truncated_kernel",
                                         "scan_stream", "constant_state", "cost_model"]
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_seed_changes_samples_not_verdict():
    a = selftest.check_scan_stream(0, n=500)
    b = selftest.check_scan_stream(1, n=500)
    assert a[0] and b[0]
    assert a[1] != b[1]


def test_state_size_after_updates():
    before, after = selftest.state_size_after(3, 2, 3, 5000)
    assert before == after == 3 * 10


def test_exact_oracle_helpers():
    q, k = np.array([0.1, 0.2]), np.array([0.3, -0.4])
    assert float(selftest.exact_dot(q, k)) == pytest.approx(0.03 - 0.08)
    assert selftest.relative_error(0.0, selftest.exact_dot(q, q) * 0) == 0.0
