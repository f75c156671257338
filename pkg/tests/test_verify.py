import itertools
import math

import numpy as np
import pytest

from misa import verify
from misa.sampler import kl_regularized_objective, optimal_distribution


def brute_grid_max(gains, eta, M):
    best = -math.inf
    B = len(gains)
    for ks in itertools.product(range(M + 1), repeat=B - 1):
        last = M - sum(ks)
        if last < 0:
            continue
        p = np.array([*ks, last]) / M
        best = max(best, kl_regularized_objective(p, gains, eta))
    return best


@pytest.mark.parametrize("gains,eta", [([0.3, 2.0, 1.1], 0.5), ([4.0, 0.0, 2.5, 1.0], 1.0), ([1.0, 1.0], 0.1)])
def test_dp_grid_matches_brute_force(gains, eta):
    M = 20
    assert verify.grid_maximum(gains, eta, 1 / M) == pytest.approx(brute_grid_max(gains, eta, M), abs=1e-12)


def test_grid_argmax_two_modules():
    gains = [0.7, 2.2]
    p = verify.grid_argmax_2(gains, 1.0, 1e-4)
    assert np.allclose(p, optimal_distribution(gains, 1.0), atol=1e-4)


def test_suite_result_bookkeeping():
    res = verify.SuiteResult("x")
    assert not res.ok
    res.check(True, "a")
    res.check(False, "b")
    assert res.passed == 1 and res.total == 2 and res.failures == ["b"]
    assert res.line() == "[FAIL] x: 1/2"


@pytest.mark.parametrize("name", ["dominance", "activations", "lowerbound"])
def test_fast_suites_pass(name):
    (res,) = verify.run_suite(name)
    assert res.ok, res.failures[:5]


def test_unknown_suite():
    with pytest.raises(KeyError):
        verify.run_suite("nope")
