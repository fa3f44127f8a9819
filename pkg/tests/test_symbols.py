import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hypolab.errors import InfeasibilityError, ParameterError, UsageError
from hypolab.grid import Grid
from hypolab.symbols import (SymbolSpec, asymptotic, certify, eval_finf_drift, eval_potential_drift, eval_psi0,
                             eval_psi1, eval_psi2, lyapunov_residual, search_appendix_abc, search_cutoff,
                             smooth_positive_samples, weight_multiplier)
from hypolab.weights import WeightSpec

POLY3 = WeightSpec("PolyV", k=3.0)


def test_psi0_at_origin_without_cutoff():
    assert eval_psi0(SymbolSpec("Psi0", POLY3, 2.0, M=0.0), 0.0) == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("gamma,weight,expected", [
    (2.0, POLY3, -2.5),
    (1.0, WeightSpec("StretchedExpV", kappa=0.5, s=1.0, gamma=1.0), -0.25),
    (1.5, WeightSpec("StretchedExpV", kappa=4.0, s=0.5, gamma=1.5), -2.0),
])
def test_psi0_limits(gamma, weight, expected):
    val = eval_psi0(SymbolSpec("Psi0", weight, 2.0, gamma=gamma), 1e3)
    assert val == pytest.approx(expected, rel=0.01)


def test_psi0_superquadratic_envelope():
    w = WeightSpec("StretchedExpV", kappa=0.5, s=1.0, gamma=2.0)
    spec = SymbolSpec("Psi0", w, 2.0, gamma=2.0)
    limit, expo, coef = asymptotic(spec)
    assert limit == -math.inf and expo == pytest.approx(1.0)
    for r in (1e2, 1e3):
        assert eval_psi0(spec, r) == pytest.approx(coef * (1 + r * r) ** (expo / 2), rel=0.02)


def test_psi0_any_p_in_exponential_regime():
    w = WeightSpec("StretchedExpV", kappa=0.5, s=1.0, gamma=1.0)
    for p in (1.0, 1.5, 2.0, 4.0, math.inf):
        assert eval_psi0(SymbolSpec("Psi0", w, p, gamma=1.0), 1e3) == pytest.approx(-0.25, rel=0.01)


def test_finf_drift_value():
    assert eval_finf_drift(SymbolSpec("FinfDrift", d=2, gamma=2.0, p=math.inf)) == pytest.approx(-1.0)


def test_psi2_limit():
    assert asymptotic(SymbolSpec("Psi2", POLY3, 1.0))[0] == pytest.approx(-2.0)


def test_psi1_matches_psi0_for_exponential_weights():
    w = WeightSpec("StretchedExpV", kappa=0.5, s=1.0)
    rel = []
    for r in (1e2, 1e3, 1e4):
        a = eval_psi1(SymbolSpec("Psi1", w, 2.0, eps=0.01), r)
        b = eval_psi0(SymbolSpec("Psi0", w, 2.0), r)
        rel.append(abs(a - b) / abs(b))
    assert rel[0] > rel[1] > rel[2] and rel[2] < 1e-3


def test_evaluator_mismatch():
    with pytest.raises(UsageError):
        eval_psi0(SymbolSpec("Psi2", POLY3, 2.0), 0.0)
    with pytest.raises(ParameterError):
        SymbolSpec("Psi1", POLY3, 2.0, eps=0.0)


def test_certify_examples():
    rep = certify(SymbolSpec("Psi0", POLY3, 2.0, M=20.0, R=4.0))
    assert rep.admissible and rep.certified <= -1.0
    # radial sweep oracle on a fresh grid
    r = np.concatenate([np.linspace(0, 20, 4001), np.geomspace(20, 1e3, 2000)])
    vals = eval_psi0(SymbolSpec("Psi0", POLY3, 2.0, M=20.0, R=4.0), r)
    assert rep.certified >= vals.max() - 1e-6
    bad = certify(SymbolSpec("Psi0", POLY3, 2.0, M=0.0, R=3.0))
    assert not bad.admissible
    expo = certify(SymbolSpec("Psi0", WeightSpec("StretchedExpV", kappa=0.5, s=1.0), 2.0, M=10.0, R=4.0))
    assert expo.limit == -math.inf and expo.admissible


def test_certify_monotone_in_M_and_k():
    prev = math.inf
    for m in (1.0, 2.0, 4.0, 8.0, 16.0, 32.0):
        val = certify(SymbolSpec("Psi0", POLY3, 2.0, M=m, R=3.0)).certified
        assert val <= prev + 1e-12
        prev = val
    # in k once M dominates the k²/4 bump of |∇m/m|² inside the cutoff region
    prev = math.inf
    for k in (2.0, 3.0, 4.0, 6.0, 8.0):
        val = certify(SymbolSpec("Psi0", WeightSpec("PolyV", k=k), 2.0, M=64.0, R=3.0)).certified
        assert val <= prev + 1e-12
        prev = val


def test_fixed_cutoff_k_monotonicity_breaks():
    # with M fixed and small, the inner sup grows like k²/4 (recorded, see ledger)
    low = certify(SymbolSpec("Psi0", WeightSpec("PolyV", k=4.0), 2.0, M=8.0, R=3.0)).certified
    high = certify(SymbolSpec("Psi0", WeightSpec("PolyV", k=6.0), 2.0, M=8.0, R=3.0)).certified
    assert high > low


def test_search_cutoff():
    spec = SymbolSpec("Psi0", POLY3, 2.0)
    m, r = search_cutoff(spec, -2.0)
    assert certify(spec.with_cutoff(m, r)).certified <= -2.1
    with pytest.raises(InfeasibilityError, match="-2.5"):
        search_cutoff(spec, -3.0)
    w3 = WeightSpec("StretchedExpV", kappa=0.5, s=1.0, gamma=3.0)
    spec3 = SymbolSpec("Psi0", w3, 2.0, gamma=3.0)
    for target in (-1.0, -5.0):
        m, r = search_cutoff(spec3, target)
        assert certify(spec3.with_cutoff(m, r)).certified <= target - 0.1


def test_potential_multiplier():
    w, h = weight_multiplier(0.0, 0.0, 0.7, 2.0)
    assert w == pytest.approx(1.0)
    x, v = np.meshgrid(np.linspace(-40, 40, 801), np.linspace(-40, 40, 801))
    for alpha in (0.1, 1.0, 5.0):
        for beta in (2.0, 3.0):
            w, h = weight_multiplier(x, v, alpha, beta)
            assert w.min() >= 0.5 and w.max() <= 1.5
            assert np.all(x * v <= h)
    with pytest.raises(ParameterError):
        weight_multiplier(0.0, 0.0, 0.0, 2.0)


def test_potential_certification():
    spec = SymbolSpec("PotPolyDrift", WeightSpec("PolyH", k=6.0, beta=2.0), 2.0, beta=2.0)
    m, r, alpha = search_cutoff(spec, -0.1)
    assert certify(SymbolSpec("PotPolyDrift", WeightSpec("PolyH", k=6.0, beta=2.0), 2.0, beta=2.0,
                              M=m, R=r, alpha=alpha)).certified < 0
    vals = eval_potential_drift(SymbolSpec("PotPolyDrift", WeightSpec("PolyH", k=6.0, beta=2.0), 2.0, beta=2.0),
                                np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    assert np.all(np.isfinite(vals))


def test_appendix_lattice():
    abc, val = search_appendix_abc(2.0)
    assert val < 0
    a, b, c = abc
    assert c < math.sqrt(a * b)
    with pytest.raises(ParameterError):
        SymbolSpec("AppendixPotDrift", appendix_abc=(1.0, 1.0, 2.0))


def test_lyapunov_identity_master():
    spec = SymbolSpec("Psi0", POLY3, 2.0, M=4.0, R=2.83)
    worst = []
    for n in (128, 256, 512):
        g = Grid.velocity(n, 8.0)
        fs = smooth_positive_samples(g, 20, np.random.default_rng(7))
        worst.append(max(lyapunov_residual(spec, f, g)["residual"] for f in fs))
    assert worst[-1] < 1e-3
    assert np.all(np.log2(np.array(worst[:-1]) / np.array(worst[1:])) >= 1.0)


@settings(max_examples=20, deadline=None)
@given(p=st.floats(1.2, 4.0), k=st.floats(2.0, 6.0), seed=st.integers(0, 1000))
def test_lyapunov_identity_random_exponents(p, k, seed):
    spec = SymbolSpec("Psi0", WeightSpec("PolyV", k=k), p, M=2.0, R=2.0)
    g = Grid.velocity(512, 8.0)
    f = smooth_positive_samples(g, 1, np.random.default_rng(seed))[0]
    assert lyapunov_residual(spec, f, g)["residual"] < 5e-3


def test_asymptotics_fast():
    t0 = time.perf_counter()
    for gamma, w in [(2.0, POLY3), (1.0, WeightSpec("StretchedExpV", kappa=0.5, s=1.0, gamma=1.0))]:
        spec = SymbolSpec("Psi0", w, 2.0, gamma=gamma)
        assert eval_psi0(spec, 1e3) == pytest.approx(asymptotic(spec)[0], rel=0.01)
    assert time.perf_counter() - t0 < 5.0
