import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from hypolab.errors import DataError, ParameterError, ResolutionError, UsageError
from hypolab.grid import Grid
from hypolab.operators import ModelSpec, assemble, equilibrium
from hypolab.semigroup import (OperatorFamily, Trajectory, convolve, convolve_family, duhamel_reconstruct,
                               fit_decay, fit_power, iterated_AS_B, propagate, sample_semigroup,
                               simpson_weights, time_ladder)
from hypolab.weights import NormSpec, WeightSpec, mass

L2MU = NormSpec("Lp", 2.0, WeightSpec("GaussianInv", theta=1.0, gamma=2.0))


def _scalar_family(lam, t_end, dt):
    n = int(round(t_end / dt))
    return OperatorFamily(dt, np.exp(lam * dt * np.arange(n + 1)))


def test_propagate_trivial_cases(rng):
    f0 = rng.standard_normal(10)
    tr = propagate(np.zeros((10, 10)), f0, [0.0, 0.5, 1.0])
    assert np.array_equal(tr.states[0], f0)
    assert np.allclose(tr.states, f0[None])
    with pytest.raises(ParameterError):
        propagate(np.zeros((2, 2)), np.ones(2), [1.0, 0.5])
    with pytest.raises(ParameterError):
        propagate(np.zeros((2, 2)), np.ones(2), [0.0], scheme="rk4")


@pytest.mark.parametrize("scheme,tol", [("cn", 0.03), ("implicit-euler", 0.03), ("expm", 0.03)])
def test_hermite_mode_rate(harmonic_1d, scheme, tol):
    op = harmonic_1d
    mu = equilibrium(op.spec)
    f0 = op.grid.v * mu
    tr = propagate(op, f0, np.linspace(0, 6, 61), scheme=scheme, norms=[L2MU], store=False)
    assert fit_decay(tr, L2MU.column).rate == pytest.approx(-1.0, rel=tol)


def test_semigroup_property(harmonic_1d, rng):
    op = harmonic_1d
    f0 = rng.standard_normal(op.n) * equilibrium(op.spec)
    s, t = 0.3, 0.7
    a = propagate(op, f0, [0.0, s + t], scheme="expm").states[-1]
    mid = propagate(op, f0, [0.0, t], scheme="expm").states[-1]
    b = propagate(op, mid, [0.0, s], scheme="expm").states[-1]
    assert np.abs(a - b).max() < 1e-10 * np.abs(a).max()


def test_mass_and_positivity(harmonic_1d, torus_small, rng):
    op = harmonic_1d
    f0 = rng.random(op.n)
    tr = propagate(op, f0, np.linspace(0, 2, 11), scheme="implicit-euler")
    assert np.abs(tr.masses - tr.masses[0]).max() < 1e-12
    assert tr.states.min() >= 0
    g0 = rng.random(torus_small.n)
    tr = propagate(torus_small, g0, np.linspace(0, 2, 11))
    assert np.abs(tr.masses - tr.masses[0]).max() < 1e-12 * tr.masses[0]


def test_trajectory_csv(tmp_path, harmonic_1d):
    op = harmonic_1d
    tr = propagate(op, equilibrium(op.spec), [0.0, 0.1], norms=[L2MU], store=False)
    path = tr.to_csv(tmp_path / "t.csv")
    rows = [line.split(",") for line in path.read_text().splitlines()]
    assert rows[0] == ["t", "mass", L2MU.column]
    assert all(float(x) == float(x) for x in rows[1])


def test_convolution_identity_and_scalar():
    dt, t = 1e-3, 1.0
    one = OperatorFamily(dt, np.broadcast_to(np.eye(3), (1001, 3, 3)).copy())
    assert np.allclose(convolve(one, one, t), t * np.eye(3), atol=1e-12)
    lam = -0.7
    s = _scalar_family(lam, 2.0, dt)
    for tt in (0.5, 1.0, 1.999):
        assert float(convolve(s, s, tt)) == pytest.approx(tt * math.exp(lam * tt), abs=1e-8)


def test_convolution_mismatch():
    a = _scalar_family(-1.0, 1.0, 1e-2)
    b = _scalar_family(-1.0, 1.0, 2e-2)
    with pytest.raises(UsageError):
        convolve(a, b, 0.5)
    with pytest.raises(UsageError):
        a.at(0.005)


@settings(max_examples=25, deadline=None)
@given(x=st.floats(-2, 2), y=st.floats(-2, 2), l1=st.floats(-2, 0.5), l2=st.floats(-2, 0.5))
def test_convolution_bilinear(x, y, l1, l2):
    dt = 1e-3
    f, g, h = _scalar_family(l1, 1.0, dt), _scalar_family(l2, 1.0, dt), _scalar_family(-0.3, 1.0, dt)
    comb = OperatorFamily(dt, x * f.values + y * g.values)
    lhs = float(convolve(comb, h, 1.0))
    rhs = x * float(convolve(f, h, 1.0)) + y * float(convolve(g, h, 1.0))
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_inductive_convolution_powers():
    # S^{(*ℓ)} = S ∗ S^{(*(ℓ−1))}; for S = e^{λt}: t^{ℓ−1}/(ℓ−1)! e^{λt}
    dt, lam = 1e-3, -0.5
    s = _scalar_family(lam, 1.0, dt)
    cur = s
    for ell in range(2, 5):
        cur = convolve_family(cur, s)
        assert float(cur.at(1.0)) == pytest.approx(math.exp(lam) / math.factorial(ell - 1), abs=1e-8)


def test_iterated_scalar_closed_form():
    a, b, t = 0.7, -0.4, 1.5
    mats = (np.array([[a + b]]), np.array([[a]]), np.array([[b]]))
    assert iterated_AS_B(mats, 1, t)[0, 0] == pytest.approx(a * math.exp(b * t), rel=1e-12)
    assert iterated_AS_B(mats, 2, t)[0, 0] == pytest.approx(a * a * t * math.exp(b * t), abs=1e-8)


def test_iterated_resolution_error():
    rot = np.array([[0.0, -30.0], [30.0, 0.0]])
    a = np.array([[1.0, 0.0], [0.0, 0.0]])
    mats = (rot + a, a, rot)
    with pytest.raises(ResolutionError):
        iterated_AS_B(mats, 3, 1.0, nodes_per_unit=10)
    assert np.all(np.isfinite(iterated_AS_B(mats, 3, 1.0, nodes_per_unit=4000)))


def test_duhamel_reconstruction(rng):
    for n in (1, 2, 3):
        a = np.diag(rng.random(10))
        b = rng.standard_normal((10, 10)) / 3 - np.eye(10)
        for variant in ("SA", "AS"):
            _, res = duhamel_reconstruct((a + b, a, b), n, 1.0, variant=variant)
            assert res < 1e-6
    recon, res = duhamel_reconstruct((b, np.zeros((10, 10)), b), 2, 0.8)
    assert np.abs(recon - sla.expm(0.8 * b)).max() < 1e-10
    eye, res = duhamel_reconstruct((b, np.zeros((10, 10)), b), 2, 0.0)
    assert res == 0 and np.array_equal(eye, np.eye(10))


def test_iterated_torus_growth():
    op = assemble(ModelSpec("TorusKFP", Grid.torus(8, 16, 6.0), gamma=2.0, M=4.0, R=1.41))
    norms = []
    for t in (0.5, 1.0, 2.0):
        blocks = iterated_AS_B(op, 2, t, nodes_per_unit=200, check=False)
        norms.append(max(np.linalg.norm(b, 2) for b in blocks))
    # certified abscissa ≤ −1 for these (M, R): growth stays below C e^{−t/2}·t
    assert norms[2] < norms[1] * 2


def test_fits():
    t = np.linspace(0, 10, 101)
    tr = Trajectory(t, None, np.zeros_like(t), {"q": 3.0 * np.exp(-2 * t)})
    fit = fit_decay(tr, "q")
    assert fit.rate == pytest.approx(-2.0, abs=1e-6) and fit.prefactor == pytest.approx(3.0, rel=1e-6)
    tp = np.geomspace(1e-3, 1.0, 40)
    tr = Trajectory(tp, None, np.zeros_like(tp), {"q": 5.0 * tp ** -1.5})
    assert fit_power(tr, "q").power == pytest.approx(1.5, abs=1e-9)
    bad = Trajectory(t, None, np.zeros_like(t), {"q": -np.exp(-t)})
    with pytest.raises(DataError):
        fit_decay(bad, "q")
    flat = Trajectory(t, None, np.zeros_like(t), {"q": np.exp(-0.01 * t)})
    with pytest.raises(DataError):
        fit_decay(flat, "q")


def test_helpers():
    assert simpson_weights(4, 0.25).sum() == pytest.approx(1.0)
    assert simpson_weights(5, 0.2).sum() == pytest.approx(1.0)
    lad = time_ladder(5.0)
    assert lad[0] == 0 and lad[-1] == 5.0 and np.all(np.diff(lad) > 0)
    fam = sample_semigroup(np.array([[-1.0]]), 1.0, 0.1)
    assert fam.at(1.0)[0, 0] == pytest.approx(math.exp(-1.0))
