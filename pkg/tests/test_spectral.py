import warnings

import numpy as np
import pytest

from hypolab.errors import ConditioningError, ContourError, ParameterError
from hypolab.grid import Grid
from hypolab.operators import ModelSpec, assemble, conjugate_by_weight, equilibrium
from hypolab.spectral import (MultiplicityWarning, apply_projector, eigenspace_transfer, spectral_gap,
                              spectral_projector, spectrum, verify_factorization)
from hypolab.weights import WeightSpec, mass


def _random_split(rng, n=20):
    a = np.diag(rng.random(n))
    b = rng.standard_normal((n, n)) / np.sqrt(n) - 2.0 * np.eye(n)
    return a + b, a, b


def test_diagonal_spectrum_and_projector():
    d = np.diag([0.0, -1.0, -2.0])
    rep = spectrum(d, count=3, method="dense")
    assert np.array_equal(rep.eigenvalues.real, [0.0, -1.0, -2.0])
    p = spectral_projector(d, 0.0, 0.5)
    assert np.abs(p - np.diag([1.0, 0.0, 0.0])).max() < 1e-10


def test_contour_error():
    with pytest.raises(ContourError):
        spectral_projector(np.diag([0.0, -1.0]), 0.0, 0.98)


def test_harmonic_spectrum_shift_invert():
    op = assemble(ModelSpec("HomogeneousFP", Grid.velocity(512, 8.0), gamma=2.0))
    rep = spectrum(op, count=4, method="shift-invert")
    assert np.allclose(rep.eigenvalues.real, [0, -1, -2, -3], atol=0.02 * 3)
    for z, target in zip(rep.eigenvalues.real, [0, -1, -2, -3]):
        assert abs(z - target) <= 0.02 * max(1, abs(target))
    assert rep.zero_modes == 1
    assert rep.gap == pytest.approx(1.0, rel=0.02)


def test_nonnormal_projector_properties(rng):
    l_m, _, _ = _random_split(rng)
    eigs = np.linalg.eigvals(l_m)
    z0 = eigs[np.argmax(eigs.real)]
    gaps = np.abs(eigs - z0)
    r = 0.5 * np.sort(gaps)[1]
    p, res = spectral_projector(l_m, z0, r, nodes=128, return_residual=True)
    assert res < 1e-10
    assert np.abs(p @ l_m - l_m @ p).max() < 1e-9 * np.abs(l_m).max()
    rank = round(np.trace(p).real)
    p2 = spectral_projector(l_m, z0, r, nodes=256)
    assert round(np.trace(p2).real) == rank
    assert np.abs(p - p2).max() < 1e-9


def test_torus_gap_and_projector(torus_small, rng):
    rep = spectrum(torus_small, count=4)
    assert rep.zero_modes == 1 and rep.gap > 0
    f = torus_small.nyquist_filter(rng.standard_normal(torus_small.n))
    pf = apply_projector(torus_small, f, 0.0, 0.5 * rep.gap)
    mu = equilibrium(torus_small.spec)
    assert np.abs(pf - mass(f, torus_small.grid) * mu).max() < 1e-10 * np.abs(mu).max()


def test_sparse_apply_projector(harmonic_1d, rng):
    f = rng.standard_normal(harmonic_1d.n)
    pf = apply_projector(harmonic_1d, f, 0.0, 0.5)
    mu = equilibrium(harmonic_1d.spec)
    assert np.abs(pf - mass(f, harmonic_1d.grid) * mu).max() < 1e-8 * np.abs(mu).max()


def test_similarity_invariance():
    op = assemble(ModelSpec("HomogeneousFP", Grid.velocity(64, 6.0), gamma=2.0, M=3.0, R=2.0))
    conj = conjugate_by_weight(op, WeightSpec("PolyV", k=3.0))
    e1 = spectrum(op, count=5, method="dense").eigenvalues
    e2 = spectrum(conj, count=5, method="dense").eigenvalues
    assert np.abs(e1 - e2).max() < 1e-8


def test_factorization_identities(rng):
    l_m, a, b = _random_split(rng)
    zs = 1.0 + rng.standard_normal(10) + 1j * rng.standard_normal(10)
    rep = verify_factorization(l_m, a, b, zs, orders=(1, 2, 3, 4))
    assert rep.worst < 1e-10
    zero = verify_factorization(b, np.zeros_like(a), b, zs[:3])
    assert zero.worst < 1e-13
    m_small = np.exp(rng.random(20))
    rep_w = verify_factorization(l_m, a, b, zs[:3], weight_small=m_small * 2, weight_large=m_small)
    assert rep_w.worst < 1e-9


def test_factorization_conditioning(rng):
    l_m, a, b = _random_split(rng)
    z = np.linalg.eigvals(l_m)[0] + 1e-13
    with pytest.raises(ConditioningError):
        verify_factorization(l_m, a, b, [z])


def test_eigenspace_transfer_null_vector():
    op = assemble(ModelSpec("TorusKFP", Grid.torus(16, 32, 7.0), gamma=2.0))
    rep = eigenspace_transfer(op, (WeightSpec("GaussianInv", theta=1.0, gamma=2.0), WeightSpec("PolyV", k=3.0)))
    assert rep.max_angle < 1e-6
    same = eigenspace_transfer(op, (None, None))
    assert same.max_angle < 1e-12


def test_eigenspace_hermite():
    op = assemble(ModelSpec("HomogeneousFP", Grid.velocity(512, 8.0), gamma=2.0))
    mu = equilibrium(op.spec)
    rep = eigenspace_transfer(op, (None, None), reference=op.grid.v * mu, index=1)
    assert rep.max_angle < 1e-2


def test_multiplicity_warning():
    op = assemble(ModelSpec("TorusKFP", Grid.torus(16, 24, 6.0), gamma=2.0))
    # the ±k blocks give complex-conjugate or equal pairs; ask for the second mode
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        rep = eigenspace_transfer(op, (None, None), count=2)
    assert rep.dimension >= 2
    if rep.degenerate:
        assert any(issubclass(w.category, MultiplicityWarning) for w in rec)


def test_gap_helper():
    gap, nz = spectral_gap(np.array([0.0, -0.5 + 1j, -0.5 - 1j, -2.0]))
    assert gap == pytest.approx(0.5) and nz == 1
    with pytest.raises(ParameterError):
        spectrum(np.eye(3), count=0)


def test_factorization_residual_is_roundoff(rng):
    l_m, a, b = _random_split(rng)
    zs = 1.0 + rng.standard_normal(5) + 1j * rng.standard_normal(5)
    rep = verify_factorization(l_m, a, b, zs)
    cond = max(np.linalg.cond(l_m - z * np.eye(20)) * np.linalg.cond(b - z * np.eye(20)) for z in zs)
    assert rep.worst <= 1e3 * np.finfo(float).eps * cond
