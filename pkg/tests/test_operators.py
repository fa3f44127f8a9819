import numpy as np
import pytest
import scipy.sparse as sp
import sympy

from hypolab.errors import ParameterError, RangeError, ResolutionError
from hypolab.grid import Grid
from hypolab.operators import (ModelSpec, adjoint, adjoint_coefficients, assemble, conjugate_by_weight,
                               conjugate_coefficients, equilibrium, export_triplets, read_triplets)
from hypolab.weights import WeightSpec, mass


def _pair(grid, f, g):
    return float(np.dot(grid.weights, f * g))


def test_homogeneous_steady_state():
    op = assemble(ModelSpec("HomogeneousFP", Grid.velocity(512, 8.0), gamma=2.0))
    mu = equilibrium(op.spec)
    assert np.abs(op.L @ mu).max() < 1e-8


def test_potential_steady_state():
    op = assemble(ModelSpec("PotentialKFP", Grid.line(32, 32, 4.0, 6.0), beta=2.0))
    mu = equilibrium(op.spec)
    assert mass(mu, op.grid) == pytest.approx(1.0, abs=1e-10)
    assert np.linalg.norm(op.L @ mu) / np.linalg.norm(mu) < 1e-6


@pytest.mark.parametrize("kind,make", [
    ("HomogeneousFP", lambda n: Grid.velocity(n, 6.0)),
    ("TorusKFP", lambda n: Grid.torus(8, n, 6.0)),
])
def test_steady_state_second_order(kind, make):
    # γ = 3 makes the discrete equilibrium differ from the sampled one at O(h²)
    res = []
    for n in (32, 64, 128):
        op = assemble(ModelSpec(kind, make(n), gamma=3.0))
        g = op.grid
        mu = np.exp(-(1 + g.vabs2) ** 1.5 / 3)
        mu /= mass(mu, g)
        res.append(np.linalg.norm(op.L @ mu) / np.linalg.norm(mu))
    if max(res) < 1e-12:
        return
    orders = np.log2(np.array(res[:-1]) / np.array(res[1:]))
    assert np.all(orders > 1.8), orders


def test_mass_conservation_and_splitting(torus_small, rng):
    op = torus_small
    f = rng.standard_normal(op.n)
    assert abs(mass(op.L @ f, op.grid)) < 1e-10
    assert abs(op.L - op.A - op.B).max() < 1e-14
    a = op.A.toarray()
    assert np.allclose(a, np.diag(np.diag(a)))
    assert np.all(np.diag(a) >= 0)
    cols = op.grid.weights @ op.L
    assert np.abs(cols).max() < 1e-12


def test_cutoff_support(harmonic_1d):
    op = harmonic_1d
    diag = op.A.diagonal()
    v = np.abs(op.grid.v)
    assert np.all(diag[v >= 2 * op.spec.R] == 0)
    assert np.allclose(diag[v <= op.spec.R], op.spec.M)


def test_adjoint_pairing_and_involution(harmonic_1d, rng):
    op = harmonic_1d
    adj = adjoint(op)
    g = op.grid
    f, h = rng.standard_normal((2, op.n))
    assert _pair(g, op.L @ f, h) == pytest.approx(_pair(g, f, adj.L @ h), abs=1e-12 * np.abs(op.L).max() * 10)
    back = adjoint(adj)
    assert abs(back.L - op.L).max() < 1e-12
    assert abs(adj.A - op.A).max() == 0
    assert np.abs(adj.L @ np.ones(op.n)).max() < 1e-8


def test_flat_space_symmetry():
    op = assemble(ModelSpec("HomogeneousFP", Grid.velocity(128, 7.0), gamma=2.0))
    mu = equilibrium(op.spec)
    c = op.L.toarray()
    sym = np.diag(mu ** -0.5) @ c @ np.diag(mu ** 0.5)
    assert np.abs(sym - sym.T).max() < 1e-10 * np.abs(sym).max()


def test_conjugation(harmonic_1d):
    op = harmonic_1d
    same = conjugate_by_weight(op, np.ones(op.n))
    assert abs(same.L - op.L).max() == 0
    small = assemble(ModelSpec("HomogeneousFP", Grid.velocity(48, 6.0), gamma=2.0, M=3.0, R=2.0))
    conj = conjugate_by_weight(small, WeightSpec("PolyV", k=3.0))
    e1 = np.sort_complex(np.linalg.eigvals(small.L.toarray()))
    e2 = np.sort_complex(np.linalg.eigvals(conj.L.toarray()))
    assert np.abs(e1 - e2).max() < 1e-8


def test_conjugation_overflow():
    op = assemble(ModelSpec("HomogeneousFP", Grid.velocity(32, 40.0), gamma=2.0))
    with pytest.raises(RangeError):
        conjugate_by_weight(op, WeightSpec("GaussianInv", theta=2.0, gamma=2.0))


def test_conjugated_adjoint_coefficients_against_symbolic():
    # independent oracle: expand m·(C* − Mχ)(m^{-1} h) with C = ∂² + v∂ + 1 (γ = 2)
    v, M = sympy.symbols("v M", real=True)
    h = sympy.Function("h")(v)
    chi = sympy.Function("chi")(v)
    m = (1 + v ** 2) ** sympy.Rational(3, 2)
    u = h / m
    expr = sympy.expand(m * (sympy.diff(u, v, 2) - v * sympy.diff(u, v) - M * chi * u) )
    c2 = sympy.simplify(expr.coeff(sympy.diff(h, v, 2)))
    rest = sympy.expand(expr - c2 * sympy.diff(h, v, 2))
    c1 = sympy.simplify(rest.coeff(sympy.diff(h, v)))
    c0 = sympy.simplify(sympy.expand(rest - c1 * sympy.diff(h, v)).coeff(h))
    assert sympy.simplify(c2 - 1) == 0
    vs = np.linspace(-20, 20, 101)
    mv, chiv = 2.7, np.cos(vs) ** 2
    react_ref = sympy.lambdify((v, M, chi), c0)(vs, mv, chiv)
    drift_ref = sympy.lambdify(v, c1)(vs) * np.ones_like(vs)
    reaction, drift = adjoint_coefficients(1.0 - mv * chiv, vs[:, None], np.ones_like(vs))
    b2 = 1 + vs ** 2
    gl = (3 * vs / b2)[:, None]
    lap = 3 / b2 + 3 * vs ** 2 / b2 ** 2
    new_r, new_d = conjugate_coefficients(reaction, drift, gl, lap)
    assert np.abs(new_r - react_ref).max() < 1e-10 * np.abs(react_ref).max()
    assert np.abs(new_d[:, 0] - drift_ref).max() < 1e-10 * np.abs(drift_ref).max()


def test_invalid_models():
    with pytest.raises(ResolutionError):
        Grid.velocity(4, 5.0)
    with pytest.raises(ParameterError):
        ModelSpec("TorusKFP", Grid.velocity(16, 5.0))
    with pytest.raises(ParameterError):
        ModelSpec("HomogeneousFP", Grid.velocity(16, 5.0), M=-1.0)
    with pytest.raises(ParameterError):
        ModelSpec("Unknown", Grid.velocity(16, 5.0))


def test_triplet_roundtrip(tmp_path, torus_small):
    path, side = export_triplets(torus_small, tmp_path / "L.txt")
    back = read_triplets(path)
    assert side.exists()
    assert abs(back - torus_small.L).max() == 0


def test_nyquist_filter(rng):
    op = assemble(ModelSpec("TorusKFP", Grid.torus(8, 16, 6.0)))
    f = rng.standard_normal(op.n)
    g = op.nyquist_filter(f)
    fh = op.to_fourier(g)
    assert np.abs(fh[4]).max() < 1e-12
    assert np.allclose(op.nyquist_filter(g), g)


def test_torus_blocks_match_matrix(torus_small, rng):
    op = torus_small
    f = rng.standard_normal(op.n)
    blocks = op.fourier_blocks("L")
    via_blocks = op.from_fourier(np.einsum("kij,kj->ki", blocks, op.to_fourier(f)))
    filt = op.nyquist_filter
    assert np.abs(filt(via_blocks) - filt(op.L @ f)).max() < 1e-9 * np.abs(op.L @ f).max()
