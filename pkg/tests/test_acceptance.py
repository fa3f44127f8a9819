"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from hypolab.grid import Grid
from hypolab.inequalities import (band_limited_samples, mass_zero_samples, moment_gain, poincare_constant,
                                  search_energy_coefficients, w1_decay)
from hypolab.operators import ModelSpec, assemble, equilibrium
from hypolab.semigroup import duhamel_reconstruct, fit_decay, propagate
from hypolab.spectral import spectrum, verify_factorization
from hypolab.symbols import (SymbolSpec, certify, eval_psi0, lyapunov_residual, search_appendix_abc,
                             search_cutoff, smooth_positive_samples, weight_multiplier)
from hypolab.weights import NormSpec, WeightSpec, mass

POLY3 = WeightSpec("PolyV", k=3.0)


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def harmonic_512():
    return assemble(ModelSpec("HomogeneousFP", Grid.velocity(512, 8.0), gamma=2.0))


def test_criterion_01_harmonic_spectrum(report):
    t0 = time.perf_counter()
    op = assemble(ModelSpec("HomogeneousFP", Grid.velocity(512, 8.0), gamma=2.0))
    eig = np.sort(spectrum(op, count=4).eigenvalues.real)[::-1]
    dt = time.perf_counter() - t0
    errs = [abs(z - e) / max(1.0, abs(e)) for z, e in zip(eig, (0.0, -1.0, -2.0, -3.0))]
    ok = len(eig) == 4 and max(errs) <= 0.02 and dt < 10
    report(1, ok, f"eigenvalues {np.round(eig, 5).tolist()}, worst rel err {max(errs):.2e}, {dt:.1f}s")


def test_criterion_02_poincare(report, harmonic_512):
    lam = poincare_constant(2.0, 1).constant
    gap = spectrum(harmonic_512, count=3).gap
    ok = abs(lam - 1.0) <= 0.02 and abs(lam - gap) <= 0.01 * gap
    report(2, ok, f"lambda_P {lam:.6f}, spectral gap {gap:.6f}")


def test_criterion_03_symbol_asymptotics(report):
    t0 = time.perf_counter()
    r = 1e3
    br = math.sqrt(1 + r * r)
    # (gamma, weight, closed-form value at |v| = r)
    cases = [
        (2.0, POLY3, (1 - 1 / 2) * 1 - 3.0),
        (1.0, WeightSpec("StretchedExpV", kappa=0.5, s=1.0, gamma=1.0), 0.5 ** 2 - 0.5),
        (1.5, WeightSpec("StretchedExpV", kappa=4.0, s=0.5, gamma=1.5), -4.0 * 0.5),
        (2.0, WeightSpec("StretchedExpV", kappa=0.5, s=1.0, gamma=2.0), -0.5 * 1.0 * br ** (2.0 + 1.0 - 2)),
    ]
    errs = []
    for gamma, w, expected in cases:
        val = float(eval_psi0(SymbolSpec("Psi0", w, 2.0, gamma=gamma), r))
        errs.append(abs(val - expected) / abs(expected))
    dt = time.perf_counter() - t0
    report(3, max(errs) < 0.01 and dt < 5, f"rel errors {[f'{e:.1e}' for e in errs]}, {dt:.2f}s")


def test_criterion_04_lyapunov_identity(report):
    spec = SymbolSpec("Psi0", POLY3, 2.0, M=4.0, R=2.83)
    worst = []
    for n in (128, 256, 512):
        g = Grid.velocity(n, 8.0)
        fs = smooth_positive_samples(g, 20, np.random.default_rng(2024))
        worst.append(max(lyapunov_residual(spec, f, g)["residual"] for f in fs))
    orders = np.log2(np.array(worst[:-1]) / np.array(worst[1:]))
    ok = worst[-1] < 1e-3 and bool(np.all(orders >= 1.0))
    report(4, ok, f"residual at 512 points {worst[-1]:.2e}, observed orders {np.round(orders, 2).tolist()}")


def test_criterion_05_factorization(report):
    rng = np.random.default_rng(55)
    worst_fac = 0.0
    worst_duh = 0.0
    for _ in range(5):
        a = np.diag(rng.random(20))
        b = rng.standard_normal((20, 20)) / math.sqrt(20) - 2.0 * np.eye(20)
        zs = 1.0 + rng.standard_normal(10) + 1j * rng.standard_normal(10)
        worst_fac = max(worst_fac, verify_factorization(a + b, a, b, zs, orders=(1, 2, 3, 4)).worst)
    a = np.diag(rng.random(20))
    b = rng.standard_normal((20, 20)) / math.sqrt(20) - 2.0 * np.eye(20)
    for n in (1, 2, 3, 4):
        for variant in ("SA", "AS"):
            worst_duh = max(worst_duh, duhamel_reconstruct((a + b, a, b), n, 1.0, variant=variant)[1])
    ok = worst_fac < 1e-10 and worst_duh < 1e-6
    report(5, ok, f"factorization {worst_fac:.2e}, duhamel {worst_duh:.2e}")


def test_criterion_06_dissipativity_transfer(report):
    t0 = time.perf_counter()
    M, R = search_cutoff(SymbolSpec("Psi0", POLY3, 2.0, gamma=2.0), -1.0)
    cert = certify(SymbolSpec("Psi0", POLY3, 2.0, gamma=2.0, M=M, R=R)).certified
    op = assemble(ModelSpec("TorusKFP", Grid.torus(64, 64, 7.0), gamma=2.0, M=M, R=R))
    rng = np.random.default_rng(6)
    ns = NormSpec("Lp", 2.0, POLY3)
    times = np.linspace(0.0, 5.0, 51)
    worst = -math.inf
    for f in mass_zero_samples(op, 20, rng):
        y = np.exp(times) * propagate(op, f, times, part="B", norms=[ns], store=False).norms[ns.column]
        worst = max(worst, float((np.diff(y) / y[:-1] / np.diff(times)).max()))
    dt = time.perf_counter() - t0
    ok = cert <= -1.0 and worst < 1e-3 and dt < 120
    report(6, ok, f"(M, R) = ({M:.3g}, {R:.4g}), certified {cert:.4f}, "
                  f"worst relative increase per unit time {worst:.2e}, {dt:.1f}s")


def _cell_spike_gain(n: int) -> float:
    op = assemble(ModelSpec("TorusKFP", Grid.torus(n, n, 7.0), gamma=2.0, M=4.0, R=2.83))
    g = op.grid
    f0 = np.zeros(g.size)
    f0[(g.nx // 2) * g.nv + g.nv // 2] = 1.0
    return search_energy_coefficients(op, f0).h1_gain


def test_criterion_07_regularization(report):
    coarse, fine = _cell_spike_gain(64), _cell_spike_gain(96)
    rel = abs(coarse - fine) / fine
    ok = math.isfinite(coarse) and math.isfinite(fine) and rel <= 0.15
    report(7, ok, f"sup t^(3/2) H1 ratio {coarse:.4f} (64^2) vs {fine:.4f} (96^2), rel diff {rel:.3f}")


def test_criterion_08_decay_across_spaces(report):
    t0 = time.perf_counter()
    op = assemble(ModelSpec("TorusKFP", Grid.torus(64, 64, 7.0), gamma=2.0, M=4.0, R=2.83))
    f = mass_zero_samples(op, 1, np.random.default_rng(8))[0]
    norms = [NormSpec("Lp", 2.0, WeightSpec("GaussianInv", theta=1.0, gamma=2.0)), NormSpec("Lp", 2.0, POLY3),
             NormSpec("Lp", 1.0, POLY3), NormSpec("Wm1p", 2.0, POLY3)]
    traj = propagate(op, f, np.linspace(0.0, 8.0, 41), norms=norms, store=False)
    rates = np.array([fit_decay(traj, n.column).rate for n in norms])
    dt = time.perf_counter() - t0
    spread = (rates.max() - rates.min()) / abs(rates).max()
    ok = bool(np.all(rates <= -0.2)) and spread <= 0.25 and dt < 600
    report(8, ok, f"rates {np.round(rates, 4).tolist()}, spread {spread:.3f}, {dt:.1f}s")


def test_criterion_09_w1_decay(report, harmonic_512):
    g = harmonic_512.grid
    rng = np.random.default_rng(9)
    mu = equilibrium(harmonic_512.spec)
    f0 = mu * (1 + 0.5 * np.sin(6 * rng.random() + g.v)) * np.exp(-0.1 * (g.v - 2 * rng.random()) ** 2)
    f0 /= mass(f0, g)
    fit, _ = w1_decay(harmonic_512, f0)
    report(9, fit.rate <= -0.5, f"fitted W1 rate {fit.rate:.4f}")


def test_criterion_10_potential(report):
    t0 = time.perf_counter()
    g = Grid.line(48, 48, 4.0, 6.0)
    op = assemble(ModelSpec("PotentialKFP", g, gamma=2.0, beta=2.0, M=4.0, R=2.83))
    mu = equilibrium(op.spec)
    ss = float(np.abs(op.matrix("L") @ mu).max() / np.abs(mu).max())
    X, V = np.meshgrid(np.linspace(-50, 50, 2001), np.linspace(-50, 50, 2001))
    w = weight_multiplier(X, V, 0.5, 2.0)[0]
    spec = SymbolSpec("PotPolyDrift", WeightSpec("PolyH", k=6.0, beta=2.0), 2.0, beta=2.0)
    M, R, alpha = search_cutoff(spec, -0.1)
    cert = certify(SymbolSpec("PotPolyDrift", WeightSpec("PolyH", k=6.0, beta=2.0), 2.0, beta=2.0,
                              M=M, R=R, alpha=alpha)).certified
    f = np.sqrt(mu) * band_limited_samples(g, mu, 1, np.random.default_rng(10))[0]
    f -= mass(f, g) * mu
    ns = NormSpec("Lp", 2.0, WeightSpec("PolyH", k=6.0, beta=2.0))
    rate = fit_decay(propagate(op, f, np.linspace(0.0, 10.0, 51), norms=[ns], store=False), ns.column).rate
    dt = time.perf_counter() - t0
    ok = ss < 1e-6 and w.min() >= 0.5 and w.max() <= 1.5 and cert < 0 and rate < 0 and dt < 600
    report(10, ok, f"steady residual {ss:.1e}, w in [{w.min():.4f}, {w.max():.4f}], (M, R, alpha) = "
                   f"({M:.3g}, {R:.4g}, {alpha:.3g}) certified {cert:.4f}, L2(H^6) rate {rate:.4f}, {dt:.1f}s")


def test_criterion_11_moment_gain(report):
    tor = [moment_gain(assemble(ModelSpec("TorusKFP", Grid.torus(n, n, 7.0), gamma=2.0))).ratio for n in (64, 96)]
    abc, _ = search_appendix_abc(2.0)
    pot = [moment_gain(assemble(ModelSpec("PotentialKFP", Grid.line(n, n, 4.0, 6.0), beta=2.0, M=4.0, R=2.83)),
                       abc).ratio for n in (48, 64)]
    rel_t = abs(tor[0] - tor[1]) / tor[1]
    rel_p = abs(pot[0] - pot[1]) / pot[1]
    ok = all(math.isfinite(x) for x in tor + pot) and rel_t <= 0.2 and rel_p <= 0.2
    report(11, ok, f"torus {tor[0]:.4f} vs {tor[1]:.4f} (rel {rel_t:.3f}); potential abc={tuple(round(x, 4) for x in abc)} "
                   f"{pot[0]:.4f} vs {pot[1]:.4f} (rel {rel_p:.3f})")
