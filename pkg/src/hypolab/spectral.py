"""Spectra, spectral gaps, contour projectors and resolvent factorization checks."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CapabilityError, ConditioningError, ContourError, ParameterError, SolverError
from .operators import DiscreteOperator, conjugate_by_weight
from .weights import WeightSpec, weight_on_grid

__all__ = [
    "DENSE_MAX", "SpectrumReport", "FactorizationReport", "TransferReport", "spectrum",
    "spectral_gap", "spectral_projector", "apply_projector", "verify_factorization",
    "eigenspace_transfer",
]

DENSE_MAX = 4000
ZERO_TOL = 1e-6


class MultiplicityWarning(UserWarning):
    """A targeted eigenvalue cluster is degenerate; subspaces are compared instead."""


@dataclass
class SpectrumReport:
    """Rightmost eigenvalues with residuals and the derived spectral gap."""

    eigenvalues: np.ndarray
    residuals: np.ndarray
    gap: float
    zero_modes: int
    method: str
    vectors: np.ndarray | None = field(default=None, repr=False)
    projector_residual: float | None = None
    restriction_residual: float | None = None
    factorization: dict | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": 1, "method": self.method, "gap": self.gap, "zero_modes": self.zero_modes,
            "eigenvalues": [[float(z.real), float(z.imag)] for z in self.eigenvalues],
            "residuals": [float(r) for r in self.residuals],
            "projector_residual": self.projector_residual,
            "restriction_residual": self.restriction_residual,
            "factorization": self.factorization,
        }

    def write(self, stem: str | Path) -> list[Path]:
        stem = Path(stem)
        js = stem.with_suffix(".json")
        js.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        cs = stem.with_suffix(".csv")
        with open(cs, "w") as fh:
            fh.write("re,im,residual\n")
            for z, r in zip(self.eigenvalues, self.residuals):
                fh.write(f"{float(z.real)!r},{float(z.imag)!r},{float(r)!r}\n")
        return [js, cs]


def _as_dense(m) -> np.ndarray:
    return m.toarray() if sp.issparse(m) else np.asarray(m)


def _sort_right(vals, vecs=None):
    order = np.lexsort((-vals.imag, -vals.real))
    return vals[order], (None if vecs is None else vecs[:, order])


def _mass_fraction(vecs: np.ndarray, cell: np.ndarray | float) -> np.ndarray:
    num = np.abs(np.sum(vecs * cell, axis=0))
    den = np.sum(np.abs(vecs) * cell, axis=0)
    return num / np.maximum(den, 1e-300)


def spectral_gap(eigenvalues, mass_fraction=None) -> tuple[float, int]:
    """−max Re λ over eigenvalues with |λ| > 1e-6, plus the count of zero modes.

    A zero mode counts as conservative only if its eigenvector carries
    mass fraction > 0.99 (when fractions are supplied).
    """
    ev = np.asarray(eigenvalues)
    small = np.abs(ev) <= ZERO_TOL
    if mass_fraction is not None:
        small &= np.asarray(mass_fraction) > 0.99
    rest = ev[~small]
    gap = float(-rest.real.max()) if rest.size else float("inf")
    return gap, int(small.sum())


def _block_spectrum(op: DiscreteOperator, part: str, count: int, vectors: bool, resolved_only: bool = True):
    blocks = op.fourier_blocks(part)
    keep = op.resolved_modes() if resolved_only else np.ones(len(blocks), dtype=bool)
    vals, vecs, ks = [], [], []
    for i, b in enumerate(blocks):
        if not keep[i]:
            vecs.append(None)
            continue
        w, v = np.linalg.eig(b)
        vals.append(w)
        vecs.append(v)
        ks.append(np.full(len(w), i))
    vals = np.concatenate(vals)
    kidx = np.concatenate(ks)
    col = np.concatenate([np.arange(b.shape[0]) for b, k in zip(blocks, keep) if k])
    order = np.lexsort((-vals.imag, -vals.real))[:count]
    vals = vals[order]
    res = np.empty(len(order))
    phys = None
    if vectors:
        phys = np.empty((op.n, len(order)), dtype=complex)
    g = op.grid
    for j, o in enumerate(order):
        k, c = kidx[o], col[o]
        vec = vecs[k][:, c]
        res[j] = np.linalg.norm(blocks[k] @ vec - vals[j] * vec) / np.linalg.norm(vec)
        if vectors:
            fh = np.zeros((g.nx, g.nv), dtype=complex)
            fh[k] = vec
            phys[:, j] = op.from_fourier(fh, real=False)
    mf = np.array([1.0 if (kidx[o] == 0) else 0.0 for o in order])
    if vectors:
        mf = _mass_fraction(phys, g.cell_volume)
    return vals, res, phys, mf


def spectrum(op, count: int = 6, method: str = "auto", part: str = "L", sigma: float = 0.5,
             vectors: bool = False, cell: float | np.ndarray = 1.0, resolved_only: bool = True) -> SpectrumReport:
    """Rightmost ``count`` eigenvalues of a matrix or DiscreteOperator.

    method: "dense" (≤ 4000 unknowns), "shift-invert" (ARPACK around ``sigma``),
    "blocks" (torus Fourier blocks) or "auto".  The block method skips the
    unresolved two-grid x-mode unless ``resolved_only`` is False.
    """
    if count < 1:
        raise ParameterError("count must be >= 1")
    if isinstance(op, DiscreteOperator):
        cell = op.grid.cell_volume
        if method in ("auto", "blocks") and op.has_blocks:
            vals, res, vecs, mf = _block_spectrum(op, part, count, vectors, resolved_only)
            gap, nz = spectral_gap(vals, mf)
            return SpectrumReport(vals, res, gap, nz, "blocks", vecs)
        if method == "blocks":
            raise CapabilityError("block method needs a torus operator")
        mat = op.matrix(part)
    else:
        mat = op
        if method == "blocks":
            raise CapabilityError("block method needs a torus operator")
    n = mat.shape[0]
    if method == "auto":
        method = "dense" if n <= DENSE_MAX else "shift-invert"
    if method == "dense":
        if n > DENSE_MAX:
            raise CapabilityError(f"dense eigensolve limited to {DENSE_MAX} unknowns, got {n}")
        a = _as_dense(mat)
        w, v = sla.eig(a)
        w, v = _sort_right(w, v)
        w, v = w[:count], v[:, :count]
    elif method == "shift-invert":
        if count >= n - 1:
            raise ParameterError("shift-invert needs count < n - 1")
        try:
            w, v = spla.eigs(sp.csc_matrix(mat) if sp.issparse(mat) else mat, k=count, sigma=sigma,
                             which="LM", tol=1e-12, maxiter=5000)
        except spla.ArpackNoConvergence as exc:
            raise SolverError(f"ARPACK did not converge; {len(exc.eigenvalues)} of {count} "
                              f"eigenvalues converged") from exc
        w, v = _sort_right(w, v)
        a = mat
    else:
        raise ParameterError(f"unknown method {method!r}")
    res = np.array([np.linalg.norm(a @ v[:, j] - w[j] * v[:, j]) / np.linalg.norm(v[:, j])
                    for j in range(len(w))])
    mf = _mass_fraction(v, cell)
    gap, nz = spectral_gap(w, mf)
    return SpectrumReport(w, res, gap, nz, method, v if vectors else None)


# projectors -----------------------------------------------------------------

def _contour_nodes(center: complex, radius: float, nodes: int):
    theta = 2 * np.pi * (np.arange(nodes) + 0.5) / nodes
    e = np.exp(1j * theta)
    return center + radius * e, -(radius / nodes) * e


def _check_contour(eigs, center, radius):
    dist = np.abs(np.abs(np.asarray(eigs) - center) - radius)
    if dist.min() < radius / 10:
        raise ContourError(f"contour passes within {dist.min():.3g} of the spectrum (radius {radius})")
    return int(np.sum(np.abs(np.asarray(eigs) - center) < radius))


def _polish(p: np.ndarray) -> tuple[np.ndarray, float]:
    res = np.linalg.norm(p @ p - p, 2)
    it = 0
    while 1e-8 < res < 1e-4 and it < 10:
        p2 = p @ p
        p = 3 * p2 - 2 * p2 @ p
        res = np.linalg.norm(p @ p - p, 2)
        it += 1
    return p, float(res)


def _dense_projector(a: np.ndarray, center, radius, nodes):
    n = a.shape[0]
    zs, ws = _contour_nodes(center, radius, nodes)
    eye = np.eye(n)
    p = np.zeros((n, n), dtype=complex)
    for z, w in zip(zs, ws):
        p += w * np.linalg.solve(a - z * eye, eye)
    return p


def spectral_projector(op, center: complex = 0.0, radius: float = 0.5, nodes: int = 64,
                       return_residual: bool = False, resolved_only: bool = True):
    """Riesz projector onto the eigenvalues inside |z − center| < radius.

    Trapezoidal quadrature of (i/2π)∮(Λ − z)^{-1} dz on a counterclockwise
    circle; residual idempotence defects in (1e-8, 1e-4) are polished by
    Newton–Schulz steps.  Torus operators return Fourier blocks (nx, nv, nv);
    with ``resolved_only`` the unresolved two-grid x-mode block is zero.
    """
    if radius <= 0 or nodes < 4:
        raise ParameterError("radius must be positive and nodes >= 4")
    if isinstance(op, DiscreteOperator) and op.has_blocks:
        blocks = op.fourier_blocks("L")
        keep = op.resolved_modes() if resolved_only else np.ones(len(blocks), dtype=bool)
        eigs = np.concatenate([np.linalg.eigvals(b) for b, k in zip(blocks, keep) if k])
        _check_contour(eigs, center, radius)
        out, worst = [], 0.0
        for b, k in zip(blocks, keep):
            if not k:
                out.append(np.zeros_like(b))
                continue
            p, r = _polish(_dense_projector(b, center, radius, nodes))
            out.append(p)
            worst = max(worst, r)
        out = np.array(out)
        return (out, worst) if return_residual else out
    mat = op.matrix("L") if isinstance(op, DiscreteOperator) else op
    if mat.shape[0] > DENSE_MAX:
        raise CapabilityError("dense projector limited to 4000 unknowns; use apply_projector")
    a = _as_dense(mat)
    _check_contour(np.linalg.eigvals(a), center, radius)
    p, res = _polish(_dense_projector(a, center, radius, nodes))
    if np.isrealobj(a) and np.isreal(center) and np.abs(p.imag).max() < 1e-10 * max(1.0, np.abs(p).max()):
        p = p.real
    return (p, res) if return_residual else p


def apply_projector(op, f: np.ndarray, center: complex = 0.0, radius: float = 0.5, nodes: int = 64,
                    resolved_only: bool = True) -> np.ndarray:
    """Π f for large sparse operators (one sparse LU per contour node)."""
    if isinstance(op, DiscreteOperator) and op.has_blocks:
        blocks = spectral_projector(op, center, radius, nodes, resolved_only=resolved_only)
        fh = op.to_fourier(f)
        return op.from_fourier(np.einsum("kij,kj->ki", blocks, fh), real=np.isrealobj(f))
    mat = sp.csc_matrix(op.matrix("L") if isinstance(op, DiscreteOperator) else op)
    zs, ws = _contour_nodes(center, radius, nodes)
    eye = sp.identity(mat.shape[0], format="csc")
    out = np.zeros(mat.shape[0], dtype=complex)
    for z, w in zip(zs, ws):
        out += w * spla.splu((mat - z * eye).astype(complex)).solve(f.astype(complex))
    return out.real if np.isrealobj(f) and np.isreal(center) else out


# factorization identities ----------------------------------------------------------

@dataclass
class FactorizationReport:
    """Operator-norm residuals of both resolvent identities per (n, z)."""

    z: list[complex]
    orders: list[int]
    enlargement: np.ndarray
    reduction: np.ndarray

    @property
    def worst(self) -> float:
        return float(max(self.enlargement.max(initial=0.0), self.reduction.max(initial=0.0)))

    def to_dict(self) -> dict:
        return {"schema_version": 1, "z": [[float(z.real), float(z.imag)] for z in self.z],
                "orders": list(self.orders), "enlargement": self.enlargement.tolist(),
                "reduction": self.reduction.tolist(), "worst": self.worst}


def _weight_vec(w, n):
    if w is None:
        return np.ones(n)
    w = np.asarray(w, dtype=float)
    if w.shape != (n,) or np.any(w <= 0):
        raise ParameterError("weights must be positive vectors matching the matrix size")
    return w


def _resolvent(a, z, cond_max):
    m = a - z * np.eye(a.shape[0])
    c = np.linalg.cond(m)
    if not np.isfinite(c) or c > cond_max:
        raise ConditioningError(f"z = {z} too close to the spectrum (condition number {c:.2e})")
    return np.linalg.solve(m, np.eye(a.shape[0]))


def verify_factorization(L, A, B, z_samples, orders=(1, 2, 3, 4), weight_small=None, weight_large=None,
                         cond_max: float = 1e10) -> FactorizationReport:
    """Residuals of the two resolvent factorization identities with R_Λ(z) = (Λ − z)^{-1}.

    enlargement: R_ℒ − Σ_{ℓ<n}(−1)^ℓ R_ℬ(𝒜R_ℬ)^ℓ − (−1)^n R_L(𝒜R_ℬ)^n
    reduction:   R_L − Σ_{ℓ<n}(−1)^ℓ (R_ℬ𝒜)^ℓ R_ℬ − (−1)^n (R_ℬ𝒜)^n R_ℒ
    R_L is formed in the small-space representation diag(m_E)·L·diag(m_E)^{-1}
    and mapped back; residual norms are measured in the large space.
    """
    l_m, a_m, b_m = (_as_dense(x) for x in (L, A, B))
    if np.abs(l_m - a_m - b_m).max() > 1e-12 * max(1.0, np.abs(l_m).max()):
        raise ParameterError("L must equal A + B")
    n = l_m.shape[0]
    ws, wl = _weight_vec(weight_small, n), _weight_vec(weight_large, n)
    small = (ws[:, None] * l_m) / ws[None, :]
    zs = [complex(z) for z in z_samples]
    orders = list(orders)
    enl = np.zeros((len(orders), len(zs)))
    red = np.zeros_like(enl)

    def big_norm(x):
        return np.linalg.norm((wl[:, None] * x) / wl[None, :], 2)

    for j, z in enumerate(zs):
        r_big = _resolvent(l_m, z, cond_max)
        r_b = _resolvent(b_m, z, cond_max)
        r_small = _resolvent(small, z, cond_max) / ws[:, None] * ws[None, :]
        ar = a_m @ r_b
        ra = r_b @ a_m
        for i, order in enumerate(orders):
            if order < 0:
                raise ParameterError("orders must be >= 0")
            s1 = np.zeros((n, n), dtype=complex)
            s2 = np.zeros((n, n), dtype=complex)
            pw1 = np.eye(n, dtype=complex)
            pw2 = np.eye(n, dtype=complex)
            for ell in range(order):
                sign = (-1) ** ell
                s1 += sign * r_b @ pw1
                s2 += sign * pw2 @ r_b
                pw1 = pw1 @ ar
                pw2 = pw2 @ ra
            sign = (-1) ** order
            enl[i, j] = big_norm(r_big - s1 - sign * r_small @ pw1) / max(big_norm(r_big), 1e-300)
            red[i, j] = big_norm(r_small - s2 - sign * pw2 @ r_big) / max(big_norm(r_big), 1e-300)
    return FactorizationReport(zs, orders, enl, red)


# eigenspace transfer -----------------------------------------------------------------

@dataclass
class TransferReport:
    """Largest principal angle between rightmost eigenspaces in two representations."""

    max_angle: float
    eigenvalues_a: np.ndarray
    eigenvalues_b: np.ndarray
    dimension: int
    degenerate: bool

    def to_dict(self) -> dict:
        return {"schema_version": 1, "max_angle": self.max_angle, "dimension": self.dimension,
                "degenerate": self.degenerate,
                "eigenvalues_a": [[float(z.real), float(z.imag)] for z in self.eigenvalues_a],
                "eigenvalues_b": [[float(z.real), float(z.imag)] for z in self.eigenvalues_b]}


def _representation(op: DiscreteOperator, w):
    if w is None:
        return op, np.ones(op.n)
    vec = weight_on_grid(w, op.grid) if isinstance(w, WeightSpec) else np.asarray(w, dtype=float)
    return conjugate_by_weight(op, vec), vec


def _eigvecs(op: DiscreteOperator, count: int):
    extra = count + 2
    if op.has_blocks:
        vals, _, vecs, _ = _block_spectrum(op, "L", extra, True)
    else:
        rep = spectrum(op, count=extra, vectors=True)
        vals, vecs = rep.eigenvalues, rep.vectors
    return vals, vecs


def eigenspace_transfer(op: DiscreteOperator, weights=(None, None), count: int = 1,
                        reference: np.ndarray | None = None, index: int = 0) -> TransferReport:
    """Compare rightmost eigenvectors computed in two weighted representations.

    Eigenvectors of diag(m)·L·diag(m)^{-1} are mapped back by diag(m)^{-1}
    before measuring principal angles.  With ``reference`` the eigenvector
    number ``index`` of the first representation is compared to that vector.
    """
    if count < 1:
        raise ParameterError("count must be >= 1")
    op_a, wa = _representation(op, weights[0])
    vals_a, vecs_a = _eigvecs(op_a, max(count, index + 1))
    # extend the subspace across near-degenerate clusters
    dim = count
    while dim < len(vals_a) and abs(vals_a[dim] - vals_a[dim - 1]) < 1e-8 * max(1.0, abs(vals_a[dim])):
        dim += 1
    degenerate = dim > count
    if degenerate:
        warnings.warn(f"eigenvalue cluster of size {dim} is degenerate; comparing subspaces",
                      MultiplicityWarning, stacklevel=2)
    if reference is not None:
        ua = vecs_a[:, [index]] / wa[:, None]
        ub = np.asarray(reference, dtype=complex).reshape(-1, 1)
        vals_b = vals_a[[index]]
        dim = 1
    else:
        op_b, wb = _representation(op, weights[1])
        vals_b, vecs_b = _eigvecs(op_b, dim)
        ua = vecs_a[:, :dim] / wa[:, None]
        ub = vecs_b[:, :dim] / wb[:, None]
    ang = sla.subspace_angles(ua, ub)
    return TransferReport(float(np.max(ang)), vals_a[:dim], vals_b[:dim], dim, degenerate)
