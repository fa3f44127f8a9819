"""Discrete kinetic Fokker-Planck operators and their A/B splitting."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import CapabilityError, ParameterError, RangeError, ResolutionError
from .grid import Grid
from .weights import WeightSpec, chi, hamiltonian, phi, psi_x, weight_on_grid

__all__ = [
    "KINDS", "ModelSpec", "DiscreteOperator", "assemble", "adjoint", "conjugate_by_weight",
    "equilibrium", "potential_energy", "cutoff_on_grid", "fv_fokker_planck",
    "spectral_derivative_matrix", "conjugate_coefficients", "adjoint_coefficients",
    "export_triplets", "read_triplets",
]

KINDS = ("HomogeneousFP", "TorusKFP", "PotentialKFP")


@dataclass(frozen=True)
class ModelSpec:
    """Model kind, exponents, grid and cutoff parameters (M, R)."""

    kind: str
    grid: Grid
    gamma: float = 2.0
    beta: float = 2.0
    M: float = 1.0
    R: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown model kind {self.kind!r}")
        if self.gamma < 1:
            raise ParameterError("gamma must be >= 1")
        if self.beta < 1:
            raise ParameterError("beta must be >= 1")
        if not self.M > 0:
            raise ParameterError(f"M must be positive, got {self.M}")
        if not self.R > 0:
            raise ParameterError(f"R must be positive, got {self.R}")
        expected = {"HomogeneousFP": None, "TorusKFP": "torus", "PotentialKFP": "line"}[self.kind]
        if self.grid.x_kind != expected:
            raise ParameterError(f"{self.kind} needs a grid with x_kind={expected!r}")

    @property
    def d(self) -> int:
        return self.grid.dv

    def with_cutoff(self, M: float, R: float) -> "ModelSpec":
        return replace(self, M=float(M), R=float(R))


def potential_energy(spec: ModelSpec) -> np.ndarray:
    """Φ(v) (homogeneous, torus) or Ψ(x) + |v|²/2 (potential) on the grid."""
    g = spec.grid
    if spec.kind == "PotentialKFP":
        return psi_x(g.X, spec.beta) + 0.5 * g.vabs2
    return phi(g.vabs2, spec.gamma)


def equilibrium(spec: ModelSpec) -> np.ndarray:
    """Grid-sampled equilibrium μ_h normalized to unit quadrature mass."""
    e = potential_energy(spec)
    mu = np.exp(-(e - e.min()))
    return mu / np.dot(spec.grid.weights, mu)


def cutoff_on_grid(spec: ModelSpec) -> np.ndarray:
    """χ_R(v) = χ(|v|/R), or χ(H/R) for the potential model."""
    g = spec.grid
    if spec.kind == "PotentialKFP":
        return chi(hamiltonian(g.X, g.V[0], spec.beta) / spec.R)
    return chi(np.sqrt(g.vabs2) / spec.R)


def fv_fokker_planck(energy: np.ndarray, shape: tuple[int, ...], h: float, axes) -> sp.csr_matrix:
    """Conservative finite volumes for ∇·(∇f + ∇E f) = ∇·(e^{-E}∇(e^{E}f)).

    The face flux is e^{-(E_p+E_q)/2}(f_q e^{E_q} - f_p e^{E_p})/h, which is
    second order, kills e^{-E} exactly, and has no-flux ends.
    """
    e = energy.reshape(shape)
    idx = np.arange(e.size).reshape(shape)
    rows, cols, vals = [], [], []
    for ax in axes:
        sl_p = [slice(None)] * len(shape)
        sl_q = [slice(None)] * len(shape)
        sl_p[ax] = slice(0, -1)
        sl_q[ax] = slice(1, None)
        p = idx[tuple(sl_p)].ravel()
        q = idx[tuple(sl_q)].ravel()
        de = (e[tuple(sl_q)] - e[tuple(sl_p)]).ravel()
        c_pq = np.exp(0.5 * de) / h ** 2   # weight of f_q in the p-row
        c_qp = np.exp(-0.5 * de) / h ** 2  # weight of f_p in the q-row
        rows += [p, p, q, q]
        cols += [q, p, p, q]
        vals += [c_pq, -c_qp, c_qp, -c_pq]
    n = e.size
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def spectral_derivative_matrix(n: int, period: float = 1.0) -> np.ndarray:
    """Fourier collocation derivative on n uniform periodic nodes (Nyquist mode dropped)."""
    j = np.arange(n)
    diff = j[:, None] - j[None, :]
    h = 2 * np.pi / n
    with np.errstate(divide="ignore", invalid="ignore"):
        if n % 2 == 0:
            d = 0.5 * (-1.0) ** diff / np.tan(diff * h / 2)
        else:
            d = 0.5 * (-1.0) ** diff / np.sin(diff * h / 2)
    d[diff == 0] = 0.0
    return d * (2 * np.pi / period)


def _centered_rowfree(n: int, h: float) -> sp.csr_matrix:
    """Centered differences with one-sided end rows, so constants are annihilated."""
    d = sp.diags([np.full(n - 1, 0.5 / h), np.full(n - 1, -0.5 / h)], [1, -1], shape=(n, n)).tolil()
    d[0, 0] = -0.5 / h
    d[n - 1, n - 1] = 0.5 / h
    return d.tocsr()


def _potential_transport(spec: ModelSpec) -> sp.csr_matrix:
    """−v∂_x + G∂_v written as μ·T_d(f/μ), made skew in L²(μ^{-1})."""
    g = spec.grid
    dx = _centered_rowfree(g.nx, g.hx)
    dv = _centered_rowfree(g.nv, g.hv)
    ex = np.exp(-(psi_x(g.x, spec.beta) - psi_x(0.0, spec.beta)))
    ev = np.exp(-0.5 * g.v ** 2)
    # discrete v and G chosen so that T_dᵀμ = 0, i.e. mass is conserved exactly
    v_t = -(dv.T @ ev) / ev
    g_t = -(dx.T @ ex) / ex
    td = -sp.kron(dx, sp.diags(v_t)) + sp.kron(sp.diags(g_t), dv)
    td = td.tocoo()
    e = potential_energy(spec)
    # (diag μ) T_d (diag μ)^{-1}, entries carry μ_i/μ_j = e^{E_j - E_i}
    t = sp.csr_matrix((td.data * np.exp(e[td.col] - e[td.row]), (td.row, td.col)), shape=td.shape)
    tc = t.tocoo()
    # adjoint in L²(μ^{-1}): diag(μ) Tᵀ diag(μ)^{-1}
    t_adj = sp.csr_matrix((tc.data * np.exp(e[tc.row] - e[tc.col]), (tc.col, tc.row)), shape=tc.shape)
    return (0.5 * (t - t_adj)).tocsr()


@dataclass
class DiscreteOperator:
    """Assembled L = A + B on a grid, possibly adjointed or weight-conjugated.

    For the torus model the operator commutes with x-translations and
    ``fourier_blocks`` returns its velocity blocks, one per wavenumber.
    """

    spec: ModelSpec
    L: sp.csr_matrix
    A: sp.csr_matrix
    B: sp.csr_matrix
    is_adjoint: bool = False
    weight: np.ndarray | None = None
    transport_scheme: str = "none"
    _cv: np.ndarray | None = field(default=None, repr=False)
    _chi_v: np.ndarray | None = field(default=None, repr=False)
    _weight_v: np.ndarray | None = field(default=None, repr=False)

    @property
    def grid(self) -> Grid:
        return self.spec.grid

    @property
    def n(self) -> int:
        return self.L.shape[0]

    def matrix(self, part: str = "L") -> sp.csr_matrix:
        if part not in ("L", "A", "B"):
            raise ParameterError(f"unknown operator part {part!r}")
        return getattr(self, part)

    @property
    def has_blocks(self) -> bool:
        return self._cv is not None

    def wavenumbers(self) -> np.ndarray:
        nx = self.grid.nx
        k = np.fft.fftfreq(nx, d=1.0 / nx)
        if nx % 2 == 0:
            k[nx // 2] = 0.0
        return k

    def resolved_modes(self) -> np.ndarray:
        """Mask of x-wavenumbers carried by the transport term.

        For even nx the two-grid (Nyquist) mode is annihilated by the
        spectral derivative, so it only feels the velocity operator and
        carries a spurious conserved quantity.
        """
        nx = self.grid.nx
        mask = np.ones(nx, dtype=bool)
        if nx % 2 == 0:
            mask[nx // 2] = False
        return mask

    def nyquist_filter(self, f: np.ndarray) -> np.ndarray:
        """Remove the unresolved two-grid x-mode from a state."""
        if not self.has_blocks:
            return np.asarray(f)
        fh = self.to_fourier(f)
        fh[~self.resolved_modes()] = 0.0
        return self.from_fourier(fh, real=np.isrealobj(f))

    def fourier_blocks(self, part: str = "L") -> np.ndarray:
        """Array (nx, nv, nv) of velocity blocks, ordered like ``np.fft.fft`` output."""
        if not self.has_blocks:
            raise CapabilityError("Fourier blocks exist only for torus operators")
        nv = self.grid.nv
        k = self.wavenumbers()
        a = self.spec.M * np.diag(self._chi_v).astype(complex)
        if part == "A":
            blocks = np.broadcast_to(a, (len(k), nv, nv)).copy()
        else:
            blocks = self._cv[None, :, :] - 2j * np.pi * k[:, None, None] * np.diag(self.grid.v)[None, :, :]
            blocks = blocks.astype(complex)
            if part == "B":
                blocks = blocks - a[None]
            elif part != "L":
                raise ParameterError(f"unknown operator part {part!r}")
        if self.is_adjoint:
            blocks = np.conj(np.transpose(blocks, (0, 2, 1)))
        if self._weight_v is not None:
            mv = self._weight_v
            blocks = blocks * mv[None, :, None] / mv[None, None, :]
        return blocks

    def to_fourier(self, f: np.ndarray) -> np.ndarray:
        g = self.grid
        return np.fft.fft(np.asarray(f).reshape(g.nx, g.nv), axis=0)

    def from_fourier(self, fh: np.ndarray, real: bool = True) -> np.ndarray:
        out = np.fft.ifft(fh, axis=0).reshape(-1)
        return out.real if real else out

    def metadata(self) -> dict:
        s = self.spec
        g = s.grid
        return {
            "kind": s.kind, "gamma": s.gamma, "beta": s.beta, "M": s.M, "R": s.R,
            "grid_shape": list(g.shape), "vmax": g.vmax, "xmax": g.xmax, "x_kind": g.x_kind,
            "dv": g.dv, "transport": self.transport_scheme, "adjoint": self.is_adjoint,
            "conjugated": self.weight is not None,
        }


def assemble(spec: ModelSpec) -> DiscreteOperator:
    """Assemble L, A = Mχ_R and B = L − A for the model."""
    g = spec.grid
    chi_r = cutoff_on_grid(spec)
    a = sp.diags(spec.M * chi_r, format="csr")
    extra: dict = {}
    if spec.kind == "HomogeneousFP":
        lop = fv_fokker_planck(potential_energy(spec), g.shape, g.hv, range(g.dv))
        scheme = "none"
    elif spec.kind == "TorusKFP":
        cv = fv_fokker_planck(phi(g.v ** 2, spec.gamma), (g.nv,), g.hv, [0]).toarray()
        dx = spectral_derivative_matrix(g.nx)
        lop = sp.kron(sp.identity(g.nx), sp.csr_matrix(cv)) - sp.kron(sp.csr_matrix(dx), sp.diags(g.v))
        scheme = "spectral"
        extra = {"_cv": cv, "_chi_v": chi(np.abs(g.v) / spec.R)}
    else:
        if g.nv < 8 or g.nx < 8:
            raise ResolutionError("need at least 8 points per variable")
        cv = fv_fokker_planck(0.5 * g.v ** 2, (g.nv,), g.hv, [0])
        lop = sp.kron(sp.identity(g.nx), cv) + _potential_transport(spec)
        scheme = "centered"
    lop = sp.csr_matrix(lop)
    lop.eliminate_zeros()
    b = (lop - a).tocsr()
    return DiscreteOperator(spec, lop, a, b, transport_scheme=scheme, **extra)


def _weighted_transpose(m: sp.csr_matrix, w: np.ndarray) -> sp.csr_matrix:
    return (sp.diags(1.0 / w) @ m.T @ sp.diags(w)).tocsr()


def adjoint(op: DiscreteOperator) -> DiscreteOperator:
    """Adjoint with respect to the quadrature inner product Σ w f g."""
    w = op.grid.weights
    if op.weight is not None:
        # adjoint of the conjugated operator m C m^{-1} is m^{-1} C* m
        new_weight = 1.0 / op.weight
        new_wv = None if op._weight_v is None else 1.0 / op._weight_v
    else:
        new_weight, new_wv = None, None
    return DiscreteOperator(
        op.spec, _weighted_transpose(op.L, w), _weighted_transpose(op.A, w), _weighted_transpose(op.B, w),
        is_adjoint=not op.is_adjoint, weight=new_weight, transport_scheme=op.transport_scheme,
        _cv=op._cv, _chi_v=op._chi_v, _weight_v=new_wv,
    )


def conjugate_by_weight(op: DiscreteOperator, m: WeightSpec | np.ndarray) -> DiscreteOperator:
    """Similarity diag(m)·op·diag(m)^{-1}."""
    g = op.grid
    mv = weight_on_grid(m, g) if isinstance(m, WeightSpec) else np.asarray(m, dtype=float)
    if mv.shape != (g.size,):
        raise ParameterError("weight vector does not match the grid")
    if not np.all(np.isfinite(mv)) or np.any(mv <= 0) or mv.max() / mv.min() > 1e300:
        raise RangeError("weight overflows on the grid; reduce vmax or the weight strength")
    dm, dmi = sp.diags(mv), sp.diags(1.0 / mv)
    total = mv if op.weight is None else op.weight * mv
    weight_v = None
    if op.has_blocks:
        m2 = mv.reshape(g.nx, g.nv)
        if not np.allclose(m2, m2[:1], rtol=1e-14, atol=0):
            raise CapabilityError("torus conjugation needs an x-independent weight")
        weight_v = m2[0] if op._weight_v is None else op._weight_v * m2[0]
    return DiscreteOperator(
        op.spec, (dm @ op.L @ dmi).tocsr(), (dm @ op.A @ dmi).tocsr(), (dm @ op.B @ dmi).tocsr(),
        is_adjoint=op.is_adjoint, weight=total, transport_scheme=op.transport_scheme,
        _cv=op._cv, _chi_v=op._chi_v, _weight_v=weight_v,
    )


def adjoint_coefficients(reaction, drift, div_drift):
    """Coefficients of C* for C = Δ + drift·∇ + reaction: (reaction − div drift, −drift)."""
    return reaction - div_drift, -drift


def conjugate_coefficients(reaction, drift, grad_log_m, lap_m_over_m):
    """Coefficients of m C(m^{-1}·) for C = Δ + drift·∇ + reaction (pointwise arrays)."""
    g2 = np.sum(grad_log_m ** 2, axis=-1)
    new_reaction = -lap_m_over_m + 2.0 * g2 + reaction - np.sum(drift * grad_log_m, axis=-1)
    return new_reaction, drift - 2.0 * grad_log_m


def export_triplets(op: DiscreteOperator, path: str | Path, part: str = "L") -> tuple[Path, Path]:
    """Write ``row col value`` lines plus a JSON metadata sidecar."""
    path = Path(path)
    coo = op.matrix(part).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{int(r)} {int(c)} {float(v)!r}\n")
    meta = dict(op.metadata(), part=part, shape=list(coo.shape), nnz=int(coo.nnz), schema_version=1)
    side = path.with_suffix(path.suffix + ".json")
    side.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path, side


def read_triplets(path: str | Path) -> sp.csr_matrix:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.loadtxt(path, ndmin=2)
    if data.size == 0:
        return sp.csr_matrix(tuple(meta["shape"]))
    return sp.csr_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=tuple(meta["shape"]))
