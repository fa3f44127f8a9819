"""Weight families, weighted norms, abscissae and the mass functional."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog

from .errors import AdmissibilityError, CapabilityError, ParameterError, RangeError, SolverError
from .grid import Grid

__all__ = [
    "WeightSpec", "NormSpec", "FAMILIES", "SPACES",
    "bracket", "phi", "psi_x", "hamiltonian", "chi", "chi_prime",
    "eval_weight", "weight_on_grid", "friction_field", "velocity_log_derivatives", "abscissa", "norm", "mass", "norm_column",
]

FAMILIES = ("PolyV", "StretchedExpV", "GaussianInv", "PolyH", "StretchedExpH")
SPACES = ("Lp", "W1p", "Wm1p", "Finf", "FinfDual")
_LP_MAX_POINTS = 64 * 64


def bracket(z):
    """Japanese bracket ⟨z⟩ = sqrt(1 + |z|²) of a scalar or squared-norm-free array."""
    return np.sqrt(1.0 + np.asarray(z, dtype=float) ** 2)


def phi(vabs2, gamma: float):
    """Friction potential Φ(v) = ⟨v⟩^γ/γ, given |v|²."""
    return (1.0 + np.asarray(vabs2, dtype=float)) ** (gamma / 2.0) / gamma


def psi_x(x, beta: float):
    """Confinement potential Ψ(x) = ⟨x⟩^β/β."""
    return bracket(x) ** beta / beta


def hamiltonian(x, v, beta: float):
    """H(x, v) = 1 + Ψ(x) + |v|²/2 (d = 1 arrays or scalars)."""
    return 1.0 + psi_x(x, beta) + 0.5 * np.asarray(v, dtype=float) ** 2


def chi(r):
    """C² cutoff: 1 on [0, 1], 0 on [2, ∞), quintic smoothstep between."""
    r = np.asarray(r, dtype=float)
    s = np.clip(r - 1.0, 0.0, 1.0)
    return 1.0 - s ** 3 * (10.0 - 15.0 * s + 6.0 * s ** 2)


def chi_prime(r):
    r = np.asarray(r, dtype=float)
    s = np.clip(r - 1.0, 0.0, 1.0)
    return -30.0 * s ** 2 * (1.0 - s) ** 2


@dataclass(frozen=True)
class WeightSpec:
    """A weight function m paired with a friction (γ) or confinement (β) exponent.

    ``PolyV`` is ⟨v⟩^k, ``StretchedExpV`` is e^{κ⟨v⟩^s}, ``GaussianInv`` is
    μ^{-θ/2} up to a constant, ``PolyH`` is H^k and ``StretchedExpH`` is
    e^{κH^s}.  ``beta`` set means the weight lives on the potential model.
    """

    family: str
    k: float = 0.0
    kappa: float = 0.0
    s: float = 0.0
    theta: float = 1.0
    d: int = 1
    gamma: float = 2.0
    beta: float | None = None

    def __post_init__(self):
        f = self.family
        if f not in FAMILIES:
            raise ParameterError(f"unknown weight family {f!r}")
        if self.d < 1:
            raise ParameterError("d must be a positive integer")
        if self.gamma < 1:
            raise ParameterError("gamma must be >= 1")
        if self.beta is not None and self.beta < 1:
            raise ParameterError("beta must be >= 1")
        if f in ("PolyV", "PolyH") and not self.k > 0:
            raise ParameterError(f"{f} requires k > 0")
        if f == "StretchedExpV":
            if not self.kappa > 0:
                raise ParameterError("StretchedExpV requires kappa > 0")
            g, s = self.gamma, self.s
            ok = (s > 0 and s >= 2 - g and s < g) or (s == g and self.kappa < 1.0 / g)
            if not ok:
                raise ParameterError(
                    f"StretchedExpV requires s in [max(0,2-gamma), gamma) or s = gamma with kappa < 1/gamma; got s={s}, gamma={g}")
        if f == "StretchedExpH":
            if not self.kappa > 0:
                raise ParameterError("StretchedExpH requires kappa > 0")
            if not 0 < self.s <= 1:
                raise ParameterError("StretchedExpH requires s in (0, 1]")
            if self.s == 1 and not self.kappa < 1:
                raise ParameterError("StretchedExpH with s = 1 requires kappa < 1")
        if f == "GaussianInv" and not self.theta > 0:
            raise ParameterError("GaussianInv requires theta > 0")
        if f in ("PolyH", "StretchedExpH") and self.beta is None:
            raise ParameterError(f"{f} requires beta")

    @property
    def is_polynomial(self) -> bool:
        return self.family in ("PolyV", "PolyH")

    def exponent_convention(self) -> tuple[float, float, float]:
        """(k, κ, s) with (s, κ) = (0, 1) for polynomial and k = s for exponential weights."""
        if self.family == "PolyV":
            return self.k, 1.0, 0.0
        if self.family == "StretchedExpV":
            return self.s, self.kappa, self.s
        raise CapabilityError(f"no velocity-symbol convention for {self.family}")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, data: dict) -> "WeightSpec":
        kw = dict(data)
        for key in ("k", "kappa", "s", "theta", "gamma", "beta"):
            if key in kw and kw[key] is not None:
                kw[key] = float(kw[key])
        if "d" in kw:
            kw["d"] = int(kw["d"])
        return cls(**kw)


def eval_weight(w: WeightSpec, v, x=None) -> np.ndarray:
    """Evaluate m at velocity v (shape (..., d) or scalar for d = 1) and position x."""
    v = np.asarray(v, dtype=float)
    vabs2 = v ** 2 if w.d == 1 else np.sum(v ** 2, axis=-1)
    return _weight_from_parts(w, vabs2, x)


def friction_field(v: np.ndarray, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """F = ∇Φ and div F for velocities v of shape (n, d)."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    d = v.shape[1]
    r2 = np.sum(v ** 2, axis=1)
    b = 1.0 + r2
    f = v * b[:, None] ** ((gamma - 2) / 2)
    div = d * b ** ((gamma - 2) / 2) + (gamma - 2) * r2 * b ** ((gamma - 4) / 2)
    return f, div


def velocity_log_derivatives(w: WeightSpec, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """∇m/m (shape (n, d)) and Δm/m for a velocity weight at points v of shape (n, d)."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    d = v.shape[1]
    r2 = np.sum(v ** 2, axis=1)
    b = 1.0 + r2
    if w.family == "GaussianInv" and w.beta is None:
        f, div = friction_field(v, w.gamma)
        half = 0.5 * w.theta
        return half * f, half * div + half ** 2 * np.sum(f ** 2, axis=1)
    k, kappa, s = w.exponent_convention()
    grad = kappa * k * v * b[:, None] ** ((s - 2) / 2)
    lap = (kappa * k * (d * b ** ((s - 2) / 2) + (s - 2) * r2 * b ** ((s - 4) / 2))
           + (kappa * k) ** 2 * r2 * b ** (s - 2))
    return grad, lap


def _weight_from_parts(w: WeightSpec, vabs2, x) -> np.ndarray:
    vabs2 = np.asarray(vabs2, dtype=float)
    if w.family in ("PolyH", "StretchedExpH") or (w.family == "GaussianInv" and w.beta is not None):
        if x is None:
            raise ParameterError(f"{w.family} needs a position")
        h = 1.0 + psi_x(x, w.beta) + 0.5 * vabs2
    with np.errstate(over="ignore"):
        if w.family == "PolyV":
            out = (1.0 + vabs2) ** (w.k / 2.0)
        elif w.family == "StretchedExpV":
            out = np.exp(w.kappa * (1.0 + vabs2) ** (w.s / 2.0))
        elif w.family == "GaussianInv":
            if w.beta is None:
                out = np.exp(0.5 * w.theta * phi(vabs2, w.gamma))
            else:
                out = np.exp(0.5 * w.theta * (h - 1.0))
        elif w.family == "PolyH":
            out = h ** w.k
        else:
            out = np.exp(w.kappa * h ** w.s)
    return out


def weight_on_grid(w: WeightSpec, grid: Grid) -> np.ndarray:
    """Weight sampled on every cell; raises RangeError on overflow."""
    if w.family in ("PolyH", "StretchedExpH") and not grid.has_x:
        raise CapabilityError(f"{w.family} needs a phase-space grid")
    x = grid.X if grid.has_x else None
    if w.beta is None and w.family == "GaussianInv" and grid.x_kind == "line":
        raise CapabilityError("GaussianInv on the potential model needs beta")
    m = _weight_from_parts(w, grid.vabs2, x)
    if not np.all(np.isfinite(m)) or m.max() > 1e300:
        raise RangeError(f"weight {w.family} overflows on the grid; reduce vmax/xmax or the weight strength")
    return m


def abscissa(sigma: int, p: float, w: WeightSpec, gamma: float | None = None, d: int | None = None) -> float:
    """Threshold a_σ(p, m) for velocity weights; raises AdmissibilityError if inadmissible."""
    if sigma not in (-1, 0, 1):
        raise ParameterError("sigma must be -1, 0 or 1")
    if not 1 <= p <= math.inf:
        raise ParameterError("p must lie in [1, inf]")
    gamma = w.gamma if gamma is None else gamma
    d = w.d if d is None else d
    q = 0.0 if p == math.inf else 1.0 / p
    if w.family == "PolyV":
        if gamma < 2:
            raise AdmissibilityError(f"polynomial weights need gamma >= 2, got {gamma}")
        kmin = abs(sigma) + abs(sigma) * math.sqrt(d) * (gamma - 2) + (1 - q) * (d + gamma - 2)
        if not w.k > kmin:
            raise AdmissibilityError(f"polynomial weight needs k > {kmin:.6g}, got k = {w.k}")
        return abs(sigma) + (1 - q) * d - w.k if gamma == 2 else -math.inf
    if w.family == "StretchedExpV":
        s, kappa = w.s, w.kappa
        in_range = (s > 0 and s >= 2 - gamma and s < gamma) or (s == gamma and 0 < kappa < 1.0 / gamma)
        if not (kappa > 0 and in_range):
            raise AdmissibilityError(
                f"exponential weight needs s in [2-gamma, gamma), s > 0, or s = gamma with kappa < 1/gamma; got s={s}, kappa={kappa}, gamma={gamma}")
        if gamma == 1 and s == 1:
            return kappa ** 2 - kappa
        if gamma + s == 2 and s < gamma:
            return -kappa * s
        return -math.inf
    raise CapabilityError(f"abscissa is defined for velocity weights, not {w.family}")


@dataclass(frozen=True)
class NormSpec:
    """Norm selector: space, exponent p, weight and tilt ζ."""

    space: str
    p: float
    weight: WeightSpec
    zeta: float = 1.0

    def __post_init__(self):
        if self.space not in SPACES:
            raise ParameterError(f"unknown space {self.space!r}")
        if not 1 <= self.p <= math.inf:
            raise ParameterError("p must lie in [1, inf]")
        if not self.zeta > 0:
            raise ParameterError("zeta must be positive")

    @property
    def column(self) -> str:
        return norm_column(self)

    def to_dict(self) -> dict:
        out = {"space": self.space, "p": _fmt_p(self.p), "zeta": self.zeta}
        out.update(self.weight.to_dict())
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "NormSpec":
        data = dict(data)
        space = data.pop("space")
        p = float(data.pop("p"))
        zeta = float(data.pop("zeta", 1.0))
        return cls(space, p, WeightSpec.from_dict(data), zeta)


def _fmt_p(p: float) -> str:
    if p == math.inf:
        return "inf"
    return str(int(p)) if float(p).is_integer() else repr(float(p))


def norm_column(n: NormSpec) -> str:
    return f"norm_{n.space}_{_fmt_p(n.p)}_{n.weight.family}"


def mass(f: np.ndarray, grid: Grid) -> float:
    """Quadrature of the total mass."""
    return float(np.dot(grid.weights, np.real(f)))


def _lp(values: np.ndarray, w: np.ndarray, p: float) -> float:
    a = np.abs(values)
    if p == math.inf:
        return float(a.max()) if a.size else 0.0
    return float(np.dot(w, a ** p) ** (1.0 / p))


def norm(f: np.ndarray, n: NormSpec, grid: Grid) -> float:
    """Weighted norm of a grid function."""
    f = np.asarray(f)
    if f.shape != (grid.size,):
        f = f.reshape(grid.size)
    wq = grid.weights
    if n.space == "Finf":
        return _finf(f, n, grid)
    if n.space == "FinfDual":
        return _finf_dual(f, n, grid)
    m = weight_on_grid(n.weight, grid)
    if n.space == "Lp":
        return _lp(f * m, wq, n.p)
    if n.space == "W1p":
        grads = grid.gradient(f)
        zetas = _axis_tilts(grid, n.zeta)
        parts = [_lp(m * f, wq, n.p)] + [z * _lp(m * g, wq, n.p) for z, g in zip(zetas, grads)]
        if n.p == math.inf:
            return max(parts)
        return float(sum(q ** n.p for q in parts) ** (1.0 / n.p))
    if n.space == "Wm1p":
        if n.p == 2:
            return _wm12(f * m, grid)
        if n.p in (1, math.inf):
            return _wm1_lp(f * m, grid, n.p)
        raise CapabilityError("W^{-1,p} is available for p in {1, 2, inf} only")
    raise CapabilityError(f"unsupported space {n.space}")


def _axis_tilts(grid: Grid, zeta: float) -> list[float]:
    # ζ multiplies the velocity derivatives only
    if grid.has_x:
        return [1.0, zeta]
    return [zeta] * grid.dv


def h1_operator(grid: Grid) -> sp.csc_matrix:
    """Matrix S with φᵀSφ = ‖φ‖²_{W^{1,2}} on the grid."""
    wq = sp.diags(grid.weights)
    s = wq.copy()
    for g in grid.gradient_matrices:
        s = s + g.T @ wq @ g
    return sp.csc_matrix(s)


_H1_CACHE: dict = {}


def _h1_factor(grid: Grid):
    key = grid
    if key not in _H1_CACHE:
        if len(_H1_CACHE) > 8:
            _H1_CACHE.clear()
        _H1_CACHE[key] = spla.splu(h1_operator(grid))
    return _H1_CACHE[key]


def wm12_optimizer(g: np.ndarray, grid: Grid) -> np.ndarray:
    """Unnormalized maximizer φ = S⁻¹(w g) of the W^{-1,2} pairing."""
    b = grid.weights * g
    lu = _h1_factor(grid)
    if np.iscomplexobj(b):
        return lu.solve(b.real) + 1j * lu.solve(b.imag)
    return lu.solve(b)


def _wm12(g: np.ndarray, grid: Grid) -> float:
    phi_opt = wm12_optimizer(g, grid)
    val = np.real(np.vdot(grid.weights * g, phi_opt))
    return float(np.sqrt(max(val, 0.0)))


def _check_lp_size(grid: Grid):
    if grid.size > _LP_MAX_POINTS:
        raise CapabilityError(f"LP-based norms need grids with at most {_LP_MAX_POINTS} points, got {grid.size}")


def _solve_lp(c, a_ub, b_ub, bounds):
    res = linprog(-c, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise SolverError(f"linear program failed: {res.message}")
    return -res.fun


def _wm1_lp(g: np.ndarray, grid: Grid, p: float) -> float:
    _check_lp_size(grid)
    c = grid.weights * np.real(g)
    if not np.any(c):
        return 0.0
    fwd = sp.vstack(grid.forward_matrices).tocsr()
    n = grid.size
    if p == 1:
        # dual ball: ‖φ‖_∞ ≤ 1 and ‖∇φ‖_∞ ≤ 1
        a = sp.vstack([fwd, -fwd]).tocsr()
        b = np.ones(a.shape[0])
        return float(_solve_lp(c, a, b, [(-1.0, 1.0)] * n))
    # p = inf, dual ball ‖φ‖_1 + ‖∇φ‖_1 ≤ 1 with slack variables
    ne = fwd.shape[0]
    edge_w = np.concatenate([np.full(mat.shape[0], grid.cell_volume) for mat in grid.forward_matrices])
    i_n = sp.identity(n, format="csr")
    i_e = sp.identity(ne, format="csr")
    z_ne = sp.csr_matrix((n, ne))
    z_en = sp.csr_matrix((ne, n))
    rows = [
        sp.hstack([i_n, -i_n, z_ne]),
        sp.hstack([-i_n, -i_n, z_ne]),
        sp.hstack([fwd, z_en, -i_e]),
        sp.hstack([-fwd, z_en, -i_e]),
        sp.hstack([sp.csr_matrix((1, n)), sp.csr_matrix(grid.weights[None, :]), sp.csr_matrix(edge_w[None, :])]),
    ]
    a = sp.vstack(rows).tocsr()
    b = np.concatenate([np.zeros(2 * n + 2 * ne), [1.0]])
    cc = np.concatenate([c, np.zeros(n + ne)])
    bounds = [(None, None)] * n + [(0, None)] * (n + ne)
    return float(_solve_lp(cc, a, b, bounds))


def _finf(psi: np.ndarray, n: NormSpec, grid: Grid) -> float:
    psi = np.real(psi)
    base = np.max(np.abs(psi) / np.sqrt(1.0 + grid.vabs2))
    grads = grid.gradient(psi)
    tilts = _axis_tilts(grid, n.zeta)
    return float(max([base] + [z * np.max(np.abs(g)) for z, g in zip(tilts, grads)]))


def _finf_dual(f: np.ndarray, n: NormSpec, grid: Grid) -> float:
    """sup ⟨f, ψ⟩ over max(‖ψ/⟨v⟩‖_∞, ‖∂_xψ‖_∞, ζ‖∂_vψ‖_∞) ≤ 1 (edge differences)."""
    _check_lp_size(grid)
    c = grid.weights * np.real(f)
    if not np.any(c):
        return 0.0
    tilts = _axis_tilts(grid, n.zeta)
    mats, rhs = [], []
    for z, d in zip(tilts, grid.forward_matrices):
        mats.extend([d, -d])
        rhs.extend([np.full(d.shape[0], 1.0 / z)] * 2)
    a = sp.vstack(mats).tocsr()
    cap = np.sqrt(1.0 + grid.vabs2)
    return float(_solve_lp(c, a, np.concatenate(rhs), list(zip(-cap, cap))))
