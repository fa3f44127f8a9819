"""Semigroup propagation, convolutions, Duhamel series and decay fits."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DataError, ParameterError, ResolutionError, SolverError, UsageError
from .grid import Grid
from .operators import DiscreteOperator
from .weights import NormSpec, mass, norm

__all__ = [
    "SCHEMES", "Trajectory", "DecayFit", "OperatorFamily", "propagate", "time_ladder",
    "simpson_weights", "convolve", "convolve_family", "sample_semigroup", "iterated_AS_B",
    "duhamel_reconstruct", "fit_decay", "fit_power",
]

SCHEMES = ("cn", "implicit-euler", "expm")
_DENSE_EXPM_MAX = 2500


@dataclass
class Trajectory:
    """Snapshots of a propagated state with per-snapshot norms and mass."""

    times: np.ndarray
    states: np.ndarray | None
    masses: np.ndarray
    norms: dict[str, np.ndarray] = field(default_factory=dict)
    scheme: str = "cn"

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        cols = list(self.norms)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "mass"] + cols)
            for i, t in enumerate(self.times):
                wr.writerow([repr(float(t)), repr(float(self.masses[i]))] + [repr(float(self.norms[c][i])) for c in cols])
        return path


@dataclass
class DecayFit:
    """Least-squares fit of log q = log C + a t (or log q = log C − Θ log t)."""

    kind: str
    rate: float
    prefactor: float
    window: tuple[float, float]
    residual: float
    samples: int

    @property
    def power(self) -> float:
        """Θ for power fits (q ~ t^{-Θ})."""
        return -self.rate

    def to_dict(self) -> dict:
        return {"schema_version": 1, "kind": self.kind, "rate": self.rate, "prefactor": self.prefactor,
                "window": list(self.window), "residual": self.residual, "samples": self.samples}

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def time_ladder(t_end: float, n_linear: int = 50, n_geometric: int = 20, t_min: float = 1e-3) -> np.ndarray:
    """Geometric ladder on [t_min, 1] merged with a linear ladder on [0, t_end]."""
    geo = np.geomspace(t_min, min(1.0, t_end), n_geometric) if t_end > t_min else np.array([])
    lin = np.linspace(0.0, t_end, n_linear + 1)
    return np.unique(np.concatenate([[0.0], geo, lin]))


class _Stepper:
    """Advances a state over an interval with a fixed scheme, caching factorizations."""

    def __init__(self, op, part: str, scheme: str, dt_max: float):
        if scheme not in SCHEMES:
            raise ParameterError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
        self.scheme = scheme
        self.dt_max = dt_max
        self.cache: dict = {}
        self.blocks = None
        if isinstance(op, DiscreteOperator):
            if op.has_blocks:
                self.blocks = op.fourier_blocks(part)
                self.op = op
            self.matrix = op.matrix(part)
        elif sp.issparse(op):
            self.matrix = sp.csc_matrix(op)
        else:
            self.matrix = np.asarray(op)
        self.n = self.matrix.shape[0]

    # block (torus) path works on Fourier coefficients
    def _block_step(self, delta: float):
        key = ("blk", round(delta, 14))
        if key not in self.cache:
            b = self.blocks
            nv = b.shape[1]
            eye = np.eye(nv)[None]
            if self.scheme == "expm":
                self.cache[key] = (sla.expm(delta * b), 1)
            else:
                steps = max(1, math.ceil(delta / self.dt_max - 1e-12))
                h = delta / steps
                if self.scheme == "cn":
                    m = np.linalg.solve(eye - 0.5 * h * b, eye + 0.5 * h * b)
                else:
                    m = np.linalg.solve(eye - h * b, np.broadcast_to(eye, b.shape))
                self.cache[key] = (m, steps)
        return self.cache[key]

    def _sparse_solver(self, mat):
        try:
            return spla.splu(sp.csc_matrix(mat))
        except RuntimeError as exc:  # singular factor
            raise SolverError(f"sparse LU failed: {exc}") from exc

    def _matrix_step(self, delta: float):
        key = ("mat", round(delta, 14))
        if key in self.cache:
            return self.cache[key]
        a = self.matrix
        if self.scheme == "expm":
            if self.n <= _DENSE_EXPM_MAX:
                dense = a.toarray() if sp.issparse(a) else a
                entry = ("dense", sla.expm(delta * dense), 1)
            else:
                entry = ("krylov", delta, 1)
        else:
            steps = max(1, math.ceil(delta / self.dt_max - 1e-12))
            h = delta / steps
            eye = sp.identity(self.n, format="csc") if sp.issparse(a) else np.eye(self.n)
            if self.scheme == "cn":
                lhs, rhs = eye - 0.5 * h * a, eye + 0.5 * h * a
            else:
                lhs, rhs = eye - h * a, None
            if sp.issparse(a):
                entry = ("lu", (self._sparse_solver(lhs), rhs), steps)
            else:
                entry = ("dlu", (sla.lu_factor(lhs), rhs), steps)
        self.cache[key] = entry
        return entry

    def advance(self, state: np.ndarray, delta: float) -> np.ndarray:
        if delta <= 0:
            return state
        if self.blocks is not None:
            m, steps = self._block_step(delta)
            for _ in range(steps):
                state = np.einsum("kij,kj->ki", m, state)
            return state
        kind, data, steps = self._matrix_step(delta)
        if kind == "dense":
            return data @ state
        if kind == "krylov":
            return spla.expm_multiply(data * self.matrix, state)
        solver, rhs = data
        for _ in range(steps):
            b = state if rhs is None else rhs @ state
            if kind == "lu":
                state = _lu_solve_any(solver, b)
            else:
                state = sla.lu_solve(solver, b)
            if not np.all(np.isfinite(state)):
                raise SolverError("time stepping produced non-finite values")
        return state


def _lu_solve_any(lu, b):
    if np.iscomplexobj(b):
        return lu.solve(np.ascontiguousarray(b.real)) + 1j * lu.solve(np.ascontiguousarray(b.imag))
    return lu.solve(b)


def propagate(op, f0: np.ndarray, times, scheme: str = "cn", part: str = "L",
              norms: list[NormSpec] | None = None, grid: Grid | None = None,
              dt_max: float = 0.01, store: bool = True, extra=None) -> Trajectory:
    """Snapshots of e^{tM} f0 at the requested times.

    ``op`` is a DiscreteOperator (``part`` selects L, A or B) or a matrix.
    Crank-Nicolson and implicit Euler are unconditionally stable and use
    substeps of at most ``dt_max``; ``expm`` is exact up to round-off.
    ``extra`` maps column names to callables of the state for extra curves.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0 or np.any(np.diff(times) < 0) or times[0] < 0:
        raise ParameterError("times must be a nondecreasing ladder starting at t >= 0")
    if grid is None and isinstance(op, DiscreteOperator):
        grid = op.grid
    stepper = _Stepper(op, part, scheme, dt_max)
    f0 = np.asarray(f0)
    blocks = stepper.blocks is not None
    state = stepper.op.to_fourier(f0) if blocks else f0.astype(np.result_type(f0, float))
    norms = norms or []
    extra = extra or {}
    cols = {n.column: [] for n in norms}
    cols.update({k: [] for k in extra})
    snaps, masses = [], []
    t_prev = 0.0
    for t in times:
        state = stepper.advance(state, t - t_prev)
        t_prev = t
        phys = stepper.op.from_fourier(state, real=not np.iscomplexobj(f0)) if blocks else state
        if not np.all(np.isfinite(phys)):
            raise SolverError(f"non-finite state at t = {t}")
        if store:
            snaps.append(np.array(phys))
        masses.append(mass(phys, grid) if grid is not None else float(np.sum(np.real(phys))))
        for n in norms:
            cols[n.column].append(norm(phys, n, grid))
        for k, fn in extra.items():
            cols[k].append(float(fn(phys)))
    return Trajectory(times, np.array(snaps) if store else None, np.array(masses),
                      {k: np.array(v) for k, v in cols.items()}, scheme)


# convolutions -----------------------------------------------------------------

@dataclass
class OperatorFamily:
    """Operator family sampled at t_i = i·dt, i = 0..N (values has shape (N+1, ...))."""

    dt: float
    values: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1

    def at(self, t: float) -> np.ndarray:
        return self.values[self.index(t)]

    def index(self, t: float) -> int:
        j = t / self.dt
        ji = int(round(j))
        if abs(j - ji) > 1e-8 * max(1.0, j) or ji > self.n_steps or ji < 0:
            raise UsageError(f"t = {t} is not on the sampled ladder")
        return ji


def simpson_weights(j: int, dt: float) -> np.ndarray:
    """Composite Simpson weights for j intervals (3/8 rule on the last three if j is odd)."""
    w = np.zeros(j + 1)
    if j == 0:
        return w
    if j == 1:
        w[:] = 0.5 * dt
        return w
    if j % 2 == 0:
        w[0] = w[-1] = 1.0
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        return w * dt / 3.0
    # Simpson on [0, j-3], 3/8 rule on the last three intervals
    m = j - 3
    if m > 0:
        w[:m + 1] = simpson_weights(m, dt)
    w[m:] += np.array([1.0, 3.0, 3.0, 1.0]) * 3.0 * dt / 8.0
    return w


def _matmul(a, b):
    return a * b if np.ndim(a) == 0 or a.ndim <= 1 and np.ndim(b) <= 1 else a @ b


def convolve(s1: OperatorFamily, s2: OperatorFamily, t: float) -> np.ndarray:
    """(S2 ∗ S1)(t) = ∫₀ᵗ S2(s) S1(t−s) ds by composite Simpson."""
    if abs(s1.dt - s2.dt) > 1e-15 * max(s1.dt, s2.dt) or s1.n_steps != s2.n_steps:
        raise UsageError("convolution needs both families on a common ladder")
    j = s1.index(t)
    w = simpson_weights(j, s1.dt)
    a = s2.values[: j + 1]
    b = s1.values[j::-1]
    if a.ndim == 1:
        return np.asarray(np.dot(w, a * b))
    # batched matmul in chunks keeps memory bounded for torus block stacks
    per = max(1, int(a[0].size))
    chunk = max(1, 2 ** 22 // per)
    out = np.zeros(np.broadcast_shapes(a.shape[1:], b.shape[1:]), dtype=np.result_type(a, b))
    for i in range(0, j + 1, chunk):
        out += np.tensordot(w[i:i + chunk], np.matmul(a[i:i + chunk], b[i:i + chunk]), axes=(0, 0))
    return out


def convolve_family(s1: OperatorFamily, s2: OperatorFamily) -> OperatorFamily:
    """(S2 ∗ S1)(t_j) for every ladder point."""
    if abs(s1.dt - s2.dt) > 1e-15 * max(s1.dt, s2.dt) or s1.n_steps != s2.n_steps:
        raise UsageError("convolution needs both families on a common ladder")
    out = np.zeros_like(s1.values, dtype=np.result_type(s1.values, s2.values))
    for j in range(1, s1.n_steps + 1):
        out[j] = convolve(s1, s2, j * s1.dt)
    return OperatorFamily(s1.dt, out)


def sample_semigroup(matrix, t_end: float, dt: float) -> OperatorFamily:
    """e^{t M} at t_i = i·dt (batched blocks allowed: shape (..., n, n))."""
    m = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix)
    steps = int(round(t_end / dt))
    if steps < 0 or abs(steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise UsageError("t_end must be a multiple of dt")
    one = sla.expm(dt * m)
    vals = np.empty((steps + 1,) + m.shape, dtype=np.result_type(m, float))
    vals[0] = np.broadcast_to(np.eye(m.shape[-1]), m.shape)
    for i in range(1, steps + 1):
        vals[i] = one @ vals[i - 1]
    return OperatorFamily(dt, vals)


def _split_mats(op, part_names=("L", "A", "B")):
    if isinstance(op, DiscreteOperator):
        if op.has_blocks:
            return tuple(op.fourier_blocks(p) for p in part_names), True
        return tuple(op.matrix(p).toarray() for p in part_names), False
    if isinstance(op, (tuple, list)) and len(op) == 3:
        return tuple(m.toarray() if sp.issparse(m) else np.asarray(m) for m in op), False
    raise ParameterError("op must be a DiscreteOperator or an (L, A, B) tuple")


def _iterate(op_mats, n: int, t: float, order: str, dt: float) -> np.ndarray:
    _, a, b = op_mats
    sb = sample_semigroup(b, t, dt)
    t1 = a @ sb.values if order == "AS" else sb.values @ a
    fam = OperatorFamily(dt, t1)
    cur = fam
    for _ in range(n - 1):
        cur = convolve_family(cur, fam)
    return cur.values[-1]


def iterated_AS_B(op, n: int, t: float, order: str = "AS", nodes_per_unit: int = 1000,
                  check: bool = True) -> np.ndarray:
    """(𝒜S_ℬ)^{(*n)}(t) (order "AS") or (S_ℬ𝒜)^{(*n)}(t) (order "SA").

    Torus operators return Fourier blocks of shape (nx, nv, nv).  With
    ``check`` a half-resolution run estimates the Simpson error and raises
    ResolutionError above 1e-6 relative.
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    if order not in ("AS", "SA"):
        raise ParameterError("order must be 'AS' or 'SA'")
    if t < 0:
        raise ParameterError("t must be nonnegative")
    mats, _ = _split_mats(op)
    if t == 0:
        return np.zeros_like(mats[1]) if n > 1 else (mats[1] if order == "AS" else mats[1]).copy()
    steps = max(2, int(math.ceil(nodes_per_unit * t / 2.0)) * 2)
    dt = t / steps
    fine = _iterate(mats, n, t, order, dt)
    if check and n > 1:
        coarse = _iterate(mats, n, t, order, 2 * dt)
        scale = max(np.abs(fine).max(), 1e-300)
        err = np.abs(fine - coarse).max() / 15.0 / scale
        if err > 1e-6:
            raise ResolutionError(f"estimated convolution error {err:.2e} exceeds 1e-6; increase nodes_per_unit")
    return fine


def duhamel_reconstruct(op, n: int, t: float, nodes_per_unit: int = 1000, variant: str = "SA"):
    """Rebuild S_ℒ(t) from the iterated Duhamel series.

    variant "SA": S_ℒ = Σ_{ℓ<n} (S_ℬ𝒜)^{(*ℓ)} ∗ S_ℬ + (S_ℬ𝒜)^{(*n)} ∗ S_ℒ,
    variant "AS": S_ℒ = Σ_{ℓ<n} S_ℬ ∗ (𝒜S_ℬ)^{(*ℓ)} + S_ℒ ∗ (𝒜S_ℬ)^{(*n)},
    with the zero-th convolution power acting as the identity of ∗.  The
    series carries no alternating signs at semigroup level.
    Returns (reconstruction, operator-norm residual against S_ℒ(t)).
    """
    if n < 0:
        raise ParameterError("n must be >= 0")
    if variant not in ("SA", "AS"):
        raise ParameterError("variant must be 'SA' or 'AS'")
    (l_m, a_m, b_m), blocks = _split_mats(op)
    if t == 0:
        eye = np.broadcast_to(np.eye(l_m.shape[-1]), l_m.shape).copy()
        return eye, 0.0
    steps = max(2, int(math.ceil(nodes_per_unit * t / 2.0)) * 2)
    dt = t / steps
    sb = sample_semigroup(b_m, t, dt)
    sl = sample_semigroup(l_m, t, dt)
    if variant == "SA":
        kern = OperatorFamily(dt, sb.values @ a_m)
        step = lambda fam: convolve_family(fam, kern)  # kern ∗ fam
    else:
        kern = OperatorFamily(dt, a_m @ sb.values)
        step = lambda fam: convolve_family(kern, fam)  # fam ∗ kern
    total = np.zeros_like(sl.values[-1])
    cur = sb
    for _ in range(n):
        total = total + cur.values[-1]
        cur = step(cur)
    rem = sl
    for _ in range(n):
        rem = step(rem)
    recon = total + rem.values[-1]
    diff = recon - sl.values[-1]
    if blocks:
        resid = max(np.linalg.norm(d, 2) for d in diff)
    else:
        resid = float(np.linalg.norm(diff, 2))
    return recon, float(resid)


# fits ----------------------------------------------------------------------------

def _window_select(t, y, window, default_frac=0.2):
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if window is None:
        t0 = t[0] + default_frac * (t[-1] - t[0])
        window = (t0, t[-1])
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if sel.sum() < 8:
        raise DataError(f"need at least 8 samples in the fit window, got {int(sel.sum())}")
    ys = y[sel]
    if np.any(~np.isfinite(ys)) or np.any(ys <= 0):
        raise DataError("fit window contains nonpositive or non-finite values")
    return t[sel], ys, (float(window[0]), float(window[1]))


def _series(traj, key):
    if isinstance(key, str):
        if key not in traj.norms:
            raise DataError(f"trajectory has no column {key!r}")
        return traj.norms[key]
    return np.asarray(key, dtype=float)


def fit_decay(traj: Trajectory, key, window: tuple[float, float] | None = None) -> DecayFit:
    """Slope of log q versus t; the default window drops the first 20% of the range."""
    ts, ys, win = _window_select(traj.times, _series(traj, key), window)
    coef, res, *_ = np.polyfit(ts, np.log(ys), 1, full=True)
    slope, icpt = coef
    if abs(slope) * (ts[-1] - ts[0]) < math.log(10.0):
        raise DataError("fit window shorter than one decade of decay")
    resid = float(np.sqrt(np.mean((np.polyval(coef, ts) - np.log(ys)) ** 2)))
    return DecayFit("exp", float(slope), float(math.exp(icpt)), win, resid, len(ts))


def fit_power(traj: Trajectory, key, window: tuple[float, float] = (1e-3, 1e-1)) -> DecayFit:
    """Exponent Θ in q ~ C t^{-Θ} from a log-log fit (``rate`` holds −Θ)."""
    if window[0] <= 0 or window[1] / window[0] < 10 * (1 - 1e-9):
        raise DataError("power-law window must span at least one decade in t")
    ts, ys, win = _window_select(traj.times, _series(traj, key), window)
    if ts[-1] / ts[0] < 10 * (1 - 1e-9):
        raise DataError("sampled power-law window spans less than one decade")
    coef = np.polyfit(np.log(ts), np.log(ys), 1)
    resid = float(np.sqrt(np.mean((np.polyval(coef, np.log(ts)) - np.log(ys)) ** 2)))
    return DecayFit("power", float(coef[0]), float(math.exp(coef[1])), win, resid, len(ts))
