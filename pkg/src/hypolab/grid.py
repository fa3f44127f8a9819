"""Tensor grids for velocity and phase-space discretizations."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ParameterError, ResolutionError

__all__ = ["Grid", "velocity_bound"]


def velocity_bound(gamma: float = 2.0, tol: float = 1e-12) -> float:
    """Smallest V with e^{-(Φ(V)-Φ(0))} < tol, rounded up to a half-integer."""
    if gamma < 1:
        raise ParameterError("gamma must be >= 1")
    target = -np.log(tol)
    # Φ(V) - Φ(0) = (⟨V⟩^γ - 1)/γ
    v = ((1.0 + gamma * target) ** (2.0 / gamma) - 1.0) ** 0.5
    return float(np.ceil(2.0 * v) / 2.0)


def _centered_1d(n: int, h: float, periodic: bool) -> sp.csr_matrix:
    if periodic:
        main = sp.diags([np.full(n - 1, 0.5), np.full(n - 1, -0.5)], [1, -1], shape=(n, n)).tolil()
        main[0, n - 1] = -0.5
        main[n - 1, 0] = 0.5
        return (main.tocsr() / h)
    d = sp.diags([np.full(n - 1, 0.5), np.full(n - 1, -0.5)], [1, -1], shape=(n, n)).tolil()
    # second-order one-sided stencils at the two ends
    d[0, :3] = [-1.5, 2.0, -0.5]
    d[n - 1, n - 3:] = [0.5, -2.0, 1.5]
    return d.tocsr() / h


def _forward_1d(n: int, h: float, periodic: bool) -> sp.csr_matrix:
    rows = n if periodic else n - 1
    i = np.arange(rows)
    j = (i + 1) % n
    data = np.concatenate([np.full(rows, -1.0 / h), np.full(rows, 1.0 / h)])
    return sp.csr_matrix((data, (np.concatenate([i, i]), np.concatenate([i, j]))), shape=(rows, n))


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid in velocity, optionally times a space grid.

    Grid functions are flat arrays in C order over ``shape``; the space axis,
    when present, comes first.  ``x_kind`` is ``None`` (homogeneous),
    ``"torus"`` (unit periodic cell, nodes ``j/nx``) or ``"line"``
    (cell centres on ``[-xmax, xmax]`` with no-flux ends).
    """

    nv: int
    vmax: float
    dv: int = 1
    nx: int = 0
    xmax: float = 0.0
    x_kind: str | None = None

    def __post_init__(self):
        if self.dv not in (1, 2):
            raise ParameterError("velocity dimension must be 1 or 2")
        if self.nv < 8:
            raise ResolutionError(f"need at least 8 velocity points, got {self.nv}")
        if self.vmax <= 0:
            raise ParameterError("vmax must be positive")
        if self.x_kind not in (None, "torus", "line"):
            raise ParameterError(f"unknown x_kind {self.x_kind!r}")
        if self.x_kind is not None:
            if self.nx < 8:
                raise ResolutionError(f"need at least 8 space points, got {self.nx}")
            if self.dv != 1:
                raise ParameterError("phase-space grids support one velocity dimension")
            if self.x_kind == "line" and self.xmax <= 0:
                raise ParameterError("xmax must be positive for a line grid")

    @classmethod
    def velocity(cls, nv: int, vmax: float, d: int = 1) -> "Grid":
        return cls(nv=nv, vmax=float(vmax), dv=d)

    @classmethod
    def torus(cls, nx: int, nv: int, vmax: float) -> "Grid":
        return cls(nv=nv, vmax=float(vmax), nx=nx, xmax=1.0, x_kind="torus")

    @classmethod
    def line(cls, nx: int, nv: int, xmax: float, vmax: float) -> "Grid":
        return cls(nv=nv, vmax=float(vmax), nx=nx, xmax=float(xmax), x_kind="line")

    # geometry
    @property
    def hv(self) -> float:
        return 2.0 * self.vmax / self.nv

    @property
    def hx(self) -> float:
        if self.x_kind == "torus":
            return 1.0 / self.nx
        if self.x_kind == "line":
            return 2.0 * self.xmax / self.nx
        return 1.0

    @cached_property
    def v(self) -> np.ndarray:
        return -self.vmax + self.hv * (np.arange(self.nv) + 0.5)

    @cached_property
    def x(self) -> np.ndarray | None:
        if self.x_kind == "torus":
            return np.arange(self.nx) / self.nx
        if self.x_kind == "line":
            return -self.xmax + self.hx * (np.arange(self.nx) + 0.5)
        return None

    @property
    def has_x(self) -> bool:
        return self.x_kind is not None

    @property
    def shape(self) -> tuple[int, ...]:
        if self.has_x:
            return (self.nx, self.nv)
        return (self.nv,) * self.dv

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.hv ** self.dv * (self.hx if self.has_x else 1.0)

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weight of every cell (flat)."""
        return np.full(self.size, self.cell_volume)

    def v_measure(self) -> float:
        return (2.0 * self.vmax) ** self.dv

    @cached_property
    def V(self) -> tuple[np.ndarray, ...]:
        """Velocity components, each flat over the grid."""
        if self.has_x:
            return (np.broadcast_to(self.v[None, :], self.shape).ravel().copy(),)
        mesh = np.meshgrid(*([self.v] * self.dv), indexing="ij")
        return tuple(m.ravel() for m in mesh)

    @cached_property
    def X(self) -> np.ndarray | None:
        if not self.has_x:
            return None
        return np.broadcast_to(self.x[:, None], self.shape).ravel().copy()

    @cached_property
    def vabs2(self) -> np.ndarray:
        return sum(c ** 2 for c in self.V)

    # difference operators
    def _axis_ops(self, builder) -> list[sp.csr_matrix]:
        """Apply a 1D builder along each axis; space axis first."""
        axes = []
        if self.has_x:
            axes.append((self.nx, self.hx, self.x_kind == "torus"))
            axes.append((self.nv, self.hv, False))
        else:
            axes.extend([(self.nv, self.hv, False)] * self.dv)
        mats = []
        n_axes = len(axes)
        for a, (n, h, periodic) in enumerate(axes):
            blocks = [sp.identity(axes[b][0], format="csr") for b in range(n_axes)]
            blocks[a] = builder(n, h, periodic)
            m = blocks[0]
            for b in blocks[1:]:
                m = sp.kron(m, b, format="csr")
            mats.append(m.tocsr())
        return mats

    @cached_property
    def gradient_matrices(self) -> list[sp.csr_matrix]:
        """Centered differences inside, second-order one-sided at boundaries."""
        return self._axis_ops(_centered_1d)

    @cached_property
    def forward_matrices(self) -> list[sp.csr_matrix]:
        """Edge differences (used for Lipschitz-type constraints)."""
        return self._axis_ops(_forward_1d)

    def gradient(self, f: np.ndarray) -> list[np.ndarray]:
        return [g @ f for g in self.gradient_matrices]

    def n_space_axes(self) -> int:
        return 1 if self.has_x else 0
