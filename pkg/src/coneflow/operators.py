"""Discrete Laplacian, Dirichlet energy, gradients and tip truncation."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse

from .geometry import Field, check_finite


def _values(u) -> np.ndarray:
    if isinstance(u, Field):
        return u.values
    return np.asarray(u, dtype=float)


@dataclass(frozen=True, eq=False)
class LaplacianStencil:
    """Edge weights ``w_ij >= 0`` and lumped areas ``A_i``.

    ``stiffness @ u`` is ``sum_j w_ij (u_j - u_i)``; the Laplacian divides that
    by ``A_i``.
    """

    n: int
    i: np.ndarray
    j: np.ndarray
    w: np.ndarray
    areas: np.ndarray

    @classmethod
    def from_edges(cls, n: int, i, j, w, areas) -> "LaplacianStencil":
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        w = np.asarray(w, dtype=float)
        areas = np.asarray(areas, dtype=float)
        if np.any(i == j):
            raise ValueError("stencil edges must join distinct nodes")
        if np.any(w < 0):
            raise ValueError(f"negative edge weight {w.min():.3e}: mesh is not Delaunay")
        if areas.shape != (n,) or np.any(areas <= 0):
            raise ValueError("areas must be positive, one per node")
        return cls(n, i, j, w, areas)

    @cached_property
    def stiffness(self) -> sparse.csr_matrix:
        n = self.n
        off = sparse.coo_matrix((np.concatenate([self.w, self.w]), (np.concatenate([self.i, self.j]), np.concatenate([self.j, self.i]))), shape=(n, n)).tocsr()
        deg = np.asarray(off.sum(axis=1)).ravel()
        return (off - sparse.diags(deg)).tocsr()

    @cached_property
    def degree(self) -> np.ndarray:
        return -self.stiffness.diagonal()

    def apply(self, u) -> np.ndarray:
        return (self.stiffness @ _values(u)) / self.areas

    def energy(self, u) -> float:
        u = _values(u)
        d = u[self.i] - u[self.j]
        return float(self.w @ (d * d))

    def restrict(self, active: np.ndarray) -> "LaplacianStencil":
        """Stencil on the active nodes; edges leaving the set are dropped (zero flux)."""
        active = np.asarray(active, dtype=bool)
        keep = active[self.i] & active[self.j]
        renum = np.full(self.n, -1, dtype=np.int64)
        renum[active] = np.arange(int(active.sum()))
        return LaplacianStencil(int(active.sum()), renum[self.i[keep]], renum[self.j[keep]], self.w[keep], self.areas[active])


def laplacian_apply(stencil: LaplacianStencil, u) -> Field:
    """``(1/A_i) sum_j w_ij (u_j - u_i)``."""
    u = check_finite(_values(u), "u")
    return Field(stencil.apply(u))


def dirichlet_energy(stencil: LaplacianStencil, u) -> float:
    """``1/2 sum_{i,j} w_ij (u_i - u_j)^2`` over ordered pairs, i.e. once per edge."""
    return stencil.energy(check_finite(_values(u), "u"))


def gradient_magnitude(surface, u, u0=None) -> Field:
    """Squared gradient per node in the background metric, or in ``e^{2 u0}`` times it."""
    g = surface.gradient_sq(check_finite(_values(u), "u"))
    if u0 is not None:
        g = g * np.exp(-2.0 * _values(u0))
        return Field(g, "flowing")
    return Field(g)


@dataclass(frozen=True, eq=False)
class Truncation:
    """The surface with the tip disks ``{rho < 2^-k}`` removed, closed by zero-flux rows."""

    level: int
    radius: float
    active: np.ndarray
    boundary: np.ndarray
    stencil: LaplacianStencil

    @property
    def index(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    def restrict(self, u) -> np.ndarray:
        return _values(u)[self.active]


def truncate(surface, k: int) -> Truncation:
    """Build ``S_k``. Raises if ``2^-k`` is below twice the grid scale."""
    radius = 2.0 ** (-k)
    h = surface.grid_scale
    if radius < 2.0 * h:
        raise ValueError(f"truncation level k={k} (radius {radius:.3e}) is below the grid floor 2*h = {2 * h:.3e}")
    dist = surface.tip_distance
    active = dist >= radius
    if active.all() and len(surface.divisor):
        raise ValueError("truncation removes no nodes")
    if not active.any():
        raise ValueError(f"truncation level k={k} removes every node")
    st = surface.stencil
    cut = active[st.i] != active[st.j]
    boundary = np.zeros(surface.n_nodes, dtype=bool)
    boundary[st.i[cut]] = True
    boundary[st.j[cut]] = True
    boundary &= active
    return Truncation(k, radius, active, boundary[active], st.restrict(active))
