"""Cone divisors and the two discrete background surfaces.

A :class:`RadialSurface` is a surface of revolution ``drho^2 + h(rho)^2 dtheta^2``
sampled on a uniform polar grid, with an exact flat cone at each end.
A :class:`TriSurface` is a closed intrinsic triangulation given by edge lengths.
Both carry lumped node areas and a background curvature field ``K_bg`` whose
area-weighted sum equals ``2 pi chi`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.interpolate import BPoly
from scipy.sparse import csgraph

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ConeDivisor:
    """Marked points ``p_i`` with cone orders ``beta_i > -1``."""

    points: tuple[int, ...] = ()
    orders: tuple[float, ...] = ()

    def __post_init__(self):
        points = tuple(int(p) for p in self.points)
        orders = tuple(float(b) for b in self.orders)
        if len(points) != len(orders):
            raise ValueError("divisor needs one order per point")
        if len(set(points)) != len(points):
            raise ValueError(f"divisor points are not distinct: {points}")
        for p, b in zip(points, orders):
            if not math.isfinite(b) or b <= -1.0:
                raise ValueError(f"cone order at point {p} must be > -1, got {b}")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "orders", orders)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def total_order(self) -> float:
        return float(sum(self.orders))

    @property
    def cone_angles(self) -> tuple[float, ...]:
        return tuple(TWO_PI * (1.0 + b) for b in self.orders)

    def order_of(self, point: int) -> float | None:
        for p, b in zip(self.points, self.orders):
            if p == point:
                return b
        return None

    @property
    def all_sharp(self) -> bool:
        """True when every cone angle is below ``2 pi``."""
        return all(b < 0.0 for b in self.orders)


def euler_number(genus: int, divisor: ConeDivisor) -> float:
    """``chi(S) + sum(beta_i)`` for a closed surface of the given genus."""
    if genus < 0:
        raise ValueError("genus must be nonnegative")
    return 2.0 - 2.0 * genus + divisor.total_order


@dataclass(frozen=True, eq=False)
class Field:
    """Node values of a function, tagged with the metric it belongs to."""

    values: np.ndarray
    metric_tag: str = "background"

    def __post_init__(self):
        if self.metric_tag not in ("background", "flowing"):
            raise ValueError(f"unknown metric tag {self.metric_tag!r}")
        values = check_finite(self.values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self) -> int:
        return self.values.size


def check_finite(values, name: str = "field") -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} contains NaN or Inf")
    return arr


# --------------------------------------------------------------------------
# Radial surfaces


class ConeProfile:
    """Piecewise profile: ``s1*rho`` near 0, a C2 polynomial blend, ``s2*(L - rho)`` near L."""

    def __init__(self, length: float, slopes: tuple[float, float], flat: tuple[float, float], blend: BPoly):
        self.length = float(length)
        self.slopes = (float(slopes[0]), float(slopes[1]))
        self.a = float(flat[0])
        self.b = float(flat[1])
        self.blend = blend
        self._dblend = blend.derivative()
        self._d2blend = blend.derivative(2)
        self._iblend = blend.antiderivative()

    def _pieces(self, rho, left, mid, right):
        rho = np.asarray(rho, dtype=float)
        out = np.empty_like(rho)
        lo = rho <= self.a
        hi = rho >= self.b
        md = ~(lo | hi)
        out[lo] = left(rho[lo])
        out[hi] = right(rho[hi])
        out[md] = mid(rho[md])
        return out

    def h(self, rho):
        s1, s2, L = self.slopes[0], self.slopes[1], self.length
        return self._pieces(rho, lambda x: s1 * x, self.blend, lambda x: s2 * (L - x))

    def dh(self, rho):
        s1, s2 = self.slopes
        return self._pieces(rho, lambda x: np.full_like(x, s1), self._dblend, lambda x: np.full_like(x, -s2))

    def d2h(self, rho):
        return self._pieces(rho, np.zeros_like, self._d2blend, np.zeros_like)

    def integral(self, rho):
        """Antiderivative of ``h`` with value 0 at ``rho = 0``."""
        s1, s2, L = self.slopes[0], self.slopes[1], self.length
        at_a = 0.5 * s1 * self.a**2
        ib_a = float(self._iblend(self.a))
        at_b = at_a + float(self._iblend(self.b)) - ib_a
        return self._pieces(
            rho,
            lambda x: 0.5 * s1 * x**2,
            lambda x: at_a + self._iblend(x) - ib_a,
            lambda x: at_b + 0.5 * s2 * ((L - self.b) ** 2 - (L - x) ** 2),
        )

    def scaled(self, m: float) -> "ConeProfile":
        blend = BPoly(self.blend.c * m, self.blend.x)
        return ConeProfile(self.length, (m * self.slopes[0], m * self.slopes[1]), (self.a, self.b), blend)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


@dataclass(frozen=True, eq=False)
class RadialSurface:
    """Polar finite-volume grid on ``drho^2 + h(rho)^2 dtheta^2``, ``rho in [0, L]``.

    Nodes: tip 0 (index 0), rings ``i = 1..n-1`` with ``n_theta`` nodes each,
    tip ``L`` (last index). With ``n_theta == 1`` every ring is a single node and
    the surface only carries rotationally symmetric fields.
    """

    profile: ConeProfile
    n: int
    n_theta: int = 1

    def __post_init__(self):
        if self.n < 2 or self.n_theta < 1:
            raise ValueError("need n >= 2 radial intervals and n_theta >= 1")
        if self.drho / 2 > min(self.profile.a, self.profile.length - self.profile.b):
            raise ValueError("tip cells must lie inside the flat cone neighbourhoods")

    @property
    def length(self) -> float:
        return self.profile.length

    @property
    def orders(self) -> tuple[float, float]:
        return (self.profile.slopes[0] - 1.0, self.profile.slopes[1] - 1.0)

    @property
    def drho(self) -> float:
        return self.length / self.n

    @property
    def dtheta(self) -> float:
        return TWO_PI / self.n_theta

    @property
    def n_nodes(self) -> int:
        return 2 + (self.n - 1) * self.n_theta

    @property
    def tips(self) -> tuple[int, int]:
        return (0, self.n_nodes - 1)

    @cached_property
    def divisor(self) -> ConeDivisor:
        return ConeDivisor(self.tips, self.orders)

    @property
    def genus(self) -> int:
        return 0

    @property
    def euler_number(self) -> float:
        return euler_number(0, self.divisor)

    @property
    def grid_scale(self) -> float:
        return self.drho

    @cached_property
    def ring(self) -> np.ndarray:
        r = np.empty(self.n_nodes, dtype=int)
        r[0] = 0
        r[-1] = self.n
        r[1:-1] = np.repeat(np.arange(1, self.n), self.n_theta)
        return r

    @cached_property
    def rho(self) -> np.ndarray:
        return self.ring * self.drho

    @cached_property
    def theta(self) -> np.ndarray:
        th = np.zeros(self.n_nodes)
        th[1:-1] = np.tile(np.arange(self.n_theta) * self.dtheta, self.n - 1)
        return th

    def node(self, i: int, j: int = 0) -> int:
        if i == 0:
            return 0
        if i == self.n:
            return self.n_nodes - 1
        return 1 + (i - 1) * self.n_theta + (j % self.n_theta)

    @cached_property
    def areas(self) -> np.ndarray:
        half = 0.5 * self.drho
        edges = np.concatenate([[0.0], (np.arange(1, self.n + 1) - 0.5) * self.drho, [self.length]])
        cum = self.profile.integral(edges)
        ring_area = np.diff(cum)  # per radial cell, length n+1
        a = np.empty(self.n_nodes)
        a[0] = TWO_PI * ring_area[0]
        a[-1] = TWO_PI * ring_area[-1]
        a[1:-1] = np.repeat(ring_area[1:-1] * self.dtheta, self.n_theta)
        assert half > 0
        return a

    @cached_property
    def K_bg(self) -> np.ndarray:
        faces = (np.arange(self.n) + 0.5) * self.drho
        slope = self.profile.dh(faces)
        ring_defect = -(slope[1:] - slope[:-1])  # rings 1..n-1
        k = np.zeros(self.n_nodes)
        k[1:-1] = np.repeat(ring_defect * self.dtheta, self.n_theta) / self.areas[1:-1]
        return k

    def _inv_h_integral(self, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        x = mid[:, None] + half[:, None] * _GL_X[None, :]
        return (half[:, None] * _GL_W[None, :] / self.profile.h(x.ravel()).reshape(x.shape)).sum(axis=1)

    @cached_property
    def edge_weights(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Symmetric flux weights ``(i, j, w)`` with ``i < j``."""
        n, m = self.n, self.n_theta
        faces = (np.arange(n) + 0.5) * self.drho
        radial = self.profile.h(faces) * self.dtheta / self.drho
        ii, jj, ww = [], [], []
        ring1 = np.array([self.node(1, j) for j in range(m)])
        ii.append(np.zeros(m, dtype=int))
        jj.append(ring1)
        ww.append(np.full(m, radial[0]))
        for i in range(1, n - 1):
            a = self.node(i, 0) + np.arange(m)
            ii.append(a)
            jj.append(a + m)
            ww.append(np.full(m, radial[i]))
        last = np.array([self.node(n - 1, j) for j in range(m)])
        ii.append(last)
        jj.append(np.full(m, self.n_nodes - 1))
        ww.append(np.full(m, radial[n - 1]))
        if m > 1:
            lo = (np.arange(1, n) - 0.5) * self.drho
            hi = lo + self.drho
            angular = self._inv_h_integral(lo, hi) / self.dtheta
            pairs = m if m > 2 else 1
            for i in range(1, n):
                a = self.node(i, 0) + np.arange(pairs)
                b = self.node(i, 0) + (np.arange(pairs) + 1) % m
                ii.append(a)
                jj.append(b)
                # m == 2: both angular faces join the same pair of nodes
                ww.append(np.full(pairs, angular[i - 1] * (2.0 if m == 2 else 1.0)))
        i = np.concatenate(ii)
        j = np.concatenate(jj)
        w = np.concatenate(ww)
        lo_, hi_ = np.minimum(i, j), np.maximum(i, j)
        return lo_, hi_, w

    @cached_property
    def stencil(self):
        from .operators import LaplacianStencil

        i, j, w = self.edge_weights
        return LaplacianStencil.from_edges(self.n_nodes, i, j, w, self.areas)

    def distance_to(self, tip: int) -> np.ndarray:
        if tip == self.tips[0]:
            return self.rho.copy()
        if tip == self.tips[1]:
            return self.length - self.rho
        raise ValueError(f"node {tip} is not a tip of this surface")

    @cached_property
    def tip_distance(self) -> np.ndarray:
        return np.minimum(self.rho, self.length - self.rho)

    def gradient_sq(self, u) -> np.ndarray:
        """Squared background gradient per node from face difference quotients."""
        u = np.asarray(u, dtype=float)
        n, m = self.n, self.n_theta
        N = self.n_nodes
        rad_sum = np.zeros(N)
        rad_cnt = np.zeros(N)
        tip_max = np.zeros(2)
        i, j, w = self.edge_weights
        nr = m * n  # radial faces come first in edge_weights
        ri, rj = i[:nr], j[:nr]
        g = ((u[rj] - u[ri]) / self.drho) ** 2
        np.add.at(rad_sum, ri, g)
        np.add.at(rad_sum, rj, g)
        np.add.at(rad_cnt, ri, 1.0)
        np.add.at(rad_cnt, rj, 1.0)
        tip_max[0] = g[ri == 0].max()
        tip_max[1] = g[rj == N - 1].max()
        out = np.zeros(N)
        ring_nodes = slice(1, N - 1)
        out[ring_nodes] = rad_sum[ring_nodes] / rad_cnt[ring_nodes]
        if m > 1:
            ang_sum = np.zeros(N)
            h = self.profile.h(self.rho[1:-1])
            uu = u[1:-1].reshape(n - 1, m)
            du = (np.roll(uu, -1, axis=1) - uu) / (h.reshape(n - 1, m) * self.dtheta)
            ga = du**2
            ang = 0.5 * (ga + np.roll(ga, 1, axis=1))
            ang_sum[1:-1] = ang.ravel()
            out += ang_sum
        out[0] = tip_max[0]
        out[-1] = tip_max[1]
        return out

    @property
    def cone_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[[0, -1]] = True
        return mask


def build_football(
    beta1: float,
    beta2: float,
    n: int,
    length: float = math.pi,
    *,
    n_theta: int = 1,
    flat_fraction: float = 0.2,
    plateau: float = 0.0,
    plateau_height: float | None = None,
) -> RadialSurface:
    """Sphere with two cone tips of orders ``beta1`` (at rho=0) and ``beta2`` (at rho=L).

    The profile is exactly conical on the outer ``flat_fraction`` of the length
    at each end and a C2 quintic blend in between. ``plateau > 0`` inserts a
    cylinder of that fraction of ``L`` in the middle (height ``plateau_height``).
    """
    if beta1 <= -1 or beta2 <= -1:
        raise ValueError("cone orders must be > -1")
    if n < 16:
        raise ValueError("need n >= 16")
    if length <= 0:
        raise ValueError("length must be positive")
    if not 0 < flat_fraction < 0.5 or plateau < 0 or 2 * flat_fraction + plateau >= 1:
        raise ValueError("flat zones and plateau must fit inside the profile")
    s1, s2 = 1.0 + beta1, 1.0 + beta2
    a = flat_fraction * length
    b = length - a
    ha, hb = s1 * a, s2 * (length - b)
    if plateau > 0:
        if plateau_height is None:
            plateau_height = 1.5 * max(ha, hb)
        c1 = 0.5 * (length - plateau * length)
        c2 = c1 + plateau * length
        hp = float(plateau_height)
        blend = BPoly.from_derivatives([a, c1, c2, b], [[ha, s1, 0.0], [hp, 0.0, 0.0], [hp, 0.0, 0.0], [hb, -s2, 0.0]])
    else:
        blend = BPoly.from_derivatives([a, b], [[ha, s1, 0.0], [hb, -s2, 0.0]])
    profile = ConeProfile(length, (s1, s2), (a, b), blend)
    probe = np.linspace(0.0, length, 4001)[1:-1]
    if np.min(profile.h(probe)) <= 0.0:
        raise ValueError("degenerate profile: h <= 0 inside (0, L)")
    return RadialSurface(profile, int(n), int(n_theta))


# --------------------------------------------------------------------------
# Intrinsic triangulations


def _corner_data(lengths: np.ndarray):
    """Corner angles, cotangents and areas for triangles with sides (l_ij, l_jk, l_ki)."""
    lij, ljk, lki = lengths[:, 0], lengths[:, 1], lengths[:, 2]
    # angle at i is opposite jk, at j opposite ki, at k opposite ij
    opp = np.stack([ljk, lki, lij], axis=1)
    adj1 = np.stack([lij, ljk, lki], axis=1)
    adj2 = np.stack([lki, lij, ljk], axis=1)
    s = 0.5 * (lij + ljk + lki)
    num = np.sqrt(np.maximum((s[:, None] - adj1) * (s[:, None] - adj2), 0.0))
    den = np.sqrt(np.maximum(s[:, None] * (s[:, None] - opp), 0.0))
    angles = 2.0 * np.arctan2(num, den)
    srt = np.sort(lengths, axis=1)[:, ::-1]
    a, b, c = srt[:, 0], srt[:, 1], srt[:, 2]
    area = 0.25 * np.sqrt(np.maximum((a + (b + c)) * (c - (a - b)) * (c + (a - b)) * (a + (b - c)), 0.0))
    cot = (adj1**2 + adj2**2 - opp**2) / (4.0 * area[:, None])
    return angles, cot, area


def _edge_keys(triangles: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    t = triangles
    a = np.stack([t[:, 0], t[:, 1], t[:, 2]], axis=1)
    b = np.stack([t[:, 1], t[:, 2], t[:, 0]], axis=1)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    return lo * n + hi, np.stack([lo, hi], axis=-1)


@dataclass(frozen=True, eq=False)
class TriSurface:
    """Closed intrinsic triangulation with a cone divisor on its vertices.

    ``lengths[f] = (l_ij, l_jk, l_ki)`` for ``triangles[f] = (i, j, k)``.
    Optional ``coords`` hold a 2D layout used only to sample test functions.
    """

    n_vertices: int
    triangles: np.ndarray
    lengths: np.ndarray
    divisor: ConeDivisor = field(default_factory=ConeDivisor)
    coords: np.ndarray | None = None
    sheet: np.ndarray | None = None
    cone_tol: float = 1e-11

    def __post_init__(self):
        tris = np.asarray(self.triangles, dtype=np.int64)
        lens = np.asarray(self.lengths, dtype=float)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "lengths", lens)
        n = int(self.n_vertices)
        if tris.ndim != 2 or tris.shape[1] != 3 or lens.shape != tris.shape:
            raise ValueError("triangles and lengths must both have shape (M, 3)")
        if tris.size == 0 or tris.min() < 0 or tris.max() >= n:
            raise ValueError("triangle vertex id out of range")
        if np.any((tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])):
            raise ValueError("degenerate triangle with repeated vertex")
        if np.unique(tris).size != n:
            raise ValueError("every vertex must belong to a triangle")
        if not np.all(np.isfinite(lens)) or np.any(lens <= 0):
            raise ValueError("edge lengths must be positive and finite")
        lij, ljk, lki = lens.T
        bad = (lij >= ljk + lki) | (ljk >= lki + lij) | (lki >= lij + ljk)
        if np.any(bad):
            f = int(np.flatnonzero(bad)[0])
            raise ValueError(f"triangle {f} {tuple(tris[f])} violates the strict triangle inequality: {tuple(lens[f])}")
        keys, _ = _edge_keys(tris, n)
        flat_keys = keys.ravel()
        order = np.argsort(flat_keys, kind="stable")
        sk = flat_keys[order]
        uniq, counts = np.unique(sk, return_counts=True)
        if np.any(counts != 2):
            raise ValueError("surface must be a closed manifold: every edge in exactly two triangles")
        l_sorted = lens.ravel()[order].reshape(-1, 2)
        if np.any(np.abs(l_sorted[:, 0] - l_sorted[:, 1]) > 1e-12 * l_sorted.max(axis=1)):
            raise ValueError("an edge has inconsistent lengths in its two triangles")
        for p in self.divisor.points:
            if not 0 <= p < n:
                raise ValueError(f"cone point {p} is not a vertex")
        chi = n - uniq.size + tris.shape[0]
        if chi % 2 or chi > 2:
            raise ValueError(f"Euler characteristic {chi} is not that of a closed orientable surface")
        sums = self.angle_sums
        for p, target in zip(self.divisor.points, self.divisor.cone_angles):
            if abs(sums[p] - target) > self.cone_tol * max(1.0, target):
                raise ValueError(
                    f"cone vertex {p}: incident angle {sums[p]!r} differs from 2*pi*(1+beta) = {target!r}"
                )
        gb = float(self.K_bg @ self.areas)
        target = TWO_PI * self.euler_number
        if abs(gb - target) > 1e-10 * (1.0 + abs(target)):
            raise ValueError(f"background Gauss-Bonnet violated: {gb} vs {target}")

    @property
    def n_nodes(self) -> int:
        return self.n_vertices

    @cached_property
    def _corners(self):
        return _corner_data(self.lengths)

    @property
    def corner_angles(self) -> np.ndarray:
        return self._corners[0]

    @property
    def cotangents(self) -> np.ndarray:
        return self._corners[1]

    @property
    def triangle_areas(self) -> np.ndarray:
        return self._corners[2]

    @cached_property
    def edges(self) -> np.ndarray:
        keys, pairs = _edge_keys(self.triangles, self.n_vertices)
        _, idx = np.unique(keys.ravel(), return_index=True)
        return pairs.reshape(-1, 2)[idx]

    @property
    def genus(self) -> int:
        chi = self.n_vertices - self.edges.shape[0] + self.triangles.shape[0]
        return (2 - chi) // 2

    @property
    def euler_number(self) -> float:
        return euler_number(self.genus, self.divisor)

    @cached_property
    def angle_sums(self) -> np.ndarray:
        return np.bincount(self.triangles.ravel(), weights=self.corner_angles.ravel(), minlength=self.n_vertices)

    @cached_property
    def areas(self) -> np.ndarray:
        per = np.repeat(self.triangle_areas / 3.0, 3)
        return np.bincount(self.triangles.ravel(), weights=per, minlength=self.n_vertices)

    @property
    def cone_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[list(self.divisor.points)] = True
        return mask

    @cached_property
    def K_bg(self) -> np.ndarray:
        defect = TWO_PI - self.angle_sums
        k = defect / self.areas
        k[self.cone_mask] = 0.0
        return k

    @property
    def grid_scale(self) -> float:
        return float(self.lengths.max())

    @cached_property
    def edge_weights(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cotangent weights ``(i, j, w)`` with ``i < j``."""
        keys, pairs = _edge_keys(self.triangles, self.n_vertices)
        # edge ij (local 0) is opposite corner k (local 2), jk opposite i, ki opposite j
        half_cot = 0.5 * self.cotangents[:, [2, 0, 1]]
        uniq, inv = np.unique(keys.ravel(), return_inverse=True)
        w = np.bincount(inv, weights=half_cot.ravel(), minlength=uniq.size)
        # right angles give weights that are zero up to rounding
        w[np.abs(w) < 1e-12 * np.abs(w).max()] = 0.0
        ij = pairs.reshape(-1, 2)[np.unique(inv, return_index=True)[1]]
        return ij[:, 0], ij[:, 1], w

    @cached_property
    def stencil(self):
        from .operators import LaplacianStencil

        i, j, w = self.edge_weights
        return LaplacianStencil.from_edges(self.n_vertices, i, j, w, self.areas)

    @cached_property
    def _edge_graph(self):
        keys, pairs = _edge_keys(self.triangles, self.n_vertices)
        _, idx = np.unique(keys.ravel(), return_index=True)
        ij = pairs.reshape(-1, 2)[idx]
        ln = self.lengths.ravel()[idx]
        n = self.n_vertices
        return sparse.coo_matrix((ln, (ij[:, 0], ij[:, 1])), shape=(n, n)).tocsr()

    def distance_to(self, tip: int) -> np.ndarray:
        """Shortest edge-path distance to ``tip``."""
        return csgraph.dijkstra(self._edge_graph, directed=False, indices=int(tip))

    @cached_property
    def tip_distance(self) -> np.ndarray:
        if len(self.divisor) == 0:
            return np.full(self.n_vertices, np.inf)
        d = csgraph.dijkstra(self._edge_graph, directed=False, indices=list(self.divisor.points))
        return d.min(axis=0)

    def gradient_sq(self, u) -> np.ndarray:
        """Squared gradient of the piecewise-linear interpolant, area-averaged to vertices.

        Cone vertices take the maximum over their incident triangles.
        """
        u = np.asarray(u, dtype=float)
        t = self.triangles
        ui, uj, uk = u[t[:, 0]], u[t[:, 1]], u[t[:, 2]]
        cot = self.cotangents
        area = self.triangle_areas
        # twice the Dirichlet integral on each triangle
        e2 = cot[:, 2] * (ui - uj) ** 2 + cot[:, 0] * (uj - uk) ** 2 + cot[:, 1] * (uk - ui) ** 2
        g = np.maximum(0.5 * e2 / area, 0.0)
        num = np.bincount(t.ravel(), weights=np.repeat(g * area, 3), minlength=self.n_vertices)
        den = np.bincount(t.ravel(), weights=np.repeat(area, 3), minlength=self.n_vertices)
        out = num / den
        if len(self.divisor):
            tip_max = np.zeros(self.n_vertices)
            np.maximum.at(tip_max, t.ravel(), np.repeat(g, 3))
            mask = self.cone_mask
            out[mask] = tip_max[mask]
        return out


def make_delaunay(triangles: np.ndarray, lengths: np.ndarray, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray, int]:
    """Intrinsic edge flips until every cotangent weight is nonnegative.

    Flips keep the metric, hence all vertex angle sums. An edge whose flip would
    duplicate an existing edge is left in place.
    """
    tris = [list(map(int, t)) for t in triangles]
    lens = [list(map(float, l)) for l in lengths]
    where: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def key(a, b):
        return (a, b) if a < b else (b, a)

    def register(f):
        t = tris[f]
        for e in range(3):
            where.setdefault(key(t[e], t[(e + 1) % 3]), []).append((f, e))

    def unregister(f):
        t = tris[f]
        for e in range(3):
            k = key(t[e], t[(e + 1) % 3])
            lst = where[k]
            lst.remove(next(x for x in lst if x[0] == f))
            if not lst:
                del where[k]

    for f in range(len(tris)):
        register(f)

    def angle(a, b, c):
        # angle between sides a, b with opposite side c
        cosv = (a * a + b * b - c * c) / (2 * a * b)
        return math.acos(min(1.0, max(-1.0, cosv)))

    def area(l1, l2, l3):
        a, b, c = sorted((l1, l2, l3), reverse=True)
        return 0.25 * math.sqrt(max((a + (b + c)) * (c - (a - b)) * (c + (a - b)) * (a + (b - c)), 0.0))

    stack = list(where.keys())
    flips = 0
    while stack:
        k = stack.pop()
        occ = where.get(k)
        if occ is None or len(occ) != 2:
            continue
        (f1, e1), (f2, e2) = occ
        t1, t2 = tris[f1], tris[f2]
        i, j = t1[e1], t1[(e1 + 1) % 3]
        kk = t1[(e1 + 2) % 3]
        if not (t2[e2] == j and t2[(e2 + 1) % 3] == i):
            continue
        ll = t2[(e2 + 2) % 3]
        l_ij = lens[f1][e1]
        l_jk = lens[f1][(e1 + 1) % 3]
        l_ki = lens[f1][(e1 + 2) % 3]
        l_il = lens[f2][(e2 + 1) % 3]
        l_lj = lens[f2][(e2 + 2) % 3]
        a1 = area(l_ij, l_jk, l_ki)
        a2 = area(l_ij, l_il, l_lj)
        cot_k = (l_jk**2 + l_ki**2 - l_ij**2) / (4 * a1)
        cot_l = (l_il**2 + l_lj**2 - l_ij**2) / (4 * a2)
        if cot_k + cot_l >= -tol:
            continue
        if kk == ll or key(kk, ll) in where:
            continue
        theta = angle(l_ij, l_ki, l_jk) + angle(l_ij, l_il, l_lj)
        l_kl = math.sqrt(max(l_ki**2 + l_il**2 - 2 * l_ki * l_il * math.cos(theta), 0.0))
        unregister(f1)
        unregister(f2)
        tris[f1] = [kk, i, ll]
        lens[f1] = [l_ki, l_il, l_kl]
        tris[f2] = [ll, j, kk]
        lens[f2] = [l_lj, l_jk, l_kl]
        register(f1)
        register(f2)
        flips += 1
        stack.extend([key(kk, i), key(i, ll), key(ll, j), key(j, kk)])
    return np.array(tris, dtype=np.int64), np.array(lens), flips


def _triangle_grid(s: int):
    """Barycentric grid on a triangle: weights (N, 3), triangles, boundary mask, corner ids."""
    idx = {}
    weights = []
    for a in range(s + 1):
        for b in range(s + 1 - a):
            idx[(a, b)] = len(weights)
            weights.append(((s - a - b) / s, a / s, b / s))
    tris = []
    for a in range(s):
        for b in range(s - a):
            tris.append((idx[(a, b)], idx[(a + 1, b)], idx[(a, b + 1)]))
            if a + b < s - 1:
                tris.append((idx[(a + 1, b)], idx[(a + 1, b + 1)], idx[(a, b + 1)]))
    weights = np.array(weights)
    boundary = np.any(weights == 0.0, axis=1)
    corners = [idx[(0, 0)], idx[(s, 0)], idx[(0, s)]]
    return weights, np.array(tris, dtype=np.int64), boundary, corners


def _split_boundary_chords(pts: np.ndarray, tris: np.ndarray, boundary: np.ndarray):
    """Remove interior edges whose two ends lie on the boundary.

    Such an edge would appear twice after doubling. The two triangles on it
    form a quad ``(c, p, x, q)`` with ``c`` on the boundary; it is replaced by
    a fan of four triangles around a new vertex moved slightly from the chord
    midpoint toward ``x``, so the angles facing the boundary edges stay acute.
    """
    pts = [np.asarray(p, dtype=float) for p in pts]
    tris = [list(t) for t in tris]
    boundary = list(boundary)
    while True:
        owner: dict[tuple[int, int], list[int]] = {}
        for f, t in enumerate(tris):
            for e in range(3):
                a, b = t[e], t[(e + 1) % 3]
                owner.setdefault((min(a, b), max(a, b)), []).append(f)
        chords = [(k, fs) for k, fs in sorted(owner.items()) if len(fs) == 2 and boundary[k[0]] and boundary[k[1]]]
        if not chords:
            break
        (a, b), (f1, f2) = chords[0]
        t1 = tris[f1]
        e = next(e for e in range(3) if {t1[e], t1[(e + 1) % 3]} == {a, b})
        p, q, c = t1[e], t1[(e + 1) % 3], t1[(e + 2) % 3]
        x = next(v for v in tris[f2] if v not in (a, b))
        if boundary[x] and not boundary[c]:
            f1, f2 = f2, f1
            t1 = tris[f1]
            e = next(e for e in range(3) if {t1[e], t1[(e + 1) % 3]} == {a, b})
            p, q, c = t1[e], t1[(e + 1) % 3], t1[(e + 2) % 3]
            x = next(v for v in tris[f2] if v not in (a, b))
        mid = len(pts)
        pts.append(0.95 * 0.5 * (pts[p] + pts[q]) + 0.05 * pts[x])
        boundary.append(False)
        # t1 = (p, q, c) is positively oriented, so the quad runs p, x, q, c
        tris[f1] = [p, mid, c]
        tris[f2] = [q, c, mid]
        tris.append([p, x, mid])
        tris.append([x, q, mid])
    return np.array(pts), np.array(tris, dtype=np.int64), np.array(boundary)


def _minkowski_gap(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    d = X - Y
    return -(d[..., 0] ** 2) + d[..., 1] ** 2 + d[..., 2] ** 2


def _hyperbolic_distance(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    # 4 sinh^2(d/2) = -<X-Y, X-Y> on the hyperboloid; stable for short edges
    q = np.maximum(_minkowski_gap(X, Y), 0.0)
    return 2.0 * np.arcsinh(0.5 * np.sqrt(q))


def _hyperbolic_triangle_klein(angles: Sequence[float]) -> np.ndarray:
    """Klein-model vertices of the hyperbolic triangle with the given interior angles."""
    A, B, C = angles
    cosh_b = (math.cos(B) + math.cos(A) * math.cos(C)) / (math.sin(A) * math.sin(C))
    cosh_c = (math.cos(C) + math.cos(A) * math.cos(B)) / (math.sin(A) * math.sin(B))
    b, c = math.acosh(cosh_b), math.acosh(cosh_c)
    pts = [
        np.array([1.0, 0.0, 0.0]),
        np.array([math.cosh(c), math.sinh(c), 0.0]),
        np.array([math.cosh(b), math.sinh(b) * math.cos(A), math.sinh(b) * math.sin(A)]),
    ]
    centre = sum(pts)
    centre = centre / math.sqrt(centre[0] ** 2 - centre[1] ** 2 - centre[2] ** 2)
    # Lorentz boost taking the centre to (1, 0, 0)
    x0, v = centre[0], centre[1:]
    boost = np.eye(3)
    boost[0, 0] = x0
    boost[0, 1:] = -v
    boost[1:, 0] = -v
    boost[1:, 1:] += np.outer(v, v) / (1.0 + x0)
    out = np.array([boost @ p for p in pts])
    return out[:, 1:] / out[:, :1]


def _klein_to_hyperboloid(k: np.ndarray) -> np.ndarray:
    w = 1.0 / np.sqrt(1.0 - (k**2).sum(axis=1))
    return np.column_stack([w, w * k[:, 0], w * k[:, 1]])


def _fix_corner(tris, lens, corner: int, target: float) -> None:
    """Rescale the angles at ``corner`` to sum to ``target`` by changing opposite edges."""
    inc = [(f, list(t).index(corner)) for f, t in enumerate(tris) if corner in t]
    angles, _, _ = _corner_data(lens[[f for f, _ in inc]])
    total = sum(angles[n, e] for n, (_, e) in enumerate(inc))
    scale = target / total
    for n, (f, e) in enumerate(inc):
        # sides at the corner: local edges e (corner->next) and e-1 (prev->corner)
        a = lens[f, e]
        b = lens[f, (e + 2) % 3]
        theta = angles[n, e] * scale
        new = math.sqrt(a * a + b * b - 2 * a * b * math.cos(theta))
        p, q = tris[f][(e + 1) % 3], tris[f][(e + 2) % 3]
        for g, t in enumerate(tris):
            for k in range(3):
                if {t[k], t[(k + 1) % 3]} == {p, q}:
                    lens[g, k] = new


def _double(n: int, tris: np.ndarray, lens: np.ndarray, boundary: np.ndarray, coords: np.ndarray):
    ids_a = np.arange(n)
    ids_b = np.empty(n, dtype=np.int64)
    interior = np.flatnonzero(~boundary)
    ids_b[boundary] = ids_a[boundary]
    ids_b[interior] = n + np.arange(interior.size)
    tris_b = ids_b[tris][:, [0, 2, 1]]
    lens_b = lens[:, [2, 1, 0]]
    all_tris = np.vstack([tris, tris_b])
    all_lens = np.vstack([lens, lens_b])
    all_coords = np.vstack([coords, coords[interior]])
    sheet = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(interior.size, dtype=np.int64)])
    return n + interior.size, all_tris, all_lens, all_coords, sheet


def build_doubled_polygon(
    kind: str,
    angles: Sequence[float],
    resolution: int,
    *,
    sides: tuple[float, float] = (1.0, 1.0),
    delaunay: bool = True,
) -> TriSurface:
    """Double of a geodesic polygon with interior angles ``pi * alpha_i``.

    ``angles`` are the ``alpha_i``. Corners become cone points of angle
    ``2 pi alpha_i``, i.e. order ``alpha_i - 1``. Supported: euclidean
    triangles, euclidean rectangles (``sides`` sets the side lengths) and
    hyperbolic triangles. Hyperbolic edge lengths are true geodesic distances
    between grid points in the Klein model; the flat corner triangles are then
    adjusted so each doubled corner carries exactly the target angle.
    """
    alphas = [float(a) for a in angles]
    m = len(alphas)
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    if any(a <= 0 for a in alphas):
        raise ValueError("polygon angles must be positive")
    total = math.pi * sum(alphas)
    if kind == "euclidean":
        if abs(total - (m - 2) * math.pi) > 1e-12:
            raise ValueError(f"euclidean polygon angles must sum to (m-2)*pi, got {total}")
        if m == 4:
            if any(abs(a - 0.5) > 1e-12 for a in alphas):
                raise ValueError("only rectangles are supported among euclidean quadrilaterals")
            return _doubled_rectangle(sides, resolution, delaunay)
        if m != 3:
            raise ValueError("euclidean polygons: triangles and rectangles only")
        A, B, C = (math.pi * a for a in alphas)
        c = 1.0
        b = c * math.sin(B) / math.sin(C)
        P = np.array([[0.0, 0.0], [c, 0.0], [b * math.cos(A), b * math.sin(A)]])
        w, tris, boundary, corners = _triangle_grid(resolution)
        w, tris, boundary = _split_boundary_chords(w, tris, boundary)
        pts = w @ P
        dist = lambda p, q: np.linalg.norm(pts[p] - pts[q], axis=1)  # noqa: E731
        coords = pts
    elif kind == "hyperbolic":
        if m != 3:
            raise ValueError("hyperbolic polygons: only triangles are determined by their angles")
        if not total < math.pi:
            raise ValueError("hyperbolic triangle angles must sum to less than pi")
        K = _hyperbolic_triangle_klein([math.pi * a for a in alphas])
        w, tris, boundary, corners = _triangle_grid(resolution)
        w, tris, boundary = _split_boundary_chords(w, tris, boundary)
        coords = w @ K
        X = _klein_to_hyperboloid(coords)
        dist = lambda p, q: _hyperbolic_distance(X[p], X[q])  # noqa: E731
    else:
        raise ValueError(f"unknown polygon kind {kind!r}")
    lens = np.column_stack([dist(tris[:, 0], tris[:, 1]), dist(tris[:, 1], tris[:, 2]), dist(tris[:, 2], tris[:, 0])])
    for c_id, a in zip(corners, alphas):
        _fix_corner(tris, lens, c_id, math.pi * a)
    n, all_tris, all_lens, all_coords, sheet = _double(len(coords), tris, lens, boundary, coords)
    if delaunay:
        all_tris, all_lens, _ = make_delaunay(all_tris, all_lens)
    divisor = ConeDivisor(tuple(corners), tuple(a - 1.0 for a in alphas))
    return TriSurface(n, all_tris, all_lens, divisor, coords=all_coords, sheet=sheet)


def _doubled_rectangle(sides, resolution, delaunay) -> TriSurface:
    lx, ly = float(sides[0]), float(sides[1])
    if lx <= 0 or ly <= 0:
        raise ValueError("rectangle sides must be positive")
    nx = resolution if lx >= ly else max(1, round(resolution * lx / ly))
    ny = resolution if ly >= lx else max(1, round(resolution * ly / lx))
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    vid = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    a = vid[:-1, :-1].ravel()
    b = vid[1:, :-1].ravel()
    c = vid[1:, 1:].ravel()
    d = vid[:-1, 1:].ravel()
    # union-jack diagonals: every corner cell is cut through its corner vertex
    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    main = ((2 * I.ravel() < nx) == (2 * J.ravel() < ny))
    tris = np.vstack([
        np.column_stack([a, b, c])[main],
        np.column_stack([a, c, d])[main],
        np.column_stack([a, b, d])[~main],
        np.column_stack([b, c, d])[~main],
    ])
    boundary = (pts[:, 0] == 0) | (pts[:, 0] == lx) | (pts[:, 1] == 0) | (pts[:, 1] == ly)
    pts, tris, boundary = _split_boundary_chords(pts, tris, boundary)
    dist = lambda p, q: np.linalg.norm(pts[p] - pts[q], axis=1)  # noqa: E731
    lens = np.column_stack([dist(tris[:, 0], tris[:, 1]), dist(tris[:, 1], tris[:, 2]), dist(tris[:, 2], tris[:, 0])])
    corners = [vid[0, 0], vid[nx, 0], vid[nx, ny], vid[0, ny]]
    n, all_tris, all_lens, all_coords, sheet = _double(len(pts), tris, lens, boundary, pts)
    if delaunay:
        all_tris, all_lens, _ = make_delaunay(all_tris, all_lens)
    divisor = ConeDivisor(tuple(int(c) for c in corners), (-0.5,) * 4)
    return TriSurface(n, all_tris, all_lens, divisor, coords=all_coords, sheet=sheet)


def build_pillowcase(resolution: int, sides: tuple[float, float] = (1.0, 1.0)) -> TriSurface:
    """Double of a flat rectangle: four cone points of angle pi."""
    return build_doubled_polygon("euclidean", (0.5, 0.5, 0.5, 0.5), resolution, sides=sides)


def build_flat_torus(
    lx: float,
    ly: float,
    nx: int,
    ny: int,
    *,
    distortion: float = 0.0,
    delaunay: bool = True,
) -> TriSurface:
    """Flat torus ``R^2 / (lx Z x ly Z)`` triangulated from a smoothly distorted grid.

    ``distortion`` in ``[0, 1)`` moves grid points by a periodic shear; the
    metric stays exactly flat, only the mesh changes.
    """
    if not 0.0 <= distortion < 1.0:
        raise ValueError("distortion must lie in [0, 1)")
    eps = distortion

    def place(i, j):
        X = i * lx / nx
        Y = j * ly / ny
        x = X + eps * lx / TWO_PI * np.sin(TWO_PI * Y / ly) * 0.5
        y = Y + eps * ly / TWO_PI * np.sin(TWO_PI * X / lx) * 0.5
        return np.stack([x, y], axis=-1)

    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    I, J = I.ravel(), J.ravel()
    vid = lambda i, j: (i % nx) * ny + (j % ny)  # noqa: E731
    tris_a = np.column_stack([vid(I, J), vid(I + 1, J), vid(I + 1, J + 1)])
    tris_b = np.column_stack([vid(I, J), vid(I + 1, J + 1), vid(I, J + 1)])
    pa, pb, pc, pd = place(I, J), place(I + 1, J), place(I + 1, J + 1), place(I, J + 1)
    d = lambda p, q: np.linalg.norm(p - q, axis=1)  # noqa: E731
    lens_a = np.column_stack([d(pa, pb), d(pb, pc), d(pc, pa)])
    lens_b = np.column_stack([d(pa, pc), d(pc, pd), d(pd, pa)])
    tris = np.vstack([tris_a, tris_b])
    lens = np.vstack([lens_a, lens_b])
    if delaunay:
        tris, lens, _ = make_delaunay(tris, lens)
    coords = place(I, J)
    return TriSurface(nx * ny, tris, lens, ConeDivisor(), coords=coords)
