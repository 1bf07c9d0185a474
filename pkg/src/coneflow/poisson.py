"""Poisson equation on cone surfaces, conformal reduction and tip gradient probes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .geometry import Field, RadialSurface, check_finite
from .linalg import ConvergenceError, pcg
from .operators import LaplacianStencil


class MeanZeroError(ValueError):
    """Right-hand side does not integrate to zero."""


def _vals(x) -> np.ndarray:
    return x.values if isinstance(x, Field) else np.asarray(x, dtype=float)


def _stencil(surface_or_stencil) -> LaplacianStencil:
    if isinstance(surface_or_stencil, LaplacianStencil):
        return surface_or_stencil
    return surface_or_stencil.stencil


def project_mean_zero(surface, f, weights=None) -> np.ndarray:
    """Subtract the weighted mean; ``weights`` default to the node areas."""
    f = check_finite(_vals(f), "f")
    w = _stencil(surface).areas if weights is None else np.asarray(weights, dtype=float)
    return f - (w @ f) / w.sum()


def solve_poisson(surface, f, *, rtol: float = 1e-8, max_refinements: int = 4) -> Field:
    """Solve ``Lap v = f`` with ``sum(f A) = 0``; the result has ``sum(v A) = 0``.

    The singular system is solved by CG with the constant mode deflated.
    Iterative refinement is applied until ``||Lap v - f||_inf <= rtol ||f||_inf``.
    """
    st = _stencil(surface)
    f = check_finite(_vals(f), "f")
    A = st.areas
    mass = float(f @ A)
    scale = float(np.abs(f) @ A)
    if abs(mass) > 1e-8 * scale:
        raise MeanZeroError(f"sum(f A) = {mass:.3e} is not zero relative to sum(|f| A) = {scale:.3e}")
    v = np.zeros_like(f)
    fmax = float(np.max(np.abs(f)))
    if fmax == 0.0:
        return Field(v)
    K = st.stiffness
    diag = st.degree
    ones = np.ones_like(f)
    res = f - mass / A.sum()
    for _ in range(max_refinements + 1):
        rhs = -(A * res)
        rhs -= rhs.mean()
        dv, _ = pcg(lambda x: -(K @ x), rhs, diag, rtol=1e-13, null_vector=ones)
        v += dv
        v -= (v @ A) / A.sum()
        res = f - st.apply(v)
        err = float(np.max(np.abs(res)))
        if err <= rtol * fmax:
            return Field(v)
        res = res - (res @ A) / A.sum()
    raise ConvergenceError(
        f"Poisson residual {err:.3e} above {rtol:.1e} * ||f||",
        iterations=max_refinements,
        residual=err / fmax,
        diagnostics={"n": f.size},
    )


def solve_poisson_conformal(surface, u, f, **kw) -> Field:
    """Solve ``Lap_g v = f`` for ``g = e^{2u} g_bg``, i.e. ``Lap_bg v = e^{2u} f``."""
    u = _vals(u)
    return solve_poisson(surface, np.exp(2.0 * u) * _vals(f), **kw)


@dataclass(frozen=True)
class GradientProbe:
    radii: np.ndarray
    sup_grad: np.ndarray
    tip_value: float

    @property
    def maximum(self) -> float:
        vals = self.sup_grad[np.isfinite(self.sup_grad)]
        return float(max(vals.max(initial=0.0), self.tip_value))


def gradient_probe(surface, v, tip: int, radii: Sequence[float]) -> GradientProbe:
    """``sup |grad v|`` over nodes with tip distance in ``[s, 2s]`` for each ``s``.

    Bands without nodes give NaN. ``tip_value`` is the gradient reported at
    the tip node itself (largest incident difference quotient).
    """
    g = np.sqrt(surface.gradient_sq(check_finite(_vals(v), "v")))
    d = surface.distance_to(tip)
    sups = []
    for s in radii:
        band = (d >= s) & (d <= 2 * s)
        sups.append(float(g[band].max()) if band.any() else math.nan)
    return GradientProbe(np.asarray(radii, dtype=float), np.array(sups), float(g[tip]))


def radial_probe_study(
    beta: float,
    data: Callable[[np.ndarray, np.ndarray], np.ndarray],
    radii: Sequence[float],
    *,
    n: int = 128,
    n_theta: int = 16,
    levels: Sequence[int] = (1, 2, 4),
) -> list[tuple[int, GradientProbe]]:
    """Gradient probes of ``Lap v = data - mean`` on footballs refined by each factor in ``levels``.

    ``data(rho, theta)`` is sampled at nodes and projected to mean zero. The
    probe is taken at the tip ``rho = 0`` with order ``beta``; the other tip
    has order ``-1/2``.
    """
    from .geometry import build_football

    out = []
    for lev in levels:
        s = build_football(beta, -0.5, n * lev, n_theta=n_theta * lev)
        f = project_mean_zero(s, data(s.rho, s.theta))
        v = solve_poisson(s, f)
        out.append((lev, gradient_probe(s, v, s.tips[0], radii)))
    return out


def mfold_cover(surface: RadialSurface, m: int) -> RadialSurface:
    """The ``m``-fold cyclic cover ``(rho, theta) -> (rho, m theta)`` of a radial surface.

    Cone orders become ``m (1 + beta) - 1``. Every lifted order must lie in
    ``(-1, 0]``, i.e. the cover may smooth a tip but not overshoot it.
    """
    if not isinstance(surface, RadialSurface):
        raise TypeError("covers are built for radial surfaces only")
    if int(m) != m or m < 1:
        raise ValueError("cover degree must be a positive integer")
    m = int(m)
    lifted = [m * (1.0 + b) - 1.0 for b in surface.orders]
    for b, b0 in zip(surface.orders, lifted):
        if b0 > 1e-12:
            raise ValueError(f"no valid cover: order {b} lifts to {b0} > 0 under degree {m}")
    return RadialSurface(surface.profile.scaled(m), surface.n, surface.n_theta * m)


def covering_degree(beta: float) -> int:
    """Largest ``m`` with ``m (1 + beta) <= 1``; the lifted order then lies in ``(-1/2, 0]``
    whenever ``beta <= -1/2``, and the cover is trivial for ``beta > -1/2``."""
    if beta <= -1:
        raise ValueError("order must be > -1")
    return max(1, int(math.floor(1.0 / (1.0 + beta) + 1e-12)))


def pullback(base: RadialSurface, cover: RadialSurface, v) -> np.ndarray:
    """Lift node values from ``base`` to its cover ``cover``."""
    v = _vals(v)
    if cover.n != base.n or cover.n_theta % base.n_theta:
        raise ValueError("surfaces are not base and cover of each other")
    m = cover.n_theta // base.n_theta
    out = np.empty(cover.n_nodes)
    out[0], out[-1] = v[0], v[-1]
    rings = v[1:-1].reshape(base.n - 1, base.n_theta)
    out[1:-1] = np.tile(rings, (1, m)).ravel()
    return out
