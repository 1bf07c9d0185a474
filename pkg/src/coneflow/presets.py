"""Preset surfaces and seeded initial data."""

from __future__ import annotations

import math

import numpy as np

from .geometry import build_doubled_polygon, build_football, build_pillowcase
from .linear_parabolic import theta_increment


def smooth_perturbation(surface, amplitude: float, seed: int, *, smoothing: int = 3, match_volume: bool = True) -> np.ndarray:
    """Seeded smooth conformal factor with ``sup|u - mean| = amplitude``.

    White noise is smoothed by ``smoothing`` implicit heat steps of length
    ``area / 40``, made area-mean-zero and scaled. With ``match_volume`` a
    constant is added so that ``sum(e^{2u} A)`` equals the background area.
    """
    st = surface.stencil
    A = st.areas
    rng = np.random.default_rng(seed)
    p = rng.standard_normal(surface.n_nodes)
    tau = A.sum() / 40.0
    zero = np.zeros_like(p)
    for _ in range(smoothing):
        d, _ = theta_increment(st, p, np.ones_like(p), zero, zero, tau, 1.0)
        p = p + d
    p -= (p @ A) / A.sum()
    p *= amplitude / np.max(np.abs(p))
    if match_volume:
        p -= 0.5 * math.log((np.exp(2.0 * p) @ A) / A.sum())
    return p


def pillowcase(resolution: int = 20, side: float = 1.0):
    return build_pillowcase(resolution, (side, side))


def hyperbolic_triangle(alpha=(0.25, 0.25, 0.25), resolution: int = 16):
    return build_doubled_polygon("hyperbolic", alpha, resolution)


def football(beta1: float = -0.5, beta2: float = -0.5, n: int = 256, n_theta: int = 1, length: float = math.pi):
    return build_football(beta1, beta2, n, length, n_theta=n_theta)


def linearized_uniformizer(surface) -> np.ndarray:
    """Solution of ``Lap w = K_bg - Kbar`` with ``Kbar = 2 pi chi / area``.

    ``e^{2w} g_bg`` has curvature ``Kbar`` to first order, so it is a cheap
    start close to the constant-curvature metric when ``K_bg`` varies.
    """
    from .poisson import solve_poisson

    A = surface.areas
    kbar = 2.0 * math.pi * surface.euler_number / A.sum()
    rhs = surface.K_bg - kbar
    rhs -= (rhs @ A) / A.sum()
    return solve_poisson(surface, rhs).values
