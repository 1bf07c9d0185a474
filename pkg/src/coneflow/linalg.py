"""Jacobi-preconditioned conjugate gradients with optional null-space deflation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class ConvergenceError(RuntimeError):
    """CG did not reach the requested residual."""

    def __init__(self, message: str, iterations: int, residual: float, diagnostics: dict):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class SolveInfo:
    iterations: int
    residual: float


def pcg(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    diag: np.ndarray,
    *,
    rtol: float = 1e-10,
    maxiter: int | None = None,
    null_vector: np.ndarray | None = None,
) -> tuple[np.ndarray, SolveInfo]:
    """Solve ``A x = b`` for symmetric positive (semi)definite ``A``.

    The system is symmetrically rescaled by ``diag**-1/2`` and plain CG runs on
    the scaled operator. When ``null_vector`` spans the kernel of a singular
    ``A``, residuals are projected against it every iteration; ``b`` must then
    be consistent (orthogonal to the kernel).

    Convergence is declared when the scaled residual drops below
    ``rtol * ||scaled b||``.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    if maxiter is None:
        maxiter = 10 * n
    if np.any(diag <= 0.0):
        raise ValueError("preconditioner diagonal must be positive")
    s = 1.0 / np.sqrt(diag)

    z = None
    if null_vector is not None:
        z = np.asarray(null_vector, dtype=float) / s
        z = z / np.linalg.norm(z)

    def project(v: np.ndarray) -> np.ndarray:
        if z is None:
            return v
        return v - (z @ v) * z

    bh = project(s * b)
    bnorm = np.linalg.norm(bh)
    y = np.zeros(n)
    if bnorm == 0.0:
        return y, SolveInfo(0, 0.0)

    r = bh.copy()
    p = r.copy()
    rr = r @ r
    target = (rtol * bnorm) ** 2
    it = 0
    while rr > target:
        if it >= maxiter:
            rel = float(np.sqrt(rr) / bnorm)
            raise ConvergenceError(
                f"CG did not converge in {maxiter} iterations (relative residual {rel:.3e})",
                iterations=it,
                residual=rel,
                diagnostics={
                    "n": n,
                    "diag_ratio": float(diag.max() / diag.min()),
                    "rtol": rtol,
                },
            )
        q = s * matvec(s * p)
        pq = p @ q
        if pq <= 0.0:
            rel = float(np.sqrt(rr) / bnorm)
            raise ConvergenceError(
                "CG breakdown: operator not positive definite on the search space",
                iterations=it,
                residual=rel,
                diagnostics={"n": n, "curvature": float(pq)},
            )
        alpha = rr / pq
        y += alpha * p
        r -= alpha * q
        r = project(r)
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    return s * y, SolveInfo(it, float(np.sqrt(rr) / bnorm))
