"""Dense linear algebra for the GP code: jittered Cholesky, triangular
solves, log-determinants.

All arrays are float64. Functions never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
from scipy import linalg as sla

from .errors import DimensionMismatch, FactorizationFailed

DEFAULT_JITTER_LADDER: tuple[float, ...] = (0.0, 1e-8, 1e-6, 1e-4)


def sym(a) -> np.ndarray:
    """Return (A + Aᵀ)/2 as a float64 array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class CholFactor:
    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def cholesky_psd(a, jitter_ladder: Sequence[float] = DEFAULT_JITTER_LADDER) -> CholFactor:
    """Factor ``a + λI`` for the smallest λ on the ladder that succeeds.

    Raises FactorizationFailed when every rung fails, which in practice
    means the kernel hyperparameters are degenerate.
    """
    a = sym(a)
    ladder = list(jitter_ladder)
    if not ladder or ladder[0] != 0.0 or any(b < c for b, c in zip(ladder[1:], ladder)):
        raise ValueError("jitter ladder must start at 0 and be ascending")
    if not np.all(np.isfinite(a)):
        raise FactorizationFailed("matrix has non-finite entries")
    eye = np.eye(a.shape[0])
    for jitter in ladder:
        try:
            lower = np.linalg.cholesky(a + jitter * eye if jitter else a)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(lower) > 0.0):
            return CholFactor(lower, float(jitter))
    raise FactorizationFailed(
        f"Cholesky failed for every jitter in {ladder} (dim {a.shape[0]})"
    )


def tri_solve(
    l: CholFactor | np.ndarray,
    b,
    side: Literal["lower", "lower-transpose"] = "lower",
) -> np.ndarray:
    """Solve ``L x = b`` (side="lower") or ``Lᵀ x = b``."""
    lower = l.lower if isinstance(l, CholFactor) else np.asarray(l, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != lower.shape[0]:
        raise DimensionMismatch(f"factor is {lower.shape}, right-hand side is {b.shape}")
    if side == "lower":
        return sla.solve_triangular(lower, b, lower=True, check_finite=False)
    if side == "lower-transpose":
        return sla.solve_triangular(lower, b, lower=True, trans="T", check_finite=False)
    raise ValueError(f"unknown side {side!r}")


def chol_solve(l: CholFactor, b) -> np.ndarray:
    """Solve ``(L Lᵀ) x = b``."""
    return tri_solve(l, tri_solve(l, b, "lower"), "lower-transpose")


def log_det(l: CholFactor | np.ndarray) -> float:
    lower = l.lower if isinstance(l, CholFactor) else np.asarray(l)
    return float(2.0 * np.sum(np.log(np.diag(lower))))


def cholesky_backward(lower: np.ndarray, grad_lower: np.ndarray) -> np.ndarray:
    """Pull a gradient on L = chol(A) back to a symmetric gradient on A.

    Only the lower triangle of ``grad_lower`` is used. The returned matrix
    is symmetric, so ⟨result, dA⟩ is the first-order change for any
    symmetric perturbation dA.
    """
    phi = np.tril(lower.T @ np.tril(grad_lower))
    phi[np.diag_indices_from(phi)] *= 0.5
    # A_bar = L^{-T} Phi L^{-1}
    tmp = sla.solve_triangular(lower, phi, lower=True, trans="T", check_finite=False)
    abar = sla.solve_triangular(lower, tmp.T, lower=True, trans="T", check_finite=False).T
    return 0.5 * (abar + abar.T)
