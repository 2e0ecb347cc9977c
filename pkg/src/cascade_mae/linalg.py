from __future__ import annotations

import numpy as np
from scipy import linalg


class SingularSystemError(np.linalg.LinAlgError):
    pass


def linear_solve_ridge(A: np.ndarray, B: np.ndarray, lam: float = 0.0) -> np.ndarray:
    """Minimiser of ``0.5*||B - W A||_F^2 + 0.5*lam*||W||_F^2``.

    Solves ``W (A A^T + lam I) = B A^T`` by Cholesky. ``A`` and ``B`` hold
    samples as columns and must agree on the column count.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"column mismatch: A {A.shape}, B {B.shape}")
    if lam < 0 or not np.isfinite(lam):
        raise ValueError(f"lambda must be finite and >= 0, got {lam}")
    G = A @ A.T
    if lam:
        G[np.diag_indices_from(G)] += lam
    try:
        factor = linalg.cho_factor(G, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            f"A A^T + {lam} I is not positive definite; pass lambda > 0"
        ) from exc
    if lam == 0:
        # cho_factor accepts near-singular Gram matrices (round-off pivots);
        # reject anything with condition number beyond ~1e12.
        diag = np.abs(np.diag(factor[0]))
        if diag.min() <= 1e-6 * diag.max():
            raise SingularSystemError("A A^T is rank deficient; pass lambda > 0")
    # W G = B A^T  <=>  G W^T = A B^T (G symmetric)
    return linalg.cho_solve(factor, A @ B.T).T


def default_ridge(A: np.ndarray) -> float:
    """1e-8 * trace(A A^T) / d."""
    A = np.asarray(A, dtype=np.float64)
    return 1e-8 * float(np.einsum("ij,ij->", A, A)) / A.shape[0]
