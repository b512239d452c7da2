"""Dense symmetric eigensolver, Kronecker products, and definiteness tests.

Every tolerance used by the bound-verification code lives here so reports can
cite a single source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from khopsim.errors import DimensionError, NumericalError

SYMMETRY_RTOL = 1e-12
JACOBI_RTOL = 1e-12
JACOBI_MAX_SWEEPS = 100
ORTHOGONALITY_TOL = 1e-10
PD_TOL = 1e-9
NEG_DEF_TOL = 1e-9
LAPLACIAN_ZERO_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class SymMatrix:
    """Real symmetric matrix, checked on construction."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        a = np.array(self.entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"SymMatrix must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NumericalError("SymMatrix entries must be finite")
        scale = np.maximum(1.0, np.abs(a))
        if np.any(np.abs(a - a.T) > SYMMETRY_RTOL * scale):
            raise DimensionError("SymMatrix entries are not symmetric")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def dim(self) -> int:
        return int(self.entries.shape[0])

    @classmethod
    def symmetric_part(cls, m: np.ndarray) -> SymMatrix:
        """Return ``(m + m^T) / 2``."""
        a = np.asarray(m, dtype=np.float64)
        return cls(0.5 * (a + a.T))


def _as_array(m: np.ndarray | SymMatrix) -> np.ndarray:
    if isinstance(m, SymMatrix):
        return m.entries
    return SymMatrix(m).entries


def sym_eig(m: np.ndarray | SymMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Rotations sweep every off-diagonal pair until the largest off-diagonal
    magnitude drops below ``JACOBI_RTOL`` times the Frobenius norm.

    Returns:
        ``(w, V)`` with eigenvalues ``w`` ascending and orthonormal
        eigenvectors in the columns of ``V``.
    """
    a = np.array(_as_array(m), dtype=np.float64)
    n = a.shape[0]
    if n == 0:
        raise DimensionError("sym_eig requires dim >= 1")
    v = np.eye(n)
    fro = float(np.linalg.norm(a))
    threshold = JACOBI_RTOL * fro

    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.abs(a - np.diag(np.diag(a)))
        if n == 1 or float(off.max()) <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= threshold:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 1.0 / (2.0 * theta)
                else:
                    t = math.copysign(1.0, theta) / (
                        abs(theta) + math.sqrt(theta * theta + 1.0)
                    )
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = 0.0
                a[q, p] = 0.0

                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    else:
        raise NumericalError(
            f"Jacobi iteration did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )

    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def eigvals(m: np.ndarray | SymMatrix) -> np.ndarray:
    """Ascending eigenvalues of a symmetric matrix."""
    return sym_eig(m)[0]


def extreme_eigenvalues(m: np.ndarray | SymMatrix) -> tuple[float, float]:
    """Return ``(lambda_min, lambda_max)``."""
    w = eigvals(m)
    return float(w[0]), float(w[-1])


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product ``a ⊗ b``."""
    return np.kron(np.atleast_2d(a), np.atleast_2d(b))


def spectral_norm(m: np.ndarray | SymMatrix) -> float:
    """Largest singular value."""
    a = m.entries if isinstance(m, SymMatrix) else np.atleast_2d(np.asarray(m))
    if a.size == 0:
        return 0.0
    return float(np.linalg.norm(a, 2))


def is_negative_definite(
    m: np.ndarray | SymMatrix, tol: float = NEG_DEF_TOL
) -> bool:
    """True iff the symmetric part of ``m`` has ``lambda_max < -tol``."""
    sym = m if isinstance(m, SymMatrix) else SymMatrix.symmetric_part(m)
    return bool(extreme_eigenvalues(sym)[1] < -tol)


def algebraic_connectivity(laplacian: np.ndarray) -> float:
    """Smallest Laplacian eigenvalue above ``LAPLACIAN_ZERO_TOL``."""
    w = eigvals(laplacian)
    positive = w[w > LAPLACIAN_ZERO_TOL]
    if positive.size == 0:
        raise NumericalError("Laplacian has no positive eigenvalue")
    return float(positive[0])
