"""
Vectorization and realification helpers shared by the conic solver and the
beamforming services.

Symmetric matrices are stored as ``svec``: the lower triangle walked column by
column, off-diagonal entries scaled by sqrt(2) so that
``svec(X) @ svec(Y) == trace(X @ Y)``.

Complex vectors are realified as ``[Re x; Im x]`` and Hermitian matrices as
``[[Re H, -Im H], [Im H, Re H]]``, which keeps ``x^H H x == x~^T H~ x~``.
"""
from functools import lru_cache

import numpy as np

from app.core.exceptions import StructuralError

SQRT2 = np.sqrt(2.0)


def svec_dim(n: int) -> int:
    return n * (n + 1) // 2


def side_from_svec_dim(dim: int) -> int:
    n = int(round((np.sqrt(8 * dim + 1) - 1) / 2))
    if svec_dim(n) != dim:
        raise StructuralError(f"{dim} is not a triangular number")
    return n


@lru_cache(maxsize=64)
def _tril_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    cols, rows = np.triu_indices(n)
    return rows, cols


def svec(X: np.ndarray) -> np.ndarray:
    """Pack a symmetric matrix into its scaled lower triangle."""
    n = X.shape[0]
    rows, cols = _tril_indices(n)
    out = X[rows, cols].astype(float)
    out[rows != cols] *= SQRT2
    return out


def smat(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`svec`."""
    n = side_from_svec_dim(x.shape[0])
    rows, cols = _tril_indices(n)
    vals = np.array(x, dtype=float)
    vals[rows != cols] /= SQRT2
    X = np.zeros((n, n))
    X[rows, cols] = vals
    X[cols, rows] = vals
    return X


@lru_cache(maxsize=64)
def svec_basis(n: int) -> np.ndarray:
    """Matrix Q with ``svec(X) == Q @ X.ravel()`` for symmetric X; rows orthonormal."""
    rows, cols = _tril_indices(n)
    Q = np.zeros((svec_dim(n), n * n))
    for p, (i, j) in enumerate(zip(rows, cols)):
        if i == j:
            Q[p, i * n + i] = 1.0
        else:
            Q[p, i * n + j] = 1.0 / SQRT2
            Q[p, j * n + i] = 1.0 / SQRT2
    Q.setflags(write=False)
    return Q


def congruence_matrix(T: np.ndarray) -> np.ndarray:
    """svec-space matrix of the map U -> T U T^T."""
    Q = svec_basis(T.shape[0])
    return Q @ np.kron(T, T) @ Q.T


def realify_hermitian(H: np.ndarray, atol: float = 1e-10) -> np.ndarray:
    """Map a complex Hermitian n x n matrix to its real symmetric 2n x 2n form."""
    H = np.asarray(H)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise StructuralError(f"expected a square matrix, got shape {H.shape}")
    scale = max(1.0, float(np.max(np.abs(H))) if H.size else 1.0)
    if not np.allclose(H, H.conj().T, rtol=0.0, atol=atol * scale):
        raise StructuralError("matrix is not Hermitian")
    re, im = H.real, H.imag
    return np.block([[re, -im], [im, re]])


def realify_vector(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.concatenate([x.real, x.imag]).astype(float)


def realify_row(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients of Re(h v) and Im(h v) in terms of ``[Re v; Im v]``."""
    h = np.asarray(h)
    a, b = h.real, h.imag
    return np.concatenate([a, -b]), np.concatenate([b, a])


def hermitian_from_realified(X: np.ndarray) -> np.ndarray:
    """Recover the complex Hermitian matrix represented by a real 2n x 2n block.

    Any real symmetric X is first projected onto the ``[[A, -B], [B, A]]``
    structure; the projection keeps X positive semidefinite.
    """
    n = X.shape[0] // 2
    X11, X12 = X[:n, :n], X[:n, n:]
    X21, X22 = X[n:, :n], X[n:, n:]
    V = (X11 + X22) / 2.0 + 1j * (X21 - X12) / 2.0
    return (V + V.conj().T) / 2.0
