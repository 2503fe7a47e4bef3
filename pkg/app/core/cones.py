"""
Cone algebra used by the interior-point solver.

Each cone supplies its Jordan product, the inverse product ``lambda \\ u``,
the identity element, the largest step keeping a point in the cone, and the
Nesterov-Todd scaling ``W`` with ``W x == W^{-T} s == lambda``.
"""
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from app.core.exceptions import NumericalError, StructuralError
from app.core.linalg import congruence_matrix, side_from_svec_dim, smat, svec, svec_dim
from app.schemas.conic import ConeBlock, ConeKind


@dataclass
class Scaling:
    """Nesterov-Todd scaling of one cone block at a primal-dual pair."""

    W: np.ndarray
    lam: np.ndarray

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.W @ u

    def apply_transpose(self, u: np.ndarray) -> np.ndarray:
        return self.W.T @ u

    def hessian(self) -> np.ndarray:
        return self.W.T @ self.W


class Cone:
    kind: ConeKind
    dim: int
    degree: int

    @property
    def is_free(self) -> bool:
        return False

    def identity(self) -> np.ndarray:
        raise NotImplementedError

    def jordan(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def inverse_product(self, lam: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def scaling(self, x: np.ndarray, s: np.ndarray) -> Scaling:
        raise NotImplementedError

    def max_step(self, x: np.ndarray, d: np.ndarray) -> float:
        raise NotImplementedError


class ZeroCone(Cone):
    """Free primal variables; their dual slack is pinned at zero."""

    kind = ConeKind.ZERO

    def __init__(self, dim: int):
        self.dim = dim
        self.degree = 0

    @property
    def is_free(self) -> bool:
        return True

    def identity(self) -> np.ndarray:
        return np.zeros(self.dim)

    def max_step(self, x: np.ndarray, d: np.ndarray) -> float:
        return np.inf


class NonNegativeCone(Cone):
    kind = ConeKind.NONNEGATIVE

    def __init__(self, dim: int):
        self.dim = dim
        self.degree = dim

    def identity(self) -> np.ndarray:
        return np.ones(self.dim)

    def jordan(self, u, v):
        return u * v

    def inverse_product(self, lam, u):
        return u / lam

    def scaling(self, x, s):
        if np.any(x <= 0) or np.any(s <= 0):
            raise NumericalError("nonnegative iterate left the cone interior")
        return Scaling(W=np.diag(np.sqrt(s / x)), lam=np.sqrt(x * s))

    def max_step(self, x, d):
        neg = d < 0
        if not np.any(neg):
            return np.inf
        return float(np.min(-x[neg] / d[neg]))


class SecondOrderCone(Cone):
    """{(t, z): t >= ||z||}."""

    kind = ConeKind.SECOND_ORDER

    def __init__(self, dim: int):
        if dim < 1:
            raise StructuralError("second-order cone needs dimension >= 1")
        self.dim = dim
        self.degree = 1

    @staticmethod
    def _jnorm_sq(u: np.ndarray) -> float:
        return float(u[0] * u[0] - u[1:] @ u[1:])

    def identity(self):
        e = np.zeros(self.dim)
        e[0] = 1.0
        return e

    def jordan(self, u, v):
        out = np.empty(self.dim)
        out[0] = u @ v
        out[1:] = u[0] * v[1:] + v[0] * u[1:]
        return out

    def inverse_product(self, lam, u):
        det = self._jnorm_sq(lam)
        z = np.empty(self.dim)
        z[0] = (lam[0] * u[0] - lam[1:] @ u[1:]) / det
        z[1:] = (u[1:] - z[0] * lam[1:]) / lam[0]
        return z

    def scaling(self, x, s):
        jx, js = self._jnorm_sq(x), self._jnorm_sq(s)
        if jx <= 0 or js <= 0 or x[0] <= 0 or s[0] <= 0:
            raise NumericalError("second-order iterate left the cone interior")
        xb = x / np.sqrt(jx)
        sb = s / np.sqrt(js)
        gamma = np.sqrt((1.0 + xb @ sb) / 2.0)
        Jxb = xb.copy()
        Jxb[1:] *= -1.0
        wb = (sb + Jxb) / (2.0 * gamma)
        v = wb.copy()
        v[0] += 1.0
        v /= np.sqrt(2.0 * (wb[0] + 1.0))
        beta = (js / jx) ** 0.25
        J = -np.eye(self.dim)
        J[0, 0] = 1.0
        W = beta * (2.0 * np.outer(v, v) - J)
        return Scaling(W=W, lam=W @ x)

    def max_step(self, x, d):
        # smallest positive root of J(x + a d) = 0
        a = self._jnorm_sq(d)
        b = float(x[0] * d[0] - x[1:] @ d[1:])
        c = self._jnorm_sq(x)
        scale = max(abs(a), abs(b), abs(c), 1e-300)
        if abs(a) <= 1e-14 * scale:
            return -c / (2.0 * b) if b < 0 else np.inf
        disc = b * b - a * c
        if disc < 0:
            return np.inf
        q = -(b + np.copysign(np.sqrt(disc), b))
        roots = [r for r in (q / a, c / q if q != 0 else np.inf) if r > 0]
        return float(min(roots)) if roots else np.inf


class PsdCone(Cone):
    """Symmetric positive semidefinite matrices of a given side, stored as svec."""

    kind = ConeKind.PSD

    def __init__(self, side: int):
        self.side = side
        self.dim = svec_dim(side)
        self.degree = side

    def identity(self):
        return svec(np.eye(self.side))

    def jordan(self, u, v):
        U, V = smat(u), smat(v)
        return svec((U @ V + V @ U) / 2.0)

    def inverse_product(self, lam, u):
        d = np.diag(smat(lam))
        U = smat(u)
        return svec(2.0 * U / (d[:, None] + d[None, :]))

    def scaling(self, x, s):
        try:
            L1 = sla.cholesky(smat(x), lower=True)
            L2 = sla.cholesky(smat(s), lower=True)
        except np.linalg.LinAlgError as e:
            raise NumericalError(f"semidefinite iterate left the cone interior: {e}") from e
        _, lamd, Vt = sla.svd(L2.T @ L1)
        if np.any(lamd <= 0):
            raise NumericalError("degenerate semidefinite scaling")
        # R = L1 V diag(lamd)^(-1/2) satisfies R^T S R = R^-1 X R^-T = diag(lamd)
        L1inv = sla.solve_triangular(L1, np.eye(self.side), lower=True)
        Rinv = (np.sqrt(lamd)[:, None] * Vt) @ L1inv
        W = congruence_matrix(Rinv)
        if not np.all(np.isfinite(W)):
            raise NumericalError("non-finite semidefinite scaling")
        return Scaling(W=W, lam=svec(np.diag(lamd)))

    def max_step(self, x, d):
        try:
            L = sla.cholesky(smat(x), lower=True)
        except np.linalg.LinAlgError as e:
            raise NumericalError(f"semidefinite iterate left the cone interior: {e}") from e
        Linv = sla.solve_triangular(L, np.eye(self.side), lower=True)
        M = Linv @ smat(d) @ Linv.T
        lmin = float(sla.eigvalsh((M + M.T) / 2.0)[0])
        return -1.0 / lmin if lmin < 0 else np.inf


def make_cone(block: ConeBlock) -> Cone:
    if block.kind == ConeKind.ZERO:
        return ZeroCone(block.dim)
    if block.kind == ConeKind.NONNEGATIVE:
        return NonNegativeCone(block.dim)
    if block.kind == ConeKind.SECOND_ORDER:
        return SecondOrderCone(block.dim)
    if block.kind == ConeKind.PSD:
        return PsdCone(side_from_svec_dim(block.dim))
    raise StructuralError(f"unknown cone kind {block.kind}")
