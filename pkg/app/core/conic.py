"""
Primal-dual interior-point solver for conic programs in standard form

    minimize    c^T x
    subject to  A x = b,  x in K_1 x ... x K_p

with K_j zero (free variables), nonnegative, second-order or semidefinite.
The method is an infeasible-start path-following scheme with Nesterov-Todd
scaling and a Mehrotra predictor-corrector step. Programs are assembled with
:class:`ConicProgramBuilder`.
"""
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
from loguru import logger
from scipy import linalg as sla
from tenacity import Retrying, retry_if_result, stop_after_attempt

from app.config import settings
from app.core.cones import Cone, make_cone
from app.core.exceptions import NumericalError, StructuralError
from app.core.linalg import svec_dim
from app.schemas.conic import (
    ConeBlock,
    ConeKind,
    ConicProgram,
    ConicSolution,
    ConicStatus,
    Phase1Result,
)


class Affine:
    """Sparse affine expression ``sum_j coef_j x_j + const`` over program variables."""

    __slots__ = ("terms", "const")
    __array_ufunc__ = None

    def __init__(self, terms: Optional[dict[int, float]] = None, const: float = 0.0):
        self.terms = dict(terms) if terms else {}
        self.const = float(const)

    @classmethod
    def constant(cls, value: float) -> "Affine":
        return cls(const=value)

    @classmethod
    def dot(cls, indices: Iterable[int], coeffs: Iterable[float]) -> "Affine":
        out = cls()
        for j, a in zip(indices, coeffs):
            if a != 0.0:
                out.terms[int(j)] = out.terms.get(int(j), 0.0) + float(a)
        return out

    def _combine(self, other: Union["Affine", float], sign: float) -> "Affine":
        out = Affine(self.terms, self.const)
        if isinstance(other, Affine):
            for j, a in other.terms.items():
                out.terms[j] = out.terms.get(j, 0.0) + sign * a
            out.const += sign * other.const
        else:
            out.const += sign * float(other)
        return out

    def __add__(self, other):
        return self._combine(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __rsub__(self, other):
        return (-1.0 * self)._combine(other, 1.0)

    def __mul__(self, scalar: float) -> "Affine":
        scalar = float(scalar)
        return Affine({j: scalar * a for j, a in self.terms.items()}, scalar * self.const)

    __rmul__ = __mul__

    def __neg__(self):
        return -1.0 * self

    def evaluate(self, x: np.ndarray) -> float:
        return float(sum(a * x[j] for j, a in self.terms.items()) + self.const)


@dataclass(frozen=True)
class VarBlock:
    name: str
    start: int
    size: int

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.size)

    def __getitem__(self, i: int) -> Affine:
        if not 0 <= i < self.size:
            raise IndexError(f"{self.name}[{i}] out of range")
        return Affine({self.start + i: 1.0})

    def dot(self, coeffs: np.ndarray) -> Affine:
        return Affine.dot(self.indices, coeffs)


@dataclass
class ConicProgramBuilder:
    """Incrementally assembles a :class:`ConicProgram`."""

    blocks: list[ConeBlock] = field(default_factory=list)
    names: dict[str, tuple[int, int]] = field(default_factory=dict)
    rows: list[tuple[dict[int, float], float]] = field(default_factory=list)
    objective: Affine = field(default_factory=Affine)
    num_vars: int = 0
    _counter: itertools.count = field(default_factory=itertools.count)

    def _add_block(self, name: Optional[str], kind: ConeKind, dim: int, side: Optional[int] = None) -> VarBlock:
        if name is None:
            name = f"_{kind.value}{next(self._counter)}"
        if name in self.names:
            raise StructuralError(f"duplicate variable block '{name}'")
        blk = VarBlock(name, self.num_vars, dim)
        self.blocks.append(ConeBlock(kind=kind, dim=dim, side=side))
        self.names[name] = (blk.start, dim)
        self.num_vars += dim
        return blk

    def add_free(self, name: str, size: int) -> VarBlock:
        return self._add_block(name, ConeKind.ZERO, size)

    def add_nonnegative(self, name: str, size: int) -> VarBlock:
        return self._add_block(name, ConeKind.NONNEGATIVE, size)

    def add_psd(self, name: str, side: int) -> VarBlock:
        if side > settings.CONIC_MAX_PSD_SIDE:
            raise StructuralError(f"PSD side {side} exceeds limit {settings.CONIC_MAX_PSD_SIDE}")
        return self._add_block(name, ConeKind.PSD, svec_dim(side), side)

    def add_equality(self, expr: Affine, rhs: float = 0.0) -> None:
        """Constrain ``expr == rhs``."""
        self.rows.append((dict(expr.terms), float(rhs) - expr.const))

    def add_nonneg(self, exprs: list[Affine], name: Optional[str] = None) -> VarBlock:
        """Constrain every expression to be nonnegative through a slack block."""
        slack = self._add_block(name, ConeKind.NONNEGATIVE, len(exprs))
        for i, expr in enumerate(exprs):
            self.add_equality(expr - slack[i])
        return slack

    def add_soc(self, exprs: list[Affine], name: Optional[str] = None) -> VarBlock:
        """Constrain ``exprs[0] >= ||exprs[1:]||`` through a second-order block."""
        cone = self._add_block(name, ConeKind.SECOND_ORDER, len(exprs))
        for i, expr in enumerate(exprs):
            self.add_equality(expr - cone[i])
        return cone

    def add_rotated_soc(self, x: list[Affine], y: Affine, z: Affine, name: Optional[str] = None) -> VarBlock:
        """Constrain ``||x||^2 <= y z`` with y, z >= 0."""
        return self.add_soc([y + z, *[2.0 * xi for xi in x], y - z], name=name)

    def minimize(self, expr: Affine) -> None:
        self.objective = expr

    def build(self) -> ConicProgram:
        n, m = self.num_vars, len(self.rows)
        A = np.zeros((m, n))
        b = np.zeros(m)
        for r, (terms, rhs) in enumerate(self.rows):
            for j, a in terms.items():
                A[r, j] += a
            b[r] = rhs
        c = np.zeros(n)
        for j, a in self.objective.terms.items():
            c[j] += a
        return ConicProgram(c=c, A=A, b=b, cones=list(self.blocks), names=dict(self.names))


def validate_program(program: ConicProgram) -> None:
    n = program.num_vars
    if program.A.ndim != 2 or program.A.shape != (program.num_rows, n):
        raise StructuralError(
            f"A has shape {program.A.shape}, expected ({program.num_rows}, {n})"
        )
    total = sum(blk.dim for blk in program.cones)
    if total != n:
        raise StructuralError(f"cone dimensions sum to {total}, program has {n} variables")
    for blk in program.cones:
        if blk.kind == ConeKind.PSD:
            side = make_cone(blk).side
            if side > settings.CONIC_MAX_PSD_SIDE:
                raise StructuralError(f"PSD side {side} exceeds limit {settings.CONIC_MAX_PSD_SIDE}")
    for name, arr in (("c", program.c), ("A", program.A), ("b", program.b)):
        if not np.all(np.isfinite(arr)):
            raise StructuralError(f"{name} contains non-finite entries")


def equilibrate(program: ConicProgram) -> tuple[ConicProgram, np.ndarray]:
    """Scale each equality row to unit max-norm; returns the program and the row scales."""
    norms = np.max(np.abs(program.A), axis=1) if program.num_rows else np.zeros(0)
    scale = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 1.0)
    scaled = program.model_copy(update={"A": program.A * scale[:, None], "b": program.b * scale})
    return scaled, scale


class InteriorPointSolver:
    """One solve; owns its workspace."""

    def __init__(self, program: ConicProgram, tol: float, max_iter: int, regularization: float):
        self.tol = tol
        self.max_iter = max_iter
        self.reg = regularization
        self.step_fraction = settings.CONIC_STEP_FRACTION
        self.refinement = settings.CONIC_REFINEMENT_STEPS

        scaled, self.row_scale = equilibrate(program)
        self.A = scaled.A
        self.b = scaled.b
        self.obj_scale = max(1.0, float(np.max(np.abs(program.c)))) if program.num_vars else 1.0
        self.c = program.c / self.obj_scale
        self.m, self.n = self.A.shape

        self.cones: list[Cone] = [make_cone(blk) for blk in program.cones]
        self.slices: list[slice] = []
        start = 0
        for cone in self.cones:
            self.slices.append(slice(start, start + cone.dim))
            start += cone.dim
        self.conic = [(cone, sl) for cone, sl in zip(self.cones, self.slices) if not cone.is_free and cone.dim > 0]
        self.degree = sum(cone.degree for cone, _ in self.conic)

    def _identity(self) -> np.ndarray:
        e = np.zeros(self.n)
        for cone, sl in self.conic:
            e[sl] = cone.identity()
        return e

    def _max_step(self, x: np.ndarray, d: np.ndarray) -> float:
        alpha = np.inf
        for cone, sl in self.conic:
            alpha = min(alpha, cone.max_step(x[sl], d[sl]))
        return alpha

    def _measures(self, x, y, s):
        rp = self.b - self.A @ x
        rd = self.c - self.A.T @ y - s
        pobj = float(self.c @ x)
        dobj = float(self.b @ y)
        pres = float(np.linalg.norm(rp)) / (1.0 + float(np.linalg.norm(self.b)))
        dres = float(np.linalg.norm(rd)) / (1.0 + float(np.linalg.norm(self.c)))
        compl = abs(float(x @ s))
        gap = max(compl, abs(pobj - dobj)) / max(1.0, abs(pobj))
        return rp, rd, pobj, dobj, pres, dres, gap

    def _factor(self, H: np.ndarray):
        K = np.zeros((self.n + self.m, self.n + self.m))
        K[: self.n, : self.n] = -H
        K[: self.n, self.n:] = self.A.T
        K[self.n:, : self.n] = self.A
        Kreg = K.copy()
        Kreg[np.diag_indices(self.n)] -= self.reg
        Kreg[self.n + np.arange(self.m), self.n + np.arange(self.m)] += self.reg
        try:
            lu = sla.lu_factor(Kreg, check_finite=True)
        except (ValueError, np.linalg.LinAlgError) as e:
            raise NumericalError(f"KKT factorization failed: {e}") from e
        if np.any(np.diag(lu[0]) == 0):
            raise NumericalError("singular KKT matrix")
        return K, lu

    def _solve_kkt(self, K, lu, rhs: np.ndarray) -> np.ndarray:
        sol = sla.lu_solve(lu, rhs)
        for _ in range(self.refinement):
            sol = sol + sla.lu_solve(lu, rhs - K @ sol)
        if not np.all(np.isfinite(sol)):
            raise NumericalError("non-finite search direction")
        return sol

    def _direction(self, K, lu, scalings, H, rp, rd, rc):
        wt_rc = np.zeros(self.n)
        for (cone, sl), sc in zip(self.conic, scalings):
            wt_rc[sl] = sc.apply_transpose(rc[sl])
        sol = self._solve_kkt(K, lu, np.concatenate([rd - wt_rc, rp]))
        dx, dy = sol[: self.n], sol[self.n:]
        ds = wt_rc - H @ dx
        return dx, dy, ds

    def _result(self, status, x, y, s, measures, iterations) -> ConicSolution:
        _, _, pobj, dobj, pres, dres, gap = measures
        return ConicSolution(
            status=status,
            x=x.copy(),
            y=self.obj_scale * self.row_scale * y,
            s=self.obj_scale * s,
            primal_objective=self.obj_scale * pobj,
            dual_objective=self.obj_scale * dobj,
            primal_residual=pres,
            dual_residual=dres,
            gap=gap,
            iterations=iterations,
        )

    def run(self) -> ConicSolution:
        e = self._identity()
        x, s, y = e.copy(), e.copy(), np.zeros(self.m)
        best = None
        best_score = np.inf
        stalls = 0

        for it in range(self.max_iter + 1):
            measures = self._measures(x, y, s)
            rp, rd, pobj, dobj, pres, dres, gap = measures
            score = max(pres, dres, gap)
            if score < best_score:
                best_score = score
                best = (x.copy(), y.copy(), s.copy(), measures, it)
            if score <= self.tol:
                return self._result(ConicStatus.OPTIMAL, x, y, s, measures, it)

            # infeasibility certificates from the current iterate
            by = float(self.b @ y)
            if by > 0 and np.linalg.norm(self.A.T @ y + s) <= self.tol * by:
                return self._result(ConicStatus.PRIMAL_INFEASIBLE, x, y, s, measures, it)
            cx = pobj
            if cx < 0 and np.linalg.norm(self.A @ x) <= self.tol * (-cx):
                return self._result(ConicStatus.DUAL_INFEASIBLE, x, y, s, measures, it)
            if it == self.max_iter or stalls >= 3:
                break

            try:
                scalings = [cone.scaling(x[sl], s[sl]) for cone, sl in self.conic]
                H = np.zeros((self.n, self.n))
                lam = np.zeros(self.n)
                for (cone, sl), sc in zip(self.conic, scalings):
                    H[sl, sl] = sc.hessian()
                    lam[sl] = sc.lam
                mu = float(lam @ lam) / self.degree if self.degree else 0.0
                K, lu = self._factor(H)

                # predictor
                rc_aff = -lam
                dx_a, dy_a, ds_a = self._direction(K, lu, scalings, H, rp, rd, rc_aff)
                alpha_a = min(1.0, self._max_step(x, dx_a), self._max_step(s, ds_a))
                if self.degree:
                    mu_aff = float((x + alpha_a * dx_a) @ (s + alpha_a * ds_a)) / self.degree
                    sigma = float(np.clip((max(mu_aff, 0.0) / mu) ** 3, 0.0, 1.0)) if mu > 0 else 0.0
                else:
                    sigma = 0.0

                # corrector
                rc = np.zeros(self.n)
                for (cone, sl), sc in zip(self.conic, scalings):
                    w_dx = sc.apply(dx_a[sl])
                    winv_ds = rc_aff[sl] - w_dx
                    r = (
                        sigma * mu * cone.identity()
                        - cone.jordan(sc.lam, sc.lam)
                        - cone.jordan(w_dx, winv_ds)
                    )
                    rc[sl] = cone.inverse_product(sc.lam, r)
                dx, dy, ds = self._direction(K, lu, scalings, H, rp, rd, rc)
                alpha = min(
                    1.0,
                    self.step_fraction * self._max_step(x, dx),
                    self.step_fraction * self._max_step(s, ds),
                )
            except NumericalError as e:
                logger.debug(f"Interior-point breakdown at iteration {it}: {str(e)}")
                bx, byv, bs, bm, bit = best
                return self._result(ConicStatus.NUMERICAL_ERROR, bx, byv, bs, bm, bit)

            stalls = stalls + 1 if alpha < 1e-10 else 0
            x = x + alpha * dx
            y = y + alpha * dy
            s = s + alpha * ds

        bx, byv, bs, bm, bit = best
        return self._result(ConicStatus.ITERATION_LIMIT, bx, byv, bs, bm, bit)


def solve(
    program: ConicProgram,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    regularization: Optional[float] = None,
) -> ConicSolution:
    """
    Solve a conic program. Malformed programs raise :class:`StructuralError`;
    numerical trouble is reported through the returned status.
    """
    validate_program(program)
    solver = InteriorPointSolver(
        program,
        tol=settings.CONIC_TOL if tol is None else tol,
        max_iter=settings.CONIC_MAX_ITER if max_iter is None else max_iter,
        regularization=settings.CONIC_REGULARIZATION if regularization is None else regularization,
    )
    return solver.run()


def solve_with_retry(
    program: ConicProgram,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> ConicSolution:
    """Solve, retrying with tenfold regularization whenever the status is NumericalError."""
    attempts = itertools.count()

    def _attempt() -> ConicSolution:
        n = next(attempts)
        if n:
            logger.warning(f"Retrying conic solve (attempt {n + 1}) after numerical breakdown")
        return solve(program, tol=tol, max_iter=max_iter, regularization=settings.CONIC_REGULARIZATION * 10.0 ** n)

    retryer = Retrying(
        stop=stop_after_attempt(settings.CONIC_RETRY_ATTEMPTS),
        retry=retry_if_result(lambda sol: sol.status == ConicStatus.NUMERICAL_ERROR),
        retry_error_callback=lambda state: state.outcome.result(),
    )
    return retryer(_attempt)


def phase1_feasibility(
    program: ConicProgram, feas_tol: Optional[float] = None, margin_cap: float = 0.0
) -> Phase1Result:
    """
    Decide feasibility of ``A x = b, x in K`` by minimizing one shift t that
    moves every conic block by t times its identity element:
    ``A (x' - t e) = b`` with ``x' in K`` and ``t >= -margin_cap``.

    With ``margin_cap = 0`` the shift is a nonnegative slack. A positive cap
    lets t go negative, and ``margin = -t`` then measures how deep inside the
    cone the returned point sits.
    """
    feas_tol = settings.FEAS_TOL if feas_tol is None else feas_tol
    if margin_cap < 0:
        raise StructuralError(f"margin_cap must be nonnegative, got {margin_cap}")
    if np.any(program.c != 0):
        raise StructuralError("phase-one feasibility expects a program without objective")
    validate_program(program)
    scaled, _ = equilibrate(program)

    e = np.zeros(program.num_vars)
    start = 0
    for blk in program.cones:
        cone = make_cone(blk)
        if not cone.is_free:
            e[start:start + blk.dim] = cone.identity()
        start += blk.dim

    # u = t + margin_cap >= 0
    Ae = scaled.A @ e
    A1 = np.hstack([scaled.A, -Ae[:, None]])
    c1 = np.zeros(program.num_vars + 1)
    c1[-1] = 1.0
    relaxed = ConicProgram(
        c=c1,
        A=A1,
        b=scaled.b - margin_cap * Ae,
        cones=[*program.cones, ConeBlock(kind=ConeKind.NONNEGATIVE, dim=1)],
        names={**program.names, "_phase1_shift": (program.num_vars, 1)},
    )
    solution = solve_with_retry(relaxed)
    if not solution.usable(settings.CONIC_ACCEPT_TOL):
        logger.warning(f"Phase-one solve ended with status {solution.status.value}")
        return Phase1Result(feasible=False, slack=float("nan"), status=solution.status)

    t = float(solution.x[-1]) - margin_cap
    x = solution.x[:-1] - t * e
    return Phase1Result(
        feasible=t <= feas_tol, slack=max(0.0, t), margin=max(0.0, -t), status=solution.status, x=x
    )


def dump_program(program: ConicProgram, path: Union[str, Path]) -> None:
    """Write a program in the plain-text debug format (exact float repr)."""
    lines = [f"objective {program.num_vars}", " ".join(repr(float(v)) for v in program.c)]
    rows, cols = np.nonzero(program.A)
    lines.append(f"triplets {program.num_rows} {program.num_vars} {rows.size}")
    lines += [f"{i} {j} {float(program.A[i, j])!r}" for i, j in zip(rows, cols)]
    lines.append(f"rhs {program.num_rows}")
    lines.append(" ".join(repr(float(v)) for v in program.b))
    lines.append(f"cones {len(program.cones)}")
    for blk in program.cones:
        lines.append(f"{blk.kind.value} {blk.side if blk.kind == ConeKind.PSD else blk.dim}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_program(path: Union[str, Path]) -> ConicProgram:
    """Read back a program written by :func:`dump_program`."""
    lines = Path(path).read_text().splitlines()
    n = int(lines[0].split()[1])
    c = np.array([float(v) for v in lines[1].split()]) if n else np.zeros(0)
    _, m, n_chk, nnz = lines[2].split()
    m, nnz = int(m), int(nnz)
    A = np.zeros((m, int(n_chk)))
    for line in lines[3:3 + nnz]:
        i, j, v = line.split()
        A[int(i), int(j)] = float(v)
    pos = 3 + nnz
    b = np.array([float(v) for v in lines[pos + 1].split()]) if m else np.zeros(0)
    count = int(lines[pos + 2].split()[1])
    cones = []
    for line in lines[pos + 3:pos + 3 + count]:
        kind, size = line.split()
        kind = ConeKind(kind)
        size = int(size)
        if kind == ConeKind.PSD:
            cones.append(ConeBlock(kind=kind, dim=svec_dim(size), side=size))
        else:
            cones.append(ConeBlock(kind=kind, dim=size))
    return ConicProgram(c=c, A=A, b=b, cones=cones)
