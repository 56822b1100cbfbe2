"""Solvers for the three-field block system.

Every path eliminates nothing it cannot check: the returned triple carries the
relative residual of the full block system recomputed by an independent
block matrix-vector product.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, gmres, onenormest, splu

log = logging.getLogger(__name__)

PIVOT_TOLERANCE = 1e-13
DIRECT_CAP = 20000
GMRES_TOL = 1e-8
GMRES_MAXIT = 2000
GMRES_RESTART = 50
PRECONDITIONERS = ("none", "block-diagonal")


class SolverError(RuntimeError):
    pass


class SingularSystemError(SolverError):
    def __init__(self, message, condition_estimate=np.inf):
        super().__init__(f"{message} (condition estimate {condition_estimate:.3e})")
        self.condition_estimate = condition_estimate


class CapacityError(SolverError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, message, residual, iterations):
        super().__init__(f"{message}: residual {residual:.3e} after {iterations} iterations")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SolverStats:
    method: str
    residual: float
    iterations: int = 0
    factorizations: int = 0
    condition_estimate: float = float("nan")
    seconds: float = 0.0


@dataclass(frozen=True, eq=False)
class SolutionTriple:
    u: np.ndarray
    m: np.ndarray
    uext: np.ndarray
    stats: SolverStats

    @property
    def vector(self):
        return np.concatenate([self.u, self.m, self.uext])


def relative_residual(system, u, m, uext):
    """||K x - b|| / ||b||, or the absolute residual when b = 0."""
    residual = np.linalg.norm(system.matvec(u, m, uext) - system.rhs)
    scale = np.linalg.norm(system.rhs)
    return float(residual / scale) if scale > 0 else float(residual)


def _check_pivots(upper, label, condition):
    """Reject pivots below PIVOT_TOLERANCE times the largest entry of their row of U."""
    if sp.issparse(upper):
        upper = upper.tocsr()
        diag = np.abs(upper.diagonal())
        rows = np.asarray(abs(upper).max(axis=1).todense()).ravel()
    else:
        diag = np.abs(np.diag(upper))
        rows = np.abs(np.triu(upper)).max(axis=1)
    bad = diag <= PIVOT_TOLERANCE * rows
    if np.any(bad):
        raise SingularSystemError(f"{label} is singular at pivot {int(np.argmax(bad))}", condition())


class _SparseFactor:
    """splu with singularity detection and a one-norm condition estimate."""

    def __init__(self, matrix, label):
        self.matrix = sp.csc_matrix(matrix, dtype=complex)
        self.label = label
        try:
            self.lu = splu(self.matrix)
        except RuntimeError as exc:
            raise SingularSystemError(f"{label}: {exc}") from exc
        _check_pivots(self.lu.U, label, self.condition)

    def solve(self, rhs):
        return self.lu.solve(np.asarray(rhs, dtype=complex))

    def condition(self):
        n = self.matrix.shape[0]
        inverse = LinearOperator((n, n), matvec=self.lu.solve,
                                 rmatvec=lambda x: self.lu.solve(x, trans="H"), dtype=complex)
        try:
            with np.errstate(all="ignore"):
                estimate = onenormest(self.matrix) * onenormest(inverse)
        except (ValueError, RuntimeError):
            return np.inf
        return float(estimate) if np.isfinite(estimate) else np.inf


class _DenseFactor:
    def __init__(self, matrix, label):
        self.matrix = np.asarray(matrix, dtype=complex)
        self.label = label
        with np.errstate(all="ignore"):
            self.lu_piv = scipy.linalg.lu_factor(self.matrix, check_finite=False)
        _check_pivots(self.lu_piv[0], label, self.condition)

    def solve(self, rhs, trans=0):
        return scipy.linalg.lu_solve(self.lu_piv, rhs, trans=trans, check_finite=False)

    def condition(self):
        n = self.matrix.shape[0]
        inverse = LinearOperator((n, n), matvec=self.solve, rmatvec=lambda x: self.solve(x, trans=2), dtype=complex)
        try:
            with np.errstate(all="ignore"):
                estimate = np.linalg.norm(self.matrix, 1) * onenormest(inverse)
        except (ValueError, np.linalg.LinAlgError):
            return np.inf
        return float(estimate) if np.isfinite(estimate) else np.inf


@dataclass(frozen=True, eq=False)
class ReducedSystem:
    """Boundary system after eliminating u, rows ordered (lambda, z), columns (m, uext).

        [ B5 - B4 A^-1 B1   B6 ] [m   ]   [r3 - B4 A^-1 f]
        [ B2                B3 ] [uext] = [r2            ]
    """

    matrix: np.ndarray
    rhs: np.ndarray
    interior: _SparseFactor
    coupling: np.ndarray
    interior_rhs: np.ndarray
    nw: int

    def back_substitute(self, boundary):
        m, uext = boundary[:self.nw], boundary[self.nw:]
        return self.interior_rhs - self.coupling @ m, m, uext


def reduce_system(system):
    interior = _SparseFactor(system.A, "interior FEM block")
    coupling = interior.solve(system.B1.toarray())
    interior_rhs = interior.solve(system.f)
    schur = system.B5 - system.B4 @ coupling
    matrix = np.block([[schur, system.B6], [system.B2, system.B3]])
    rhs = np.concatenate([system.r3 - system.B4 @ interior_rhs, system.r2])
    return ReducedSystem(np.asarray(matrix), rhs, interior, coupling, interior_rhs, system.dims[1])


def _finish(system, method, u, m, uext, started, **stats):
    residual = relative_residual(system, u, m, uext)
    log.info("%s solve: residual %.3e in %.2fs", method, residual, time.time() - started)
    return SolutionTriple(u, m, uext, SolverStats(method, residual, seconds=time.time() - started, **stats))


def schur_solve(system):
    """Eliminate u with a sparse LU of A, solve the boundary system by dense LU, back-substitute."""
    started = time.time()
    reduced = reduce_system(system)
    factor = _DenseFactor(reduced.matrix, "reduced boundary system")
    u, m, uext = reduced.back_substitute(factor.solve(reduced.rhs))
    return _finish(system, "schur", u, m, uext, started, factorizations=2, condition_estimate=factor.condition())


def direct_solve(system, cap=DIRECT_CAP):
    """Monolithic dense LU of the full block matrix."""
    started = time.time()
    nv, nw, nz = system.dims
    total = nv + nw + nz
    if total > cap:
        raise CapacityError(f"direct solve of {total} unknowns exceeds the cap of {cap}")
    factor = _DenseFactor(system.full_matrix(), "full block system")
    x = factor.solve(system.rhs)
    return _finish(system, "direct", x[:nv], x[nv:nv + nw], x[nv + nw:], started,
                   factorizations=1, condition_estimate=factor.condition())


class IterationCounter:
    """GMRES callback counting inner iterations."""

    def __init__(self):
        self.niter = 0
        self.last = np.nan

    def __call__(self, rk=None):
        self.niter += 1
        self.last = rk
        if self.niter % 100 == 0:
            log.debug("gmres iteration %d: preconditioned residual %s", self.niter, rk)


def block_diagonal_preconditioner(reduced):
    """Inverse of diag(B5 - B4 A^-1 B1, B3) on the reduced system."""
    nw = reduced.nw
    first = _DenseFactor(reduced.matrix[:nw, :nw], "mortar Schur block")
    second = _DenseFactor(reduced.matrix[nw:, nw:], "exterior block")

    def apply_prec(x):
        return np.concatenate([first.solve(x[:nw]), second.solve(x[nw:])])

    n = reduced.matrix.shape[0]
    return LinearOperator((n, n), apply_prec, dtype=np.dtype("complex128"))


def gmres_solve(system, tol=GMRES_TOL, maxit=GMRES_MAXIT, preconditioner="none", restart=GMRES_RESTART):
    """Restarted GMRES on the reduced boundary system; ``maxit`` bounds total inner iterations."""
    if preconditioner not in PRECONDITIONERS:
        raise SolverError(f"unknown preconditioner '{preconditioner}'")
    started = time.time()
    reduced = reduce_system(system)
    n = reduced.matrix.shape[0]
    restart = max(1, min(restart, maxit, n))
    precond = block_diagonal_preconditioner(reduced) if preconditioner == "block-diagonal" else None
    counter = IterationCounter()
    boundary, info = gmres(reduced.matrix, reduced.rhs, rtol=tol, atol=0.0, restart=restart,
                           maxiter=max(1, maxit // restart), M=precond, callback=counter,
                           callback_type="pr_norm")
    scale = np.linalg.norm(reduced.rhs)
    reduced_residual = np.linalg.norm(reduced.matrix @ boundary - reduced.rhs) / (scale if scale > 0 else 1.0)
    if info != 0:
        log.warning("gmres stopped without convergence after %d iterations", counter.niter)
        raise ConvergenceError("gmres did not converge", float(reduced_residual), counter.niter)
    u, m, uext = reduced.back_substitute(boundary)
    return _finish(system, "gmres", u, m, uext, started, iterations=counter.niter, factorizations=1)


def solve(system, method="schur", **options):
    """Dispatch on the solver name used in study configurations."""
    if method == "schur":
        return schur_solve(system)
    if method == "direct":
        return direct_solve(system, cap=options.get("cap", DIRECT_CAP))
    if method == "gmres":
        return gmres_solve(system, tol=options.get("tol", GMRES_TOL), maxit=options.get("maxit", GMRES_MAXIT),
                           preconditioner=options.get("preconditioner", "none"))
    raise SolverError(f"unknown solver '{method}'")
