"""Sparse matrices, direct solves, M-matrix structure checks and Newton."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class LinAlgError(Exception):
    pass


class SingularMatrixError(LinAlgError):
    def __init__(self, message: str, pivot: Optional[int] = None):
        super().__init__(message)
        self.pivot = pivot


@dataclass(frozen=True)
class SparseMatrix:
    """Square sparse matrix assembled once from COO triplets, then immutable.

    Duplicate (row, col) pairs in the input are summed during assembly.
    """

    n: int
    csr: sp.csr_matrix = field(repr=False)

    @staticmethod
    def from_coo(n: int, rows: np.ndarray, cols: np.ndarray, vals: np.ndarray) -> "SparseMatrix":
        m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        m.sum_duplicates()
        return SparseMatrix(n=n, csr=m)

    @staticmethod
    def identity(n: int) -> "SparseMatrix":
        return SparseMatrix(n=n, csr=sp.identity(n, format="csr"))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.csr @ x

    def add_diagonal(self, d: np.ndarray) -> "SparseMatrix":
        return SparseMatrix(n=self.n, csr=(self.csr + sp.diags(d)).tocsr())

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()


def solve_linear(a: SparseMatrix, b: np.ndarray) -> np.ndarray:
    """Direct sparse solve with a residual guarantee in the max-norm."""
    b = np.asarray(b, dtype=float)
    if b.shape != (a.n,):
        raise LinAlgError(f"rhs shape {b.shape} does not match matrix size {a.n}")
    try:
        lu = spla.splu(a.csr.tocsc())
    except RuntimeError as err:  # SuperLU reports exact singularity this way
        raise SingularMatrixError(str(err), pivot=_pivot_from_message(str(err))) from err
    x = lu.solve(b)
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("factorization produced non-finite solution")
    resid = np.max(np.abs(a.csr @ x - b))
    if resid > 1e-10 * (1.0 + np.max(np.abs(b))):
        raise LinAlgError(f"direct solve residual {resid:.3e} above tolerance")
    return x


def _pivot_from_message(message: str) -> Optional[int]:
    for word in message.replace("[", " ").replace("]", " ").split():
        if word.isdigit():
            return int(word)
    return None


@dataclass(frozen=True)
class MMatrixReport:
    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        return "M-matrix structure ok" if self.ok else "\n".join(self.violations)


def check_m_matrix_structure(a: SparseMatrix, dirichlet_touched: set[int],
                             tol: float = 1e-12) -> MMatrixReport:
    """Structural check that ``a`` is a column-dominant non-singular M-matrix.

    Verifies sign pattern, column diagonal dominance, strict dominance on the
    rows touched by Dirichlet edges, and that every column reaches a strictly
    dominant one through a chain of nonzero off-diagonal entries.
    """
    bad: list[str] = []
    coo = a.csr.tocoo()
    diag = a.csr.diagonal()
    scale = np.max(np.abs(coo.data)) if coo.data.size else 1.0

    off = coo.row != coo.col
    pos_off = off & (coo.data > tol * scale)
    if np.any(pos_off):
        where = list(zip(coo.row[pos_off][:5].tolist(), coo.col[pos_off][:5].tolist()))
        bad.append(f"positive off-diagonal entries at {where}")
    if np.any(diag <= 0):
        bad.append(f"non-positive diagonal at rows {np.nonzero(diag <= 0)[0][:5].tolist()}")

    col_off_abs = np.zeros(a.n)
    np.add.at(col_off_abs, coo.col[off], np.abs(coo.data[off]))
    slack = diag - col_off_abs
    weak = slack < -tol * scale
    if np.any(weak):
        bad.append(f"columns not diagonally dominant: {np.nonzero(weak)[0][:5].tolist()}")
    strict = slack > tol * scale
    missing = [k for k in dirichlet_touched if not strict[k]]
    if missing:
        bad.append(f"Dirichlet-touched columns not strictly dominant: {sorted(missing)[:5]}")

    # chain condition: every column connected to a strictly dominant one
    # through nonzero off-diagonal entries
    if a.n and not np.any(strict):
        bad.append("no strictly dominant column exists")
    elif a.n:
        reached = strict.copy()
        adj: dict[int, list[int]] = {}
        for r, c, v in zip(coo.row, coo.col, coo.data):
            if r != c and abs(v) > tol * scale:
                adj.setdefault(int(r), []).append(int(c))
                adj.setdefault(int(c), []).append(int(r))
        stack = list(np.nonzero(strict)[0])
        while stack:
            k = int(stack.pop())
            for j in adj.get(k, ()):
                if not reached[j]:
                    reached[j] = True
                    stack.append(j)
        if not reached.all():
            bad.append("columns with no chain to a strictly dominant column: "
                       f"{np.nonzero(~reached)[0][:5].tolist()}")

    return MMatrixReport(tuple(bad))


@dataclass(frozen=True)
class NewtonConfig:
    """Residual tolerance is an absolute max-norm bound."""

    tol: float = 1e-11
    max_iter: int = 50

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass(frozen=True)
class NonConvergence:
    """Returned (never raised) so adaptive steppers can shrink the time step."""

    iterations: int
    residual_norm: float
    last_iterate: np.ndarray
    reason: str = "residual above tolerance"

    def __str__(self):
        return (f"Newton did not converge after {self.iterations} iterations "
                f"(|residual| = {self.residual_norm:.3e}): {self.reason}")


NewtonResult = Union[tuple[np.ndarray, int], NonConvergence]


def newton_solve(residual: Callable[[np.ndarray], np.ndarray],
                 jacobian: Callable[[np.ndarray], SparseMatrix],
                 x0: np.ndarray,
                 cfg: NewtonConfig = NewtonConfig()) -> NewtonResult:
    """Undamped Newton iteration; returns (solution, iterations) on success."""
    x = np.asarray(x0, dtype=float).copy()
    r = residual(x)
    norm = np.max(np.abs(r)) if r.size else 0.0
    if norm <= cfg.tol:
        return x, 0
    for it in range(1, cfg.max_iter + 1):
        try:
            dx = solve_linear(jacobian(x), -r)
        except LinAlgError:
            return NonConvergence(iterations=it, residual_norm=norm,
                                  last_iterate=x, reason="singular Jacobian")
        x = x + dx
        r = residual(x)
        if not np.all(np.isfinite(r)):
            return NonConvergence(iterations=it, residual_norm=np.inf,
                                  last_iterate=x, reason="non-finite residual")
        norm = np.max(np.abs(r))
        if norm <= cfg.tol:
            return x, it
    return NonConvergence(iterations=cfg.max_iter, residual_norm=norm, last_iterate=x)
