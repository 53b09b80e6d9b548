"""Sparse storage and restarted GMRES.

Storage is a thin wrapper over ``scipy.sparse.csr_matrix`` that pins the
invariants the rest of the code relies on (sorted column indices, no
duplicates). GMRES is right-preconditioned so the reported residual is the
true ``||b - A x||``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument, SolverFailure


class SparseMatrix:
    """Row-compressed matrix with canonical (sorted, de-duplicated) storage."""

    __slots__ = ("csr",)

    def __init__(self, matrix):
        csr = sp.csr_matrix(matrix, dtype=float, copy=True)
        csr.sum_duplicates()
        csr.sort_indices()
        self.csr = csr

    @classmethod
    def from_triplets(cls, rows, cols, vals, shape):
        return cls(sp.coo_matrix((vals, (rows, cols)), shape=shape))

    @property
    def shape(self):
        return self.csr.shape

    @property
    def row_offsets(self):
        return self.csr.indptr

    @property
    def col_indices(self):
        return self.csr.indices

    @property
    def values(self):
        return self.csr.data

    def diagonal(self):
        return self.csr.diagonal()

    def __matmul__(self, x):
        return spmv(self, x)

    def toarray(self):
        return self.csr.toarray()


def _as_csr(A):
    if isinstance(A, SparseMatrix):
        return A.csr
    if sp.issparse(A):
        return A.tocsr()
    return sp.csr_matrix(np.asarray(A, dtype=float))


def spmv(A, x):
    """y = A x."""
    csr = _as_csr(A)
    x = np.asarray(x, dtype=float)
    if x.shape[0] != csr.shape[1]:
        raise InvalidArgument(f"dimension mismatch: A is {csr.shape}, x has {x.shape[0]} rows")
    return csr @ x


@dataclass(frozen=True)
class GmresConfig:
    tol: float = 1e-12
    restart: int = 60
    max_iter: int = 2000
    jacobi: bool = True

    def __post_init__(self):
        if not (0.0 < self.tol < 1.0):
            raise InvalidArgument(f"GMRES tolerance must lie in (0, 1), got {self.tol}")
        if self.restart < 1 or self.max_iter < 1:
            raise InvalidArgument("restart and max_iter must be >= 1")


@dataclass
class GmresResult:
    x: np.ndarray
    iterations: int
    residual: float  # relative: ||b - A x|| / ||b||
    history: list  # relative true residual at the end of each restart cycle

    def __iter__(self):
        return iter((self.x, self.iterations, self.residual))


def gmres_solve(A, b, config=GmresConfig(), x0=None, precond=None):
    """Solve ``A x = b`` to ``||A x - b|| <= tol ||b||``.

    ``precond`` (optional) applies an approximate inverse, used on the right.
    With ``config.jacobi`` and no explicit ``precond`` the inverse diagonal is
    used. Returns a :class:`GmresResult` that also unpacks as
    ``(x, iterations, residual)``.
    """
    csr = _as_csr(A)
    n = csr.shape[0]
    if csr.shape[0] != csr.shape[1]:
        raise InvalidArgument(f"GMRES needs a square matrix, got {csr.shape}")
    b = np.asarray(b, dtype=float)
    if b.shape != (n,):
        raise InvalidArgument(f"rhs length {b.shape} does not match matrix size {n}")

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return GmresResult(np.zeros(n), 0, 0.0, [0.0])

    if precond is None and config.jacobi:
        d = csr.diagonal()
        if np.all(d != 0):
            dinv = 1.0 / d
            precond = lambda v: dinv * v  # noqa: E731
    if precond is None:
        precond = lambda v: v  # noqa: E731

    target = config.tol * bnorm
    r = b - csr @ x
    rnorm = np.linalg.norm(r)
    history = [rnorm / bnorm]
    iterations = 0
    m = min(config.restart, n)

    while rnorm > target:
        if iterations >= config.max_iter:
            raise SolverFailure(
                "GMRES did not converge", residual=rnorm / bnorm, iterations=iterations
            )
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = rnorm
        V[0] = r / rnorm
        k = 0
        for j in range(m):
            w = csr @ precond(V[j])
            # classical Gram-Schmidt, applied twice for stability
            h = V[: j + 1] @ w
            w -= h @ V[: j + 1]
            h2 = V[: j + 1] @ w
            w -= h2 @ V[: j + 1]
            h += h2
            hn = np.linalg.norm(w)
            H[: j + 1, j] = h
            H[j + 1, j] = hn
            for i in range(j):
                tmp = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = tmp
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            k = j + 1
            iterations += 1
            if abs(g[j + 1]) <= target or hn == 0.0 or iterations >= config.max_iter:
                break
            V[j + 1] = w / hn
        y = _back_substitute(H[:k, :k], g[:k])
        x = x + precond(y @ V[:k])
        r = b - csr @ x
        new_norm = np.linalg.norm(r)
        if new_norm > rnorm and k > 0 and abs(g[k]) > target:
            # loss of orthogonality; keep the better iterate and stop cycling
            raise SolverFailure(
                "GMRES stagnated", residual=new_norm / bnorm, iterations=iterations
            )
        rnorm = new_norm
        history.append(rnorm / bnorm)
        if iterations >= config.max_iter and rnorm > target:
            raise SolverFailure(
                "GMRES did not converge", residual=rnorm / bnorm, iterations=iterations
            )
    return GmresResult(x, iterations, rnorm / bnorm, history)


def _back_substitute(R, g):
    k = len(g)
    y = np.zeros(k)
    for i in range(k - 1, -1, -1):
        y[i] = (g[i] - R[i, i + 1:] @ y[i + 1:]) / R[i, i]
    return y
