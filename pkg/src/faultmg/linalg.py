"""Small linear-algebra kernels shared by the solver and the analysis code.

Sparse operators are ``scipy.sparse.csr_array`` instances with sorted column
indices; their matvec sums each row in ascending column order, which keeps the
fault-free path bitwise reproducible.  Dense helpers are thin wrappers around
LAPACK with the error reporting the rest of the package relies on.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lapack

MAX_KRON_ENTRIES = 10**7
MAX_SQRT_SIZE = 4096


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky factorization meets a non-positive pivot."""

    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (pivot {pivot})")
        self.pivot = pivot


class ConvergenceError(RuntimeError):
    """Raised when an iterative estimator runs out of iterations."""

    def __init__(self, message: str, last: tuple[float, float]):
        super().__init__(f"{message}; last two estimates {last[0]!r}, {last[1]!r}")
        self.last = last


def as_csr(A) -> sp.csr_array:
    """Convert to CSR with sorted indices and no explicit zeros."""
    A = sp.csr_array(A, dtype=np.float64)
    A.eliminate_zeros()
    A.sort_indices()
    return A


def spmv(A: sp.csr_array, x: np.ndarray) -> np.ndarray:
    """Sparse matrix-vector product with a shape check."""
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"dimension mismatch: {A.shape} @ {x.shape}")
    return A @ x


class Cholesky:
    """Cached dense Cholesky factor used for the coarsest-grid solve."""

    def __init__(self, A):
        A = np.asarray(A.toarray() if sp.issparse(A) else A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {A.shape}")
        c, info = lapack.dpotrf(A, lower=1, clean=1)
        if info > 0:
            raise NotPositiveDefiniteError(info - 1)
        if info < 0:
            raise ValueError(f"dpotrf: illegal argument {-info}")
        self.factor = c
        self.n = A.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        if b.shape[0] != self.n:
            raise ValueError(f"dimension mismatch: {self.n} vs {b.shape[0]}")
        x, info = lapack.dpotrs(self.factor, b, lower=1)
        if info != 0:
            raise ValueError(f"dpotrs: illegal argument {-info}")
        return x


def dense_solve(A, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A``."""
    return Cholesky(A).solve(np.asarray(b, dtype=np.float64))


def kron(A, B) -> np.ndarray:
    """Kronecker product of two dense matrices, refusing huge results."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    size = A.shape[0] * B.shape[0] * A.shape[1] * B.shape[1]
    if size > MAX_KRON_ENTRIES:
        raise ValueError(f"kron result would have {size} entries (limit {MAX_KRON_ENTRIES})")
    return np.kron(A, B)


def _start_vector(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.ones(n) + 1e-3 * rng.standard_normal(n)


def _operator(M):
    """Return (n_cols, matvec, rmatvec) for a dense, sparse or LinearOperator input."""
    if hasattr(M, "matvec") and hasattr(M, "rmatvec"):
        return M.shape[1], M.matvec, M.rmatvec
    if not sp.issparse(M):
        M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    MT = M.T
    return M.shape[1], (lambda v: M @ v), (lambda v: MT @ v)


def spectral_norm(M, tol: float = 1e-8, maxiter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``M^T M``.

    ``M`` may be a dense array, a sparse matrix or any object exposing
    ``matvec``/``rmatvec`` and ``shape``.
    """
    n, mv, rmv = _operator(M)
    x = _start_vector(n, seed)
    x /= np.linalg.norm(x)
    prev = cur = 0.0
    for _ in range(maxiter):
        y = rmv(mv(x))
        lam = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        prev, cur = cur, np.sqrt(max(lam, 0.0))
        if abs(cur - prev) <= tol * cur:
            return cur
        x = y / ny
    raise ConvergenceError("spectral_norm did not converge", (prev, cur))


def spectral_radius_dense(M, tol: float = 1e-10, maxiter: int = 10_000, seed: int = 0) -> float:
    """Modulus of the dominant eigenvalue of a square dense matrix.

    Power iteration with growth-ratio estimates.  Converges when the dominant
    eigenvalue is real and isolated in modulus, which holds for the tensor
    expectations built in :mod:`faultmg.analysis`.  A rotating dominant pair
    raises :class:`ConvergenceError`.
    """
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if not M.any():
        return 0.0
    x = _start_vector(M.shape[0], seed)
    x /= np.linalg.norm(x)
    prev = cur = 0.0
    streak = 0
    # restart from a second seeded vector once, in case the first one was
    # (numerically) orthogonal to the dominant eigenvector
    restarts = 1
    for _ in range(maxiter):
        y = M @ x
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # nilpotent along this start vector
            if restarts:
                restarts -= 1
                x = _start_vector(M.shape[0], seed + 1)
                x /= np.linalg.norm(x)
                continue
            return 0.0
        prev, cur = cur, ny
        streak = streak + 1 if abs(cur - prev) <= tol * cur else 0
        if streak >= 3:
            return float(cur)
        x = y / ny
    raise ConvergenceError("spectral_radius_dense did not converge", (prev, cur))


def symmetric_sqrt(A) -> np.ndarray:
    """Principal square root of a symmetric positive definite matrix."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if A.shape[0] > MAX_SQRT_SIZE:
        raise ValueError(f"symmetric_sqrt limited to size {MAX_SQRT_SIZE}")
    w, V = np.linalg.eigh(A)
    scale = np.abs(w).max(initial=0.0)
    if w.size and w[0] < -1e-12 * scale:
        raise NotPositiveDefiniteError(int(np.argmin(w)))
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T
