"""Poisson problems on uniform grids of the unit interval, square and cube.

The finest operator is the piecewise-linear finite element stiffness matrix on
the uniform simplicial mesh (intervals, right triangles, Kuhn tetrahedra),
scaled so the 1D operator reads ``tridiag(-1, 2, -1)``.  On these meshes the
scaled stiffness matrix coincides with the classical ``2d+1`` point stencil.
Coarse operators come from the Galerkin product ``R A P`` with the canonical
P1 injection as prolongation and ``R = P^T``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import Cholesky, as_csr

# classical optimal damped-Jacobi factors for the 3/5/7-point stencils
DEFAULT_DAMPING = {1: 2.0 / 3.0, 2: 4.0 / 5.0, 3: 6.0 / 7.0}


@dataclass(frozen=True)
class ProblemSpec:
    """Uniform Dirichlet Poisson problem with ``levels + 1`` nested grids.

    ``coarsest_cells`` is the number of cells per side on level 0; level
    ``l`` has ``coarsest_cells * 2**l - 1`` interior points per side.
    """

    dim: int = 2
    levels: int = 1
    coarsest_cells: int = 2

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.coarsest_cells < 2:
            raise ValueError(f"coarsest_cells must be >= 2, got {self.coarsest_cells}")

    def points_per_side(self, level: int) -> int:
        return self.coarsest_cells * 2**level - 1

    def size(self, level: int | None = None) -> int:
        if level is None:
            level = self.levels
        return self.points_per_side(level) ** self.dim


def poisson_matrix(dim: int, m: int) -> sp.csr_array:
    """Scaled P1 stiffness matrix on ``m**dim`` interior points (lexicographic)."""
    T = sp.diags_array([-np.ones(m - 1), 2.0 * np.ones(m), -np.ones(m - 1)], offsets=[-1, 0, 1])
    I = sp.identity(m, format="csr")
    A = sp.csr_array((m**dim, m**dim))
    for axis in range(dim):
        term = sp.csr_array(np.ones((1, 1)))
        for k in range(dim):
            term = sp.kron(term, T if k == axis else I, format="csr")
        A = A + term
    return as_csr(A)


def assemble_poisson(spec: ProblemSpec) -> sp.csr_array:
    """Finest-level operator for ``spec``."""
    return poisson_matrix(spec.dim, spec.points_per_side(spec.levels))


def prolongation_matrix(dim: int, m_coarse: int) -> sp.csr_array:
    """P1 injection from ``m_coarse**dim`` to ``(2*m_coarse + 1)**dim`` points.

    A coarse node keeps weight 1 at its own position; the fine node halfway
    to a neighbour ``c + o`` with ``o`` in ``{0,1}^d`` or ``{0,-1}^d`` gets 1/2.
    Those are exactly the simplex edges of the uniform (Kuhn) triangulation.
    """
    m_fine = 2 * m_coarse + 1
    coarse = np.indices((m_coarse,) * dim).reshape(dim, -1)
    centre = 2 * coarse + 1
    cols_all, rows_all, vals_all = [], [], []
    col_index = np.arange(coarse.shape[1])
    for o in itertools.product((-1, 0, 1), repeat=dim):
        o = np.array(o)
        if not o.any():
            w = 1.0
        elif (o >= 0).all() or (o <= 0).all():
            w = 0.5
        else:
            continue
        fine = centre + o[:, None]
        rows_all.append(np.ravel_multi_index(tuple(fine), (m_fine,) * dim))
        cols_all.append(col_index)
        vals_all.append(np.full(col_index.size, w))
    rows = np.concatenate(rows_all)
    cols = np.concatenate(cols_all)
    vals = np.concatenate(vals_all)
    P = sp.coo_array((vals, (rows, cols)), shape=(m_fine**dim, m_coarse**dim))
    return as_csr(P)


def build_prolongation(spec: ProblemSpec, level: int) -> sp.csr_array:
    """Prolongation from ``level`` to ``level + 1``."""
    if not 0 <= level < spec.levels:
        raise ValueError(f"level must be in [0, {spec.levels}), got {level}")
    return prolongation_matrix(spec.dim, spec.points_per_side(level))


@dataclass
class GridHierarchy:
    """Operators of all levels; level 0 is the coarsest.

    ``P[l]`` maps level ``l`` to ``l + 1`` and ``R[l] = P[l].T``.
    ``jacobi[l]`` holds ``theta / diag(A[l])`` so a smoothing update is a
    single elementwise product.
    """

    spec: ProblemSpec
    theta: float
    A: list
    P: list
    R: list
    diag: list
    jacobi: list = field(repr=False)
    coarse: Cholesky = field(repr=False)

    @property
    def levels(self) -> int:
        return self.spec.levels

    def size(self, level: int) -> int:
        return self.A[level].shape[0]

    def coarse_solve(self, b: np.ndarray) -> np.ndarray:
        return self.coarse.solve(b)


def build_hierarchy(spec: ProblemSpec, theta: float | None = None) -> GridHierarchy:
    """Assemble ``A_L`` and the Galerkin hierarchy below it."""
    if theta is None:
        theta = DEFAULT_DAMPING[spec.dim]
    L = spec.levels
    A = [None] * (L + 1)
    P = [None] * L
    R = [None] * L
    A[L] = assemble_poisson(spec)
    for level in range(L - 1, -1, -1):
        P[level] = build_prolongation(spec, level)
        R[level] = as_csr(P[level].T)
        A[level] = as_csr(R[level] @ (A[level + 1] @ P[level]))
    diag = [a.diagonal() for a in A]
    if any((d <= 0).any() for d in diag):
        raise ValueError("non-positive diagonal in the hierarchy")
    jacobi = [theta / d for d in diag]
    return GridHierarchy(spec, theta, A, P, R, diag, jacobi, Cholesky(A[0]))


def hierarchy_summary(hierarchy: GridHierarchy) -> dict:
    """Level sizes and operator statistics, for the ``hierarchy`` subcommand."""
    levels = []
    for level, A in enumerate(hierarchy.A):
        entry = {"level": level, "n": int(A.shape[0]), "nnz": int(A.nnz),
                 "diag_min": float(hierarchy.diag[level].min()),
                 "diag_max": float(hierarchy.diag[level].max())}
        if level < hierarchy.levels:
            entry["prolongation_nnz"] = int(hierarchy.P[level].nnz)
        levels.append(entry)
    spec = hierarchy.spec
    return {"dim": spec.dim, "levels": spec.levels, "coarsest_cells": spec.coarsest_cells,
            "theta": hierarchy.theta, "grids": levels}
