"""Sparse direct solves and static condensation of block-diagonal interiors."""

from __future__ import annotations

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import structural_rank


class SingularSystemError(RuntimeError):
    """Raised when a system cannot be factorized; ``pivot`` locates the failure if known."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


def _locate_zero_pivot(A: sp.spmatrix) -> int | None:
    if A.shape[0] > 4000:
        return None
    _, _, U = la.lu(A.toarray())
    d = np.abs(np.diag(U))
    scale = max(d.max(initial=0.0), 1.0)
    bad = np.flatnonzero(d <= 1e-14 * scale)
    return int(bad[0]) if len(bad) else None


def factorize(A) -> spla.SuperLU:
    """LU factorization ordered on the pattern of ``A + A^T`` with diagonal pivots preferred.

    Raises :class:`SingularSystemError` when a zero pivot is met.
    """
    A = sp.csc_matrix(A)
    n, m = A.shape
    if n != m:
        raise ValueError(f"system must be square, got {A.shape}")
    if not np.all(np.isfinite(A.data)):
        raise ValueError("system matrix contains non-finite entries")
    rank = structural_rank(A)
    if rank < n:
        empty = np.flatnonzero(np.diff(A.tocsr().indptr) == 0)
        where = int(empty[0]) if len(empty) else None
        raise SingularSystemError(f"structurally singular matrix (structural rank {rank} < {n}, row {where})", where)
    try:
        return spla.splu(A, permc_spec="MMD_AT_PLUS_A", options=dict(SymmetricMode=True))
    except RuntimeError as exc:
        pivot = _locate_zero_pivot(A)
        raise SingularSystemError(f"singular matrix ({exc}); zero pivot at row {pivot}", pivot) from exc


def solve_sparse(A, rhs: np.ndarray, check: bool = True) -> np.ndarray:
    """Solve ``A x = rhs`` by sparse LU and verify the residual.

    The residual must satisfy ``||A x - b|| <= 1e-10 (1 + ||b||)`` scaled by
    ``||A||_inf``; one step of iterative refinement is attempted before
    failing.
    """
    A = sp.csc_matrix(A)
    rhs = np.asarray(rhs, dtype=float)
    if A.shape == (0, 0):
        return np.zeros(rhs.shape)
    lu = factorize(A)
    x = lu.solve(rhs)
    if not check:
        return x
    anorm = max(spla.norm(A, np.inf), 1.0)
    tol = 1e-10 * (1.0 + np.linalg.norm(rhs)) * anorm
    r = rhs - A @ x
    if np.linalg.norm(r) > tol:
        x = x + lu.solve(r)
        r = rhs - A @ x
    if not np.all(np.isfinite(x)) or np.linalg.norm(r) > tol * 1e3:
        raise SingularSystemError(f"solve residual {np.linalg.norm(r):.3e} exceeds tolerance; matrix is near-singular")
    return x


def block_inverse(blocks: np.ndarray) -> np.ndarray:
    """Inverses of a stack of square blocks, with a singularity check."""
    cond = np.linalg.cond(blocks)
    bad = np.flatnonzero(~np.isfinite(cond) | (cond > 1e15))
    if len(bad):
        raise SingularSystemError(f"interior block {int(bad[0])} is singular (cond {cond[bad[0]]:.2e})", int(bad[0]))
    return np.linalg.inv(blocks)


class Condensation:
    """Schur complement ``S = K_FF - K_FI K_II^{-1} K_IF`` and interior recovery."""

    def __init__(self, K, interior_blocks, facet_dofs):
        K = sp.csr_matrix(K)
        n = K.shape[0]
        facet_dofs = np.asarray(facet_dofs, dtype=np.int64)
        sizes = np.array([len(b) for b in interior_blocks])
        interior = np.concatenate([np.asarray(b, dtype=np.int64) for b in interior_blocks]) if len(sizes) else np.zeros(0, np.int64)
        if len(np.unique(np.concatenate([interior, facet_dofs]))) != n or len(interior) + len(facet_dofs) != n:
            raise ValueError("interior blocks and facet dofs must partition the unknowns")
        nb, bmax = len(sizes), int(sizes.max(initial=1))
        block_of = np.repeat(np.arange(nb), sizes)
        local_of = np.concatenate([np.arange(s) for s in sizes]) if nb else np.zeros(0, np.int64)
        KII = K[interior][:, interior].tocoo()
        if np.any(block_of[KII.row] != block_of[KII.col]):
            raise ValueError("interior coupling is not block-diagonal")
        dense = np.zeros((nb, bmax, bmax))
        np.add.at(dense, (block_of[KII.row], local_of[KII.row], local_of[KII.col]), KII.data)
        # pad short blocks with the identity so they stay invertible
        for b in np.flatnonzero(sizes < bmax):
            idx = np.arange(sizes[b], bmax)
            dense[b, idx, idx] = 1.0
        inv = block_inverse(dense)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        rows, cols, vals = [], [], []
        for size in np.unique(sizes):
            sel = np.flatnonzero(sizes == size)
            i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
            rows.append((starts[sel, None, None] + i[None]).ravel())
            cols.append((starts[sel, None, None] + j[None]).ravel())
            vals.append(inv[sel][:, :size, :size].ravel())
        ni = len(interior)
        cat = (lambda parts: np.concatenate(parts) if parts else np.zeros(0))
        self.KII_inv = sp.csr_matrix((cat(vals), (cat(rows).astype(np.int64), cat(cols).astype(np.int64))), shape=(ni, ni))
        self.interior = interior
        self.facet_dofs = facet_dofs
        self.KIF = K[interior][:, facet_dofs].tocsr()
        self.KFI = K[facet_dofs][:, interior].tocsr()
        self.schur = (K[facet_dofs][:, facet_dofs] - self.KFI @ (self.KII_inv @ self.KIF)).tocsr()
        self.n = n

    def reduce_rhs(self, b: np.ndarray) -> np.ndarray:
        return b[self.facet_dofs] - self.KFI @ (self.KII_inv @ b[self.interior])

    def recover(self, x_facet: np.ndarray, b: np.ndarray) -> np.ndarray:
        x = np.zeros(self.n)
        x[self.facet_dofs] = x_facet
        x[self.interior] = self.KII_inv @ (b[self.interior] - self.KIF @ x_facet)
        return x

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.recover(solve_sparse(self.schur, self.reduce_rhs(b)), b)


def static_condense(K, interior_blocks, facet_dofs):
    """Return ``(schur, recover)`` where ``recover(x_facet, rhs)`` rebuilds the full vector."""
    c = Condensation(K, interior_blocks, facet_dofs)
    return c.schur, c.recover
