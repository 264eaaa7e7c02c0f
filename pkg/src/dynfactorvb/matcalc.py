"""Structured linear algebra and matrix-calculus kernels.

Conventions: ``vec`` stacks columns (Fortran order), ``vech`` stacks the
columns of the lower triangle including the diagonal. Banded lower
triangular matrices use LAPACK lower band storage, ``ab[d, j] = A[j + d, j]``,
so each row of ``ab`` holds one diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.linalg.lapack import dtbtrs
from scipy.sparse.linalg import spsolve_triangular

EIGEN_GAP_RTOL = 1e-8


class EigenGapError(np.linalg.LinAlgError):
    """Eigenvalues too close for the eigenvector derivative to be defined."""


def vec(A: np.ndarray) -> np.ndarray:
    return np.asarray(A).reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int, cols: int | None = None) -> np.ndarray:
    cols = rows if cols is None else cols
    return np.asarray(v).reshape((rows, cols), order="F")


def _tril_indices_colmajor(k: int) -> tuple[np.ndarray, np.ndarray]:
    # (row, col) pairs of the lower triangle, column by column.
    cols, rows = np.triu_indices(k)
    return rows, cols


def vech(A: np.ndarray) -> np.ndarray:
    """Column-stacked lower triangle (diagonal included) of a square matrix."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"vech needs a square matrix, got shape {A.shape}")
    rows, cols = _tril_indices_colmajor(A.shape[0])
    return A[rows, cols].copy()


def unvech(v: np.ndarray, k: int | None = None, symmetric: bool = False) -> np.ndarray:
    """Inverse of :func:`vech`; fills the lower triangle (or both, if symmetric)."""
    v = np.asarray(v, dtype=float)
    if k is None:
        k = int(round((np.sqrt(8 * v.size + 1) - 1) / 2))
    if v.size != k * (k + 1) // 2:
        raise ValueError(f"length {v.size} is not k(k+1)/2 for k={k}")
    rows, cols = _tril_indices_colmajor(k)
    A = np.zeros((k, k))
    A[rows, cols] = v
    if symmetric:
        A[cols, rows] = v
    return A


def vech_index(k: int) -> np.ndarray:
    """Map ``(i, j)`` with ``i >= j`` to its position in ``vech``; -1 above the diagonal."""
    idx = -np.ones((k, k), dtype=int)
    rows, cols = _tril_indices_colmajor(k)
    idx[rows, cols] = np.arange(rows.size)
    return idx


def elimination_matrix(k: int) -> sp.csr_matrix:
    """L_k with ``vech(A) = L_k vec(A)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rows, cols = _tril_indices_colmajor(k)
    m = rows.size
    return sp.csr_matrix((np.ones(m), (np.arange(m), cols * k + rows)), shape=(m, k * k))


def duplication_matrix(k: int) -> sp.csr_matrix:
    """D_k with ``vec(A) = D_k vech(A)`` for symmetric A."""
    if k < 1:
        raise ValueError("k must be >= 1")
    idx = vech_index(k)
    i, j = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    lower = np.where(i >= j, idx[i, j], idx[j, i])
    vec_pos = j * k + i
    return sp.csr_matrix(
        (np.ones(k * k), (vec_pos.ravel(), lower.ravel())), shape=(k * k, k * (k + 1) // 2)
    )


def commutation_matrix(r: int, s: int) -> sp.csr_matrix:
    """K_{r,s} with ``K vec(Z) = vec(Z^T)`` for an r x s matrix Z."""
    if r < 1 or s < 1:
        raise ValueError("r and s must be >= 1")
    i, j = np.meshgrid(np.arange(r), np.arange(s), indexing="ij")
    src = (i + j * r).ravel()
    dst = (j + i * s).ravel()
    return sp.csr_matrix((np.ones(r * s), (dst, src)), shape=(r * s, r * s))


# ---------------------------------------------------------------------------
# Triangular factors


@dataclass
class BandedLowerTriangular:
    """Lower triangular matrix with ``bw`` subdiagonals in LAPACK band layout."""

    n: int
    bw: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.bw + 1, self.n):
            raise ValueError(f"band storage must be {(self.bw + 1, self.n)}, got {self.values.shape}")

    @classmethod
    def identity(cls, n: int, bw: int) -> "BandedLowerTriangular":
        ab = np.zeros((bw + 1, n))
        ab[0] = 1.0
        return cls(n, bw, ab)

    @classmethod
    def from_dense(cls, A: np.ndarray, bw: int) -> "BandedLowerTriangular":
        A = np.asarray(A, dtype=float)
        n = A.shape[0]
        ab = np.zeros((bw + 1, n))
        for d in range(min(bw, n - 1) + 1):
            ab[d, : n - d] = np.diagonal(A, -d)
        return cls(n, bw, ab)

    def to_dense(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        for d in range(min(self.bw, self.n - 1) + 1):
            A += np.diag(self.values[d, : self.n - d], -d)
        return A

    @property
    def diagonal(self) -> np.ndarray:
        return self.values[0]

    def check_diagonal(self) -> None:
        if not np.all(np.isfinite(self.values)) or np.any(self.values[0] == 0.0):
            raise np.linalg.LinAlgError("banded factor has a zero or non-finite diagonal entry")

    def logabsdet(self) -> float:
        self.check_diagonal()
        return float(np.sum(np.log(np.abs(self.values[0]))))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """``C @ x``."""
        out = self.values[0] * x
        for d in range(1, min(self.bw, self.n - 1) + 1):
            out[d:] += self.values[d, : self.n - d] * x[: self.n - d]
        return out

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        """``C.T @ x``."""
        out = self.values[0] * x
        for d in range(1, min(self.bw, self.n - 1) + 1):
            out[: self.n - d] += self.values[d, : self.n - d] * x[d:]
        return out

    def solve(self, w: np.ndarray) -> np.ndarray:
        """Solve ``C x = w`` by forward substitution."""
        return self._tbtrs(w, b"N")

    def solve_transposed(self, w: np.ndarray) -> np.ndarray:
        """Solve ``C^T x = w`` by back substitution."""
        return self._tbtrs(w, b"T")

    def _tbtrs(self, w: np.ndarray, trans: bytes) -> np.ndarray:
        self.check_diagonal()
        w = np.asarray(w, dtype=float)
        b = w.reshape(self.n, -1)
        x, info = dtbtrs(self.values, b, uplo=b"L", trans=trans)
        if info != 0:
            raise np.linalg.LinAlgError(f"banded triangular solve failed (info={info})")
        return x.reshape(w.shape)


def banded_solve_transposed(C: BandedLowerTriangular, w: np.ndarray) -> np.ndarray:
    """Solve ``C^T x = w`` in O(n * bw)."""
    return C.solve_transposed(w)


class SparseLowerTriangular:
    """Lower triangular matrix with an arbitrary sparsity mask.

    ``rows``/``cols`` fix the pattern (must contain the full diagonal);
    ``values`` are aligned to it.
    """

    def __init__(self, n: int, rows: np.ndarray, cols: np.ndarray, values: np.ndarray | None = None):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.shape != cols.shape:
            raise ValueError("rows and cols must align")
        if np.any(rows < cols):
            raise ValueError("mask must be lower triangular")
        if n > 0:
            diag = np.zeros(n, dtype=bool)
            diag[rows[rows == cols]] = True
            if not diag.all():
                raise ValueError("mask must contain the full diagonal")
        self.n = n
        self.rows = rows
        self.cols = cols
        # Fixed CSR skeleton so refreshing values avoids a COO sort.
        order = np.lexsort((cols, rows))
        self._order = order
        self._indices = cols[order].astype(np.int32)
        self._indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=n))]).astype(np.int32)
        self._diag_pos = np.flatnonzero(rows == cols)[np.argsort(rows[rows == cols])]
        self.values = np.ones(rows.size) * (rows == cols) if values is None else np.asarray(values, float)
        if self.values.shape != rows.shape:
            raise ValueError("values must align with the mask")

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    def with_values(self, values: np.ndarray) -> "SparseLowerTriangular":
        new = object.__new__(SparseLowerTriangular)
        new.__dict__.update(self.__dict__)
        new.values = np.asarray(values, dtype=float)
        return new

    @property
    def diagonal(self) -> np.ndarray:
        return self.values[self._diag_pos]

    def check_diagonal(self) -> None:
        if not np.all(np.isfinite(self.values)) or np.any(self.diagonal == 0.0):
            raise np.linalg.LinAlgError("sparse factor has a zero or non-finite diagonal entry")

    def tocsr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values[self._order], self._indices, self._indptr), shape=(self.n, self.n)
        )

    def to_dense(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        A[self.rows, self.cols] = self.values
        return A

    def logabsdet(self) -> float:
        self.check_diagonal()
        return float(np.sum(np.log(np.abs(self.diagonal))))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return np.bincount(self.rows, self.values * x[self.cols], minlength=self.n)

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        return np.bincount(self.cols, self.values * x[self.rows], minlength=self.n)

    def solve(self, w: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0)
        self.check_diagonal()
        return spsolve_triangular(self.tocsr(), w, lower=True)

    def solve_transposed(self, w: np.ndarray) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0)
        self.check_diagonal()
        return spsolve_triangular(self.tocsr().T.tocsr(), w, lower=False)


# ---------------------------------------------------------------------------
# Low-rank plus diagonal systems


def _inner_factor(Lam: np.ndarray, gamma_chol: np.ndarray, psi: np.ndarray) -> np.ndarray:
    m = Lam.shape[1]
    Linv = sla.solve_triangular(gamma_chol, np.eye(m), lower=True)
    inner = Linv.T @ Linv + Lam.T @ (Lam / psi[:, None])
    try:
        return np.linalg.cholesky(inner)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("inner Woodbury matrix is not positive definite") from exc


def woodbury_solve(Lam, gamma_chol, psi_diag, rhs) -> np.ndarray:
    """Solve ``(Lam Gam Lam^T + Psi) x = rhs`` with ``Gam = gamma_chol gamma_chol^T``.

    Only m x m factorizations are formed, m being the number of columns
    of ``Lam``.
    """
    Lam = np.atleast_2d(np.asarray(Lam, dtype=float))
    psi = np.asarray(psi_diag, dtype=float)
    if np.any(psi <= 0):
        raise ValueError("Psi must be positive")
    rhs = np.asarray(rhs, dtype=float)
    R = _inner_factor(Lam, np.atleast_2d(gamma_chol), psi)
    scaled = rhs / (psi if rhs.ndim == 1 else psi[:, None])
    inner = sla.cho_solve((R, True), Lam.T @ scaled)
    corr = Lam @ inner
    return scaled - corr / (psi if rhs.ndim == 1 else psi[:, None])


def lowrank_logdet(Lam, gamma_chol, psi_diag) -> float:
    """``log|Lam Gam Lam^T + Psi|`` through the matrix determinant lemma."""
    Lam = np.atleast_2d(np.asarray(Lam, dtype=float))
    psi = np.asarray(psi_diag, dtype=float)
    if np.any(psi <= 0):
        raise ValueError("Psi must be positive")
    gamma_chol = np.atleast_2d(gamma_chol)
    d = np.abs(np.diag(gamma_chol))
    if np.any(d == 0):
        raise np.linalg.LinAlgError("nonpositive pivot in Gamma factor")
    R = _inner_factor(Lam, gamma_chol, psi)
    return float(np.sum(np.log(psi)) + 2 * np.sum(np.log(d)) + 2 * np.sum(np.log(np.diag(R))))


# ---------------------------------------------------------------------------
# Banded symmetric helpers (band layout as for BandedLowerTriangular)


def banded_gram(C: BandedLowerTriangular) -> np.ndarray:
    """Lower band storage of ``C C^T`` (same bandwidth as C)."""
    ab, n, m = C.values, C.n, C.bw
    out = np.zeros_like(ab)
    for d in range(m + 1):
        for s in range(m - d + 1):
            # K[j+d, j] += C[j, j-s] * C[j+d, j-s]; with c = j - s.
            length = n - d - s
            if length <= 0:
                continue
            out[d, s : s + length] += ab[s, :length] * ab[d + s, :length]
    return out


def banded_selected_inverse(L: np.ndarray) -> np.ndarray:
    """Entries of ``(L L^T)^{-1}`` inside the band of the lower band Cholesky ``L``.

    Takahashi recursion, one column at a time from the right; each column
    needs only the already finished (bw x bw) window below it, so the cost
    is O(n * bw^2). Returns lower band storage.
    """
    m = L.shape[0] - 1
    n = L.shape[1]
    Z = np.zeros_like(L)
    a, b = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    absdiff = np.abs(a - b)
    minab = np.minimum(a, b)
    for j in range(n - 1, -1, -1):
        ljj = L[0, j]
        k = min(m, n - 1 - j)
        if k:
            lcol = L[1 : k + 1, j]
            win = Z[absdiff[:k, :k], j + 1 + minab[:k, :k]]
            Z[1 : k + 1, j] = -(win @ lcol) / ljj
            Z[0, j] = (1.0 / ljj - lcol @ Z[1 : k + 1, j]) / ljj
        else:
            Z[0, j] = 1.0 / ljj**2
    return Z


def band_to_dense_symmetric(ab: np.ndarray) -> np.ndarray:
    m, n = ab.shape[0] - 1, ab.shape[1]
    A = np.diag(ab[0])
    for d in range(1, min(m, n - 1) + 1):
        A += np.diag(ab[d, : n - d], -d) + np.diag(ab[d, : n - d], d)
    return A


# ---------------------------------------------------------------------------
# Fractional matrix powers


@dataclass(frozen=True)
class SymEigen:
    """Eigen-decomposition with eigenvalues in descending order."""

    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def sym_eigen(S: np.ndarray) -> SymEigen:
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError("expected a square matrix")
    scale = max(np.abs(S).max(), 1e-300)
    if np.abs(S - S.T).max() > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return SymEigen(w[::-1].copy(), V[:, ::-1].copy())


def matrix_power_neg_d(S: np.ndarray, d: float) -> tuple[np.ndarray, SymEigen]:
    """``S^{-d}`` for symmetric positive definite S, plus the eigen-decomposition used."""
    eig = sym_eigen(S)
    if eig.values[-1] <= 0:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    P = eig.vectors
    return (P * eig.values ** (-d)) @ P.T, eig


def d_matrix_power_neg_d(eig: SymEigen, d: float) -> np.ndarray:
    """Jacobian ``d vec(S^{-d}) / d vec(S)`` (k^2 x k^2) for symmetric perturbations.

    Sum of the eigenvalue and eigenvector terms; the Moore-Penrose inverse
    of ``lam_i I - S`` reuses the eigenbasis.
    """
    lam, P = eig.values, eig.vectors
    k = lam.size
    if k > 1:
        gap = np.min(np.abs(np.diff(lam)))
        if gap < EIGEN_GAP_RTOL * abs(lam[0]):
            raise EigenGapError(f"eigenvalue gap {gap:.3e} below threshold")
    Ik = np.eye(k)
    J = np.zeros((k * k, k * k))
    for i in range(k):
        p = P[:, i]
        pp = np.kron(p, p)  # vec(p p^T)
        J += -d * lam[i] ** (-d - 1) * np.outer(pp, pp)
        diff = lam[i] - lam
        inv = np.zeros(k)
        mask = np.arange(k) != i
        inv[mask] = 1.0 / diff[mask]
        mp = (P * inv) @ P.T
        left = np.kron(p[:, None], Ik) + np.kron(Ik, p[:, None])
        J += lam[i] ** (-d) * left @ np.kron(p[None, :], mp)
    return J
