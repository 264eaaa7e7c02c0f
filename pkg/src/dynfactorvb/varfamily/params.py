"""Containers for variational parameters, gradients and base noise."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from dynfactorvb.matcalc import BandedLowerTriangular, SparseLowerTriangular

from .layout import FactorLayout

BLOCKS = ("mu", "B", "delta", "C")


@dataclass
class ParamBlocks:
    """lambda = (mu, B, delta, C1, C2).

    ``B`` holds one p x q loading matrix per chain, ``c1`` is C1 in lower
    band storage and ``c2`` holds C2 values aligned to ``c2_rows``/``c2_cols``.
    """

    mu: np.ndarray
    B: tuple[np.ndarray, ...]
    delta: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    c2_rows: np.ndarray
    c2_cols: np.ndarray

    def copy(self):
        return replace(
            self,
            mu=self.mu.copy(),
            B=tuple(b.copy() for b in self.B),
            delta=self.delta.copy(),
            c1=self.c1.copy(),
            c2=self.c2.copy(),
        )

    def block_arrays(self, block: str) -> list[np.ndarray]:
        if block == "mu":
            return [self.mu]
        if block == "B":
            return list(self.B)
        if block == "delta":
            return [self.delta]
        if block == "C":
            return [self.c1, self.c2]
        raise KeyError(block)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for blk in BLOCKS for a in self.block_arrays(blk)])

    def block_norm(self, block: str) -> float:
        return float(np.sqrt(sum(np.sum(a * a) for a in self.block_arrays(block))))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for blk in BLOCKS for a in self.block_arrays(blk))


class VariationalParams(ParamBlocks):
    """Variational parameters; see :class:`ParamBlocks` for the storage."""

    @classmethod
    def initial(
        cls,
        layout: FactorLayout,
        c2_mask: tuple[np.ndarray, np.ndarray],
        mu: np.ndarray | None = None,
        delta: np.ndarray | float = 1.0,
    ) -> "VariationalParams":
        """B and C as unit diagonals; mu zero and delta constant unless given."""
        B = []
        for c in layout.chains:
            b = np.zeros((c.p, c.q))
            b[np.arange(c.q), np.arange(c.q)] = 1.0
            B.append(b)
        c1 = np.zeros((layout.c1_bw + 1, layout.n_z))
        c1[0] = 1.0
        rows, cols = (np.asarray(a, dtype=np.int64) for a in c2_mask)
        c2 = (rows == cols).astype(float)
        mu = np.zeros(layout.dim_mu) if mu is None else np.asarray(mu, dtype=float).copy()
        if mu.shape != (layout.dim_mu,):
            raise ValueError(f"mu must have length {layout.dim_mu}")
        delta = np.broadcast_to(np.asarray(delta, dtype=float), (layout.n_x,)).copy()
        return cls(mu, tuple(B), delta, c1, c2, rows, cols)

    def C1(self) -> BandedLowerTriangular:
        return BandedLowerTriangular(self.c1.shape[1], self.c1.shape[0] - 1, self.c1)

    def check(self, layout: FactorLayout) -> None:
        """Raise if any structural invariant is violated."""
        if self.mu.shape != (layout.dim_mu,) or self.delta.shape != (layout.n_x,):
            raise ValueError("mu or delta has the wrong length")
        for b, m in zip(self.B, layout.b_masks):
            if b.shape != m.shape or np.any(b[~m] != 0):
                raise ValueError("B violates its triangular mask")
        if self.c1.shape != layout.c1_band_mask.shape or np.any(self.c1[~layout.c1_band_mask] != 0):
            raise ValueError("C1 violates its band mask")
        if np.any(self.c1[0] == 0) or np.any(self.c2[self.c2_rows == self.c2_cols] == 0):
            raise ValueError("C has a zero diagonal entry")


class GradientSet(ParamBlocks):
    """Gradient with the same layout and masks as :class:`VariationalParams`."""

    @classmethod
    def zeros_like(cls, lam: ParamBlocks) -> "GradientSet":
        return cls(
            np.zeros_like(lam.mu),
            tuple(np.zeros_like(b) for b in lam.B),
            np.zeros_like(lam.delta),
            np.zeros_like(lam.c1),
            np.zeros_like(lam.c2),
            lam.c2_rows,
            lam.c2_cols,
        )

    def add_(self, other: "GradientSet", scale: float = 1.0) -> "GradientSet":
        for blk in BLOCKS:
            for a, b in zip(self.block_arrays(blk), other.block_arrays(blk)):
                a += scale * b
        return self


@dataclass(frozen=True)
class NoiseDraw:
    """Base randomness u = (omega, eps) of the reparametrization."""

    omega: np.ndarray
    eps: np.ndarray

    @classmethod
    def draw(cls, layout: FactorLayout, rng: np.random.Generator) -> "NoiseDraw":
        return cls(rng.standard_normal(layout.dim_rho), rng.standard_normal(layout.n_x))

    def check(self, layout: FactorLayout) -> None:
        if self.omega.shape != (layout.dim_rho,) or self.eps.shape != (layout.n_x,):
            raise ValueError("noise draw does not match the layout")


def c2_factor(lam: ParamBlocks, P: int) -> SparseLowerTriangular:
    return SparseLowerTriangular(P, lam.c2_rows, lam.c2_cols, lam.c2)
