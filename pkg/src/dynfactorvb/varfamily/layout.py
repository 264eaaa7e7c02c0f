"""Dimensions, index maps and sparsity masks of the dynamic-factor family."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

MEAN_MODES = ("LD-SM", "HD-SM")
STRUCTURES = ("LR-S", "LR-SA")


@dataclass(frozen=True)
class Chain:
    """One factor-structured state chain: n times, p states and q factors each."""

    p: int
    q: int
    n: int


@dataclass(frozen=True)
class FactorLayout:
    """Shape of the variational family.

    The state part of theta stores chain 1 (time-major, ``n_states`` blocks
    of ``p``), then chain 2 for LR-SA, then the ``P`` static parameters.
    For LR-SA the factor vector interleaves the chains in time: chain-1
    factors without a partner come first, followed by pairs
    ``(z1_t, z2_t)`` where chain-2 time ``j`` is paired with chain-1 time
    ``j + n_states - n2``. Setting ``q2 = 0`` disables the second chain.
    """

    p: int
    q: int
    n_states: int
    P: int = 0
    mean_mode: str = "LD-SM"
    structure: str = "LR-S"
    p2: int = 0
    q2: int = 0
    n2: int = 0
    t0: bool = False

    def __post_init__(self) -> None:
        if self.mean_mode not in MEAN_MODES:
            raise ValueError(f"mean_mode must be one of {MEAN_MODES}")
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}")
        if min(self.p, self.q, self.n_states) < 1 or self.P < 0:
            raise ValueError("p, q, n_states must be >= 1 and P >= 0")
        if self.q > self.p:
            raise ValueError("q must not exceed p")
        if self.structure == "LR-SA" and self.q2 > 0:
            if min(self.p2, self.n2) < 1:
                raise ValueError("LR-SA needs a second chain with p2, n2 >= 1")
            if self.q2 > self.p2:
                raise ValueError("q2 must not exceed p2")
            if self.n2 > self.n_states:
                raise ValueError("second chain cannot be longer than the first")
        elif self.structure == "LR-S" and self.q2 > 0:
            raise ValueError("second chain only exists under LR-SA")

    @property
    def chains(self) -> tuple[Chain, ...]:
        first = Chain(self.p, self.q, self.n_states)
        if self.structure == "LR-SA" and self.q2 > 0:
            return first, Chain(self.p2, self.q2, self.n2)
        return (first,)

    @property
    def hd(self) -> bool:
        return self.mean_mode == "HD-SM"

    @cached_property
    def n_x(self) -> int:
        """Length of the state part of theta."""
        return sum(c.p * c.n for c in self.chains)

    @cached_property
    def n_z(self) -> int:
        """Length of the factor part of rho (size of C1)."""
        return sum(c.q * c.n for c in self.chains)

    @property
    def dim_theta(self) -> int:
        return self.n_x + self.P

    @property
    def dim_rho(self) -> int:
        return self.n_z + self.P

    @property
    def dim_mu(self) -> int:
        return self.dim_theta if self.hd else self.dim_rho

    @cached_property
    def x_offsets(self) -> tuple[int, ...]:
        offs, o = [], 0
        for c in self.chains:
            offs.append(o)
            o += c.p * c.n
        return tuple(offs)

    @cached_property
    def z_index(self) -> tuple[np.ndarray, ...]:
        """Per chain, an (n, q) integer array locating each factor in rho."""
        chains = self.chains
        if len(chains) == 1:
            c = chains[0]
            return (np.arange(c.n * c.q).reshape(c.n, c.q),)
        c1, c2 = chains
        lag = c1.n - c2.n
        idx1 = np.empty((c1.n, c1.q), dtype=int)
        idx2 = np.empty((c2.n, c2.q), dtype=int)
        pos = 0
        for t in range(lag):
            idx1[t] = np.arange(pos, pos + c1.q)
            pos += c1.q
        for j in range(c2.n):
            idx1[j + lag] = np.arange(pos, pos + c1.q)
            pos += c1.q
            idx2[j] = np.arange(pos, pos + c2.q)
            pos += c2.q
        return idx1, idx2

    @cached_property
    def c1_dense_mask(self) -> np.ndarray:
        """Boolean n_z x n_z pattern of C1."""
        n = self.n_z
        mask = np.zeros((n, n), dtype=bool)
        chains = self.chains
        idx1 = self.z_index[0]
        q1 = chains[0].q
        # chain 1: band of q1 subdiagonals in its own time-major ordering
        flat1 = idx1.reshape(-1)
        for d in range(q1 + 1):
            mask[flat1[d:], flat1[: flat1.size - d]] = True
        if len(chains) == 2:
            idx2 = self.z_index[1]
            lag = chains[0].n - chains[1].n
            tri2 = np.tril(np.ones((chains[1].q, chains[1].q), dtype=bool))
            cross = np.tril(np.ones((chains[1].q, q1), dtype=bool))
            for j in range(chains[1].n):
                r = idx2[j]
                mask[np.ix_(r, r)] |= tri2
                mask[np.ix_(r, idx1[j + lag])] |= cross
        return mask

    @cached_property
    def c1_bw(self) -> int:
        r, c = np.nonzero(self.c1_dense_mask)
        return int((r - c).max())

    @cached_property
    def c1_band_mask(self) -> np.ndarray:
        """The C1 pattern in LAPACK lower band layout, shape (bw + 1, n_z)."""
        n, bw = self.n_z, self.c1_bw
        out = np.zeros((bw + 1, n), dtype=bool)
        for d in range(bw + 1):
            out[d, : n - d] = np.diagonal(self.c1_dense_mask, -d)
        return out

    @cached_property
    def b_masks(self) -> tuple[np.ndarray, ...]:
        """Per chain, the free entries of B (B_ij = 0 for i < j)."""
        return tuple(np.tril(np.ones((c.p, c.q), dtype=bool)) for c in self.chains)


@dataclass(frozen=True)
class ZetaBlock:
    name: str
    size: int
    dense: bool = False


@dataclass(frozen=True)
class ZetaGraph:
    """Ordered components of zeta and their pairwise dependence.

    An edge between two blocks fills the rectangle (later block rows,
    earlier block columns) of the C2 pattern.
    """

    blocks: tuple[ZetaBlock, ...] = ()
    edges: tuple[tuple[str, str], ...] = field(default_factory=tuple)

    @property
    def size(self) -> int:
        return sum(b.size for b in self.blocks)

    def offsets(self) -> dict[str, tuple[int, int]]:
        out, o = {}, 0
        for b in self.blocks:
            out[b.name] = (o, o + b.size)
            o += b.size
        return out


def build_C2_mask(graph: ZetaGraph, P: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices of the C2 pattern (lower triangular, full diagonal)."""
    if P is not None and graph.size != P and graph.blocks:
        raise ValueError(f"zeta blocks cover {graph.size} entries but P = {P}")
    if any(b.size < 1 for b in graph.blocks):
        raise ValueError("zeta blocks must have positive size")
    names = [b.name for b in graph.blocks]
    if len(set(names)) != len(names):
        raise ValueError("duplicate zeta block names")
    n = graph.size if graph.blocks else (P or 0)
    rows: list[np.ndarray] = [np.arange(n)]
    cols: list[np.ndarray] = [np.arange(n)]
    offs = graph.offsets()
    order = {name: i for i, name in enumerate(names)}
    for b in graph.blocks:
        if b.dense and b.size > 1:
            lo = offs[b.name][0]
            r, c = np.tril_indices(b.size, -1)
            rows.append(r + lo)
            cols.append(c + lo)
    seen = set()
    for a, b in graph.edges:
        if a not in order or b not in order:
            raise ValueError(f"edge ({a}, {b}) references an unknown block")
        if a == b:
            raise ValueError("self edges are expressed with ZetaBlock.dense")
        late, early = (a, b) if order[a] > order[b] else (b, a)
        if (late, early) in seen:
            continue
        seen.add((late, early))
        (r0, r1), (c0, c1) = offs[late], offs[early]
        r, c = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
    return np.concatenate(rows), np.concatenate(cols)


def count_params(layout: FactorLayout, c2_mask: tuple[np.ndarray, np.ndarray]) -> dict[str, int]:
    """Number of free variational parameters in each block."""
    mu = layout.dim_mu
    B = sum(c.p * c.q - c.q * (c.q - 1) // 2 for c in layout.chains)
    D = layout.n_x
    C1 = int(layout.c1_dense_mask.sum())
    C2 = int(np.asarray(c2_mask[0]).size)
    return {"mu": mu, "B": B, "D": D, "C1": C1, "C2": C2, "total": mu + B + D + C1 + C2}
