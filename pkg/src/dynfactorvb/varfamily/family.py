"""Sampling, density and gradient kernels of the dynamic-factor family.

Notation: ``eta = C^{-T} omega``, ``x = theta - M mu = W eta + Z eps``,
``V = W Sigma W^T + Z^2`` and ``a = V^{-1} x``. W and Z are never formed;
the state block uses ``K = C1 C1^T + W1^T D^{-2} W1``, which has the
bandwidth of C1, and the Woodbury identity.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from dynfactorvb.matcalc import (
    BandedLowerTriangular,
    SparseLowerTriangular,
    banded_gram,
    banded_selected_inverse,
)

from .layout import FactorLayout
from .params import BLOCKS, GradientSet, NoiseDraw, ParamBlocks

LOG_2PI = float(np.log(2.0 * np.pi))
ESTIMATORS = ("standard", "roeder")

_C2_SKELETONS: dict[int, tuple[np.ndarray, SparseLowerTriangular]] = {}


def _c2(lam: ParamBlocks, P: int) -> SparseLowerTriangular:
    key = id(lam.c2_rows)
    hit = _C2_SKELETONS.get(key)
    if hit is None or hit[0] is not lam.c2_rows or hit[1].n != P:
        if len(_C2_SKELETONS) > 64:
            _C2_SKELETONS.clear()
        hit = (lam.c2_rows, SparseLowerTriangular(P, lam.c2_rows, lam.c2_cols))
        _C2_SKELETONS[key] = hit
    return hit[1].with_values(lam.c2)


def W1_apply(layout: FactorLayout, B, z: np.ndarray) -> np.ndarray:
    out = np.empty(layout.n_x)
    for c, Bc, idx, off in zip(layout.chains, B, layout.z_index, layout.x_offsets):
        out[off : off + c.n * c.p] = (z[idx] @ Bc.T).ravel()
    return out


def W1T_apply(layout: FactorLayout, B, x: np.ndarray) -> np.ndarray:
    out = np.empty(layout.n_z)
    for c, Bc, idx, off in zip(layout.chains, B, layout.z_index, layout.x_offsets):
        out[idx] = x[off : off + c.n * c.p].reshape(c.n, c.p) @ Bc
    return out


def _chain_rows(layout: FactorLayout, v: np.ndarray):
    """Split a state-length vector into per-chain (n, p) views."""
    return [v[off : off + c.n * c.p].reshape(c.n, c.p) for c, off in zip(layout.chains, layout.x_offsets)]


class Workspace:
    """Quantities that depend on lambda only, shared by all draws."""

    def __init__(self, lam: ParamBlocks, layout: FactorLayout):
        self.lam = lam
        self.layout = layout
        self.C1 = BandedLowerTriangular(layout.n_z, layout.c1_bw, lam.c1)
        self.C2 = _c2(lam, layout.P)
        self.C1.check_diagonal()
        self.C2.check_diagonal()
        delta = lam.delta
        if not np.all(np.isfinite(delta)) or np.any(delta == 0.0):
            raise np.linalg.LinAlgError("delta has a zero or non-finite entry")
        self.dinv2 = 1.0 / delta**2
        Kb = banded_gram(self.C1)
        for c, Bc, idx, dinv2 in zip(layout.chains, lam.B, layout.z_index, _chain_rows(layout, self.dinv2)):
            M = np.einsum("tp,pi,pj->tij", dinv2, Bc, Bc)
            for i in range(c.q):
                for j in range(i + 1):
                    Kb[i - j, idx[:, j]] += M[:, i, j]
        try:
            self.LK = cholesky_banded(Kb, lower=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("inner banded matrix is not positive definite") from exc
        self.logdet_V1 = float(
            np.sum(np.log(delta**2)) - 2.0 * self.C1.logabsdet() + 2.0 * np.sum(np.log(self.LK[0]))
        )
        self.logdet_V2 = -2.0 * self.C2.logabsdet()
        self._kinv = None

    @property
    def logdet_V(self) -> float:
        return self.logdet_V1 + self.logdet_V2

    def K_solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve_banded((self.LK, True), b, check_finite=False)

    def V1_solve(self, x1: np.ndarray) -> np.ndarray:
        lay, B = self.layout, self.lam.B
        y = x1 * self.dinv2
        return y - self.dinv2 * W1_apply(lay, B, self.K_solve(W1T_apply(lay, B, y)))

    @property
    def kinv_band(self) -> np.ndarray:
        if self._kinv is None:
            self._kinv = banded_selected_inverse(self.LK)
        return self._kinv

    def kinv_diag_blocks(self, chain: int) -> np.ndarray:
        """Diagonal (q x q) blocks of K^{-1} for one chain, shape (n, q, q)."""
        Z = self.kinv_band
        idx = self.layout.z_index[chain]
        q = idx.shape[1]
        out = np.empty((idx.shape[0], q, q))
        for i in range(q):
            for j in range(i + 1):
                out[:, i, j] = out[:, j, i] = Z[i - j, idx[:, j]]
        return out

    def kinv_times_c1(self) -> np.ndarray:
        """(K^{-1} C1) restricted to the band of C1, band storage."""
        Z, ab = self.kinv_band, self.C1.values
        m, n = ab.shape[0] - 1, ab.shape[1]
        out = np.zeros_like(ab)
        for d in range(m + 1):
            for s in range(m + 1):
                length = n - max(d, s)
                if length <= 0:
                    continue
                diff, lo = abs(d - s), min(d, s)
                out[d, :length] += Z[diff, lo : lo + length] * ab[s, :length]
        return out


def workspace(lam: ParamBlocks, layout: FactorLayout) -> Workspace:
    return Workspace(lam, layout)


def _mean(lam: ParamBlocks, layout: FactorLayout) -> np.ndarray:
    """M mu in theta coordinates."""
    if layout.hd:
        return lam.mu
    return np.concatenate([W1_apply(layout, lam.B, lam.mu[: layout.n_z]), lam.mu[layout.n_z :]])


def _M_T(lam: ParamBlocks, layout: FactorLayout, v: np.ndarray) -> np.ndarray:
    if layout.hd:
        return v.copy()
    return np.concatenate([W1T_apply(layout, lam.B, v[: layout.n_x]), v[layout.n_x :]])


class _Draw:
    """A single reparametrized draw and its derived vectors."""

    def __init__(self, ws: Workspace, u: NoiseDraw):
        lay, lam = ws.layout, ws.lam
        u.check(lay)
        nz = lay.n_z
        self.u = u
        self.eta1 = ws.C1.solve_transposed(u.omega[:nz])
        self.eta2 = ws.C2.solve_transposed(u.omega[nz:]) if lay.P else np.zeros(0)
        self.x1 = W1_apply(lay, lam.B, self.eta1) + lam.delta * u.eps
        self.theta = _mean(lam, lay) + np.concatenate([self.x1, self.eta2])
        self.a1 = ws.V1_solve(self.x1)
        # same route as log_q, so a self-target cancels to the last bit
        self.a2 = ws.C2.matvec(ws.C2.rmatvec(self.eta2)) if lay.P else np.zeros(0)

    @property
    def a(self) -> np.ndarray:
        return np.concatenate([self.a1, self.a2])


def sample_theta(lam: ParamBlocks, layout: FactorLayout, u: NoiseDraw, ws: Workspace | None = None) -> np.ndarray:
    """theta = M mu + W C^{-T} omega + Z eps."""
    ws = ws or Workspace(lam, layout)
    return _Draw(ws, u).theta


def sample_theta_batch(lam: ParamBlocks, layout: FactorLayout, omega: np.ndarray, eps: np.ndarray, ws: Workspace | None = None) -> np.ndarray:
    """Vectorized :func:`sample_theta` for S draws given as rows; returns (S, dim_theta)."""
    ws = ws or Workspace(lam, layout)
    omega = np.atleast_2d(omega)
    eps = np.atleast_2d(eps)
    nz, S = layout.n_z, omega.shape[0]
    if omega.shape[1] != layout.dim_rho or eps.shape != (S, layout.n_x):
        raise ValueError("noise arrays do not match the layout")
    eta1 = ws.C1.solve_transposed(omega[:, :nz].T.copy())
    out = np.empty((S, layout.dim_theta))
    for c, Bc, idx, off in zip(layout.chains, lam.B, layout.z_index, layout.x_offsets):
        X = np.einsum("tqs,pq->stp", eta1[idx], Bc)
        out[:, off : off + c.n * c.p] = X.reshape(S, -1)
    out[:, : layout.n_x] += lam.delta * eps
    if layout.P:
        out[:, layout.n_x :] = ws.C2.solve_transposed(omega[:, nz:].T.copy()).reshape(layout.P, S).T
    return out + _mean(lam, layout)


def log_q(lam: ParamBlocks, layout: FactorLayout, theta: np.ndarray, ws: Workspace | None = None) -> float:
    """Log density of the variational Gaussian at theta."""
    ws = ws or Workspace(lam, layout)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (layout.dim_theta,):
        raise ValueError(f"theta must have length {layout.dim_theta}")
    x = theta - _mean(lam, layout)
    x1, x2 = x[: layout.n_x], x[layout.n_x :]
    a1 = ws.V1_solve(x1)
    a2 = ws.C2.matvec(ws.C2.rmatvec(x2)) if layout.P else np.zeros(0)
    quad = float(x1 @ a1 + x2 @ a2)
    return -0.5 * (layout.dim_theta * LOG_2PI + ws.logdet_V + quad)


def _log_q_draw(ws: Workspace, d: _Draw) -> float:
    quad = float(d.x1 @ d.a1 + d.eta2 @ d.a2)
    return -0.5 * (ws.layout.dim_theta * LOG_2PI + ws.logdet_V + quad)


def elbo_estimate(lam, layout: FactorLayout, model, S: int, rng: np.random.Generator, ws: Workspace | None = None) -> float:
    """Monte Carlo ELBO average over S draws."""
    return float(np.mean(elbo_samples(lam, layout, model, S, rng, ws)))


def elbo_samples(lam, layout: FactorLayout, model, S: int, rng: np.random.Generator, ws: Workspace | None = None) -> np.ndarray:
    """Single-draw values log h(theta_s) - log q(theta_s)."""
    if S < 1:
        raise ValueError("S must be >= 1")
    ws = ws or Workspace(lam, layout)
    out = np.empty(S)
    for s in range(S):
        d = _Draw(ws, NoiseDraw.draw(layout, rng))
        out[s] = model.log_h(d.theta) - _log_q_draw(ws, d)
    return out


def _gradient(ws: Workspace, model, u: NoiseDraw, estimator: str, blocks: Iterable[str]) -> GradientSet:
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    lay, lam = ws.layout, ws.lam
    nx, nz = lay.n_x, lay.n_z
    standard = estimator == "standard"
    blocks = set(blocks)
    d = _Draw(ws, u)
    g = np.asarray(model.grad_log_h(d.theta), dtype=float)
    if g.shape != d.theta.shape:
        raise ValueError("model gradient has the wrong length")
    a = d.a
    r = g + a
    out = GradientSet.zeros_like(lam)

    if "mu" in blocks:
        out.mu[:] = _M_T(lam, lay, g if standard else r)

    if "B" in blocks:
        beta = d.eta1 if lay.hd else lam.mu[:nz] + d.eta1
        v1 = g[:nx] if standard else r[:nx]
        if standard:
            m1 = ws.C1.solve_transposed(ws.C1.solve(W1T_apply(lay, lam.B, d.a1)))
        for ci, (Bc, idx, mask) in enumerate(zip(lam.B, lay.z_index, lay.b_masks)):
            vc = _chain_rows(lay, v1)[ci]
            gB = vc.T @ beta[idx]
            if standard:
                ac = _chain_rows(lay, d.a1)[ci]
                dinv2 = _chain_rows(lay, ws.dinv2)[ci]
                kinv = ws.kinv_diag_blocks(ci)
                gB += np.einsum("tp,pj,tjr->pr", dinv2, Bc, kinv)
                gB += ac.T @ d.eta1[idx] - ac.T @ m1[idx]
            out.B[ci][:] = np.where(mask, gB, 0.0)

    if "delta" in blocks:
        eps = u.eps
        if standard:
            diag_vinv = np.empty(nx)
            for ci, Bc in enumerate(lam.B):
                kinv = ws.kinv_diag_blocks(ci)
                quad = np.einsum("pj,tjk,pk->tp", Bc, kinv, Bc).ravel()
                sl = slice(lay.x_offsets[ci], lay.x_offsets[ci] + quad.size)
                diag_vinv[sl] = ws.dinv2[sl] - ws.dinv2[sl] ** 2 * quad
            a1 = d.a1
            out.delta[:] = g[:nx] * eps + diag_vinv * lam.delta + a1 * eps - a1**2 * lam.delta
        else:
            out.delta[:] = r[:nx] * eps

    if "C" in blocks:
        n, bw = nz, lay.c1_bw
        s1 = ws.C1.solve(W1T_apply(lay, lam.B, r[:nx]))
        G1 = np.zeros_like(lam.c1)
        for k in range(bw + 1):
            G1[k, : n - k] = -d.eta1[k:] * s1[: n - k]
        if lay.P:
            s2 = ws.C2.solve(r[nx:])
            G2 = -d.eta2[lam.c2_rows] * s2[lam.c2_cols]
        else:
            G2 = np.zeros(0)
        if standard:
            sa1 = ws.C1.solve(W1T_apply(lay, lam.B, d.a1))
            m1 = ws.C1.solve_transposed(sa1)
            G1 += ws.kinv_times_c1()
            G1[0] -= 1.0 / lam.c1[0]
            for k in range(bw + 1):
                G1[k, : n - k] += m1[k:] * sa1[: n - k]
            if lay.P:
                diag = lam.c2_rows == lam.c2_cols
                G2 = G2 + d.eta2[lam.c2_rows] * u.omega[nz:][lam.c2_cols]
                G2[diag] -= 1.0 / lam.c2[diag]
        out.c1[:] = np.where(lay.c1_band_mask, G1, 0.0)
        out.c2[:] = G2
    return out


def grad_standard(lam, layout: FactorLayout, model, u: NoiseDraw, blocks: Iterable[str] = BLOCKS, ws: Workspace | None = None) -> GradientSet:
    """Single-draw reparametrization gradient including score terms."""
    return _gradient(ws or Workspace(lam, layout), model, u, "standard", blocks)


def grad_roeder(lam, layout: FactorLayout, model, u: NoiseDraw, blocks: Iterable[str] = BLOCKS, ws: Workspace | None = None) -> GradientSet:
    """Single-draw path-derivative gradient (score terms dropped)."""
    return _gradient(ws or Workspace(lam, layout), model, u, "roeder", blocks)


def lrsa_sample_and_grads(lam, layout: FactorLayout, model, u: NoiseDraw, estimator: str = "roeder", blocks: Iterable[str] = BLOCKS):
    """Draw and gradient for the two-chain (LR-SA) family."""
    if layout.structure != "LR-SA":
        raise ValueError("layout is not LR-SA")
    ws = Workspace(lam, layout)
    return _Draw(ws, u).theta, _gradient(ws, model, u, estimator, blocks)


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get("DFVB_NUM_THREADS", "1")))
    except ValueError:
        return 1


def mean_gradient(
    lam,
    layout: FactorLayout,
    model,
    draws: list[NoiseDraw],
    estimator: str,
    blocks: Iterable[str] = BLOCKS,
    ws: Workspace | None = None,
    threads: int | None = None,
) -> GradientSet:
    """Average of single-draw gradients, reduced in draw order."""
    ws = ws or Workspace(lam, layout)
    blocks = tuple(blocks)
    threads = num_threads() if threads is None else threads
    if estimator == "standard" and {"B", "delta", "C"} & set(blocks):
        ws.kinv_band  # fill the cache before any worker touches it
    if threads > 1 and len(draws) > 1:
        with ThreadPoolExecutor(threads) as pool:
            grads = list(pool.map(lambda u: _gradient(ws, model, u, estimator, blocks), draws))
    else:
        grads = [_gradient(ws, model, u, estimator, blocks) for u in draws]
    total = grads[0]
    for g in grads[1:]:
        total.add_(g)
    if len(grads) > 1:
        total.add_(total, 1.0 / len(grads) - 1.0)
    return total
