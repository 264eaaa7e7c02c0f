"""Spatio-temporal Poisson count model with diffusion dynamics.

Generative model (p grid cells, T times)::

    y_t | v_t ~ Poisson(N_t * exp(v_t))
    v_t | u_t ~ N(u_t, s_eps I)
    u_t | u_{t-1} ~ N(u_{t-1} + G(u_{t-1}) psi, s_eta I),   u_0 ~ N(0, u0_var I)
    psi | alpha ~ N(Phi alpha, s_psi I),   alpha ~ N(0, s_alpha R_alpha)
    s_o ~ IG(shape_o, scale_o)

with ``G(u) = diag(Lap u)``. Theta is
``(u_0..u_T, v_1..v_T, psi, alpha, phi_eps, phi_eta, phi_psi, phi_alpha)``
where ``phi_o = log s_o``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from dynfactorvb.varfamily import FactorLayout, ZetaBlock, ZetaGraph, build_C2_mask

from .base import ModelSpec

LOG_2PI = float(np.log(2.0 * np.pi))
EXP_CLAMP = 700.0
VARIANCES = ("eps", "eta", "psi", "alpha")


@dataclass
class Grid:
    """Cell coordinates plus the nearest-neighbour Laplacian (reflecting boundary)."""

    coords: np.ndarray
    laplacian: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=float))
        d = _distances(self.coords)
        n = d.shape[0]
        if n > 1:
            off = d[~np.eye(n, dtype=bool)]
            if np.any(off == 0):
                raise ValueError("grid coordinates must be distinct")
            h = off.min()
            adj = (d <= h * (1 + 1e-9)) & ~np.eye(n, dtype=bool)
        else:
            adj = np.zeros((1, 1), dtype=bool)
        A = sp.csr_matrix(adj.astype(float))
        self.laplacian = (A - sp.diags(np.asarray(A.sum(1)).ravel())).tocsr()

    @classmethod
    def rectangular(cls, rows: int, cols: int) -> "Grid":
        r, c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        return cls(np.column_stack([r.ravel(), c.ravel()]).astype(float))

    @property
    def p(self) -> int:
        return self.coords.shape[0]


def _distances(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1))


def diffusion_operator(u: np.ndarray, grid: Grid) -> np.ndarray:
    """G(u) = diag(Lap u), so that H(psi) u = u + G(u) psi is linear in psi."""
    return np.diag(grid.laplacian @ np.asarray(u, dtype=float))


def build_spatial_basis(coords: np.ndarray, l: int, c: float, kernel: str = "exp_decay") -> tuple[np.ndarray, np.ndarray]:
    """Top-l eigenvectors (columns of Phi) and eigenvalues (R_alpha diagonal) of R(c).

    ``kernel="exp_decay"`` uses R = exp(-d / c); ``kernel="exp_growth"``
    uses R = exp(c d) literally.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    p = coords.shape[0]
    if not 1 <= l <= p:
        raise ValueError(f"l must be in [1, {p}]")
    d = _distances(coords)
    if kernel == "exp_decay":
        R = np.exp(-d / c)
    elif kernel == "exp_growth":
        R = np.exp(c * d)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    w, V = np.linalg.eigh(R)
    order = np.argsort(w)[::-1][:l]
    if np.any(w[order] <= 0):
        raise ValueError("leading kernel eigenvalues must be positive")
    return V[:, order], w[order]


@dataclass
class DoveHyper:
    shape: dict = field(default_factory=lambda: {"eps": 2.8, "eta": 2.9, "psi": 2.8, "alpha": 2.8})
    scale: dict = field(default_factory=lambda: {"eps": 0.28, "eta": 0.175, "psi": 0.28, "alpha": 0.28})
    l: int = 1
    c: float = 4.0
    u0_var: float = 10.0
    kernel: str = "exp_decay"


@dataclass
class DoveData:
    """Counts as a (T, p) integer array, optional offsets N (default 1), and the grid."""

    y: np.ndarray
    grid: Grid
    N: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.y = np.atleast_2d(np.asarray(self.y))
        if np.any(self.y < 0) or np.any(self.y != np.round(self.y)):
            raise ValueError("counts must be nonnegative integers")
        if self.y.shape[1] != self.grid.p:
            raise ValueError("count columns must match the grid size")
        self.N = np.ones(self.y.shape) if self.N is None else np.asarray(self.N, dtype=float)
        if self.N.shape != self.y.shape or np.any(self.N <= 0):
            raise ValueError("offsets must be positive with the shape of the counts")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]


def _ig_logpdf(x_log: float, q: float, r: float) -> float:
    return q * np.log(r) - gammaln(q) - (q + 1) * x_log - r * np.exp(-x_log)


def _ig_dphi(phi: float, q: float, r: float) -> float:
    return -(q + 1) + r * np.exp(-phi)


class DoveModel(ModelSpec):
    t0 = True

    def __init__(self, data: DoveData, hyper: DoveHyper | None = None):
        self.data = data
        self.hyper = hyper or DoveHyper()
        h = self.hyper
        self.Phi, self.R_alpha = build_spatial_basis(data.grid.coords, h.l, h.c, h.kernel)
        self.Lap = data.grid.laplacian
        p, T, l = data.p, data.T, h.l
        self.p, self.n_states = p, T + 1
        self.P = p * T + p + l + 4
        self.T, self.l = T, l
        self.zeta_graph = self._graph("LR-S")
        self._const = (
            -0.5 * p * (T + 1) * LOG_2PI
            - 0.5 * p * T * LOG_2PI
            - 0.5 * (p + l) * LOG_2PI
            - 0.5 * p * np.log(h.u0_var)
            - 0.5 * np.sum(np.log(self.R_alpha))
            + np.sum(self.data.y * np.log(self.data.N))
            - np.sum(gammaln(self.data.y + 1.0))
        )

    def _graph(self, structure: str) -> ZetaGraph:
        p, T, l = self.data.p, self.data.T, self.hyper.l
        blocks = [ZetaBlock("psi", p), ZetaBlock("alpha", l)] + [ZetaBlock(f"phi_{v}", 1) for v in VARIANCES]
        edges = [("alpha", "psi"), ("phi_eta", "psi"), ("phi_eta", "alpha"), ("phi_psi", "psi"), ("phi_alpha", "alpha")]
        if structure == "LR-S":
            blocks.insert(0, ZetaBlock("v", p * T))
            edges.append(("phi_eps", "v"))
        return ZetaGraph(tuple(blocks), tuple(edges))

    def layout(self, q: int, mean_mode: str = "LD-SM", structure: str = "LR-S") -> FactorLayout:
        p, T, l = self.data.p, self.data.T, self.hyper.l
        if structure == "LR-S":
            return FactorLayout(p, q, T + 1, self.P, mean_mode, "LR-S", t0=True)
        return FactorLayout(p, q, T + 1, p + l + 4, mean_mode, "LR-SA", p2=p, q2=q, n2=T, t0=True)

    def c2_mask(self, layout: FactorLayout | None = None):
        structure = "LR-S" if layout is None else layout.structure
        g = self._graph(structure)
        return build_C2_mask(g, g.size)

    def unpack(self, theta: np.ndarray) -> dict:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"theta must have length {self.dim}")
        p, T, l = self.data.p, self.data.T, self.l
        o = 0
        u = theta[o : o + p * (T + 1)].reshape(T + 1, p)
        o += p * (T + 1)
        v = theta[o : o + p * T].reshape(T, p)
        o += p * T
        psi = theta[o : o + p]
        o += p
        alpha = theta[o : o + l]
        o += l
        phi = dict(zip(VARIANCES, theta[o : o + 4]))
        return {"u": u, "v": v, "psi": psi, "alpha": alpha, "phi": phi}

    def pack(self, u, v, psi, alpha, phi: dict) -> np.ndarray:
        return np.concatenate(
            [np.ravel(u), np.ravel(v), np.ravel(psi), np.ravel(alpha), [phi[k] for k in VARIANCES]]
        )

    def _pieces(self, theta):
        s = self.unpack(theta)
        u, v, psi, alpha = s["u"], s["v"], s["psi"], s["alpha"]
        lap_u = (self.Lap @ u[:-1].T).T  # rows t = 0..T-1
        e = u[1:] - u[:-1] - lap_u * psi
        ev = v - u[1:]
        epsi = psi - self.Phi @ alpha
        rinv_alpha = alpha / self.R_alpha
        rate = self.data.N * np.exp(np.minimum(v, EXP_CLAMP))
        return s, lap_u, e, ev, epsi, rinv_alpha, rate

    def log_h(self, theta) -> float:
        s, _, e, ev, epsi, rinv_alpha, rate = self._pieces(theta)
        h, phi = self.hyper, s["phi"]
        p, T, l = self.data.p, self.data.T, self.l
        u, v, alpha = s["u"], s["v"], s["alpha"]
        out = self._const
        for k in VARIANCES:
            out += phi[k] + _ig_logpdf(phi[k], h.shape[k], h.scale[k])
        out += -0.5 * l * phi["alpha"] - 0.5 * np.exp(-phi["alpha"]) * alpha @ rinv_alpha
        out += -0.5 * p * phi["psi"] - 0.5 * np.exp(-phi["psi"]) * epsi @ epsi
        out += -0.5 * np.sum(u[0] ** 2) / h.u0_var
        out += -0.5 * p * T * phi["eta"] - 0.5 * np.exp(-phi["eta"]) * np.sum(e * e)
        out += -0.5 * p * T * phi["eps"] - 0.5 * np.exp(-phi["eps"]) * np.sum(ev * ev)
        out += np.sum(self.data.y * v - rate)
        return float(out)

    def grad_log_h(self, theta) -> np.ndarray:
        s, lap_u, e, ev, epsi, rinv_alpha, rate = self._pieces(theta)
        h, phi = self.hyper, s["phi"]
        p, T, l = self.data.p, self.data.T, self.l
        u, psi, alpha = s["u"], s["psi"], s["alpha"]
        s_eta, s_eps = np.exp(-phi["eta"]), np.exp(-phi["eps"])
        s_psi, s_alpha = np.exp(-phi["psi"]), np.exp(-phi["alpha"])

        we = s_eta * e
        gu = np.zeros_like(u)
        gu[0] -= u[0] / h.u0_var
        gu[1:] -= we
        # u_{t-1} enters e_t through -(I + diag(psi) Lap) u_{t-1}
        gu[:-1] += we + (self.Lap.T @ (psi * we).T).T
        gu[1:] += s_eps * ev
        gv = -s_eps * ev + self.data.y - rate
        gpsi = np.sum(we * lap_u, axis=0) - s_psi * epsi
        galpha = s_psi * self.Phi.T @ epsi - s_alpha * rinv_alpha
        gphi = {
            k: 1.0 + _ig_dphi(phi[k], h.shape[k], h.scale[k]) for k in VARIANCES
        }
        gphi["eps"] += -0.5 * p * T + 0.5 * s_eps * np.sum(ev * ev)
        gphi["eta"] += -0.5 * p * T + 0.5 * s_eta * np.sum(e * e)
        gphi["psi"] += -0.5 * p + 0.5 * s_psi * epsi @ epsi
        gphi["alpha"] += -0.5 * l + 0.5 * s_alpha * alpha @ rinv_alpha
        return self.pack(gu, gv, gpsi, galpha, gphi)

    def default_theta(self) -> np.ndarray:
        """States at the log counts, diffusion at zero, variances at their prior modes."""
        y = self.data.y
        v = np.log((y + 0.5) / self.data.N)
        u = np.vstack([v[:1], v])
        h = self.hyper
        phi = {k: np.log(h.scale[k] / (h.shape[k] + 1.0)) for k in VARIANCES}
        return self.pack(u, v, np.zeros(self.data.p), np.zeros(self.l), phi)


def simulate_dove(
    grid: Grid,
    T: int,
    hyper: DoveHyper | None = None,
    seed: int | None = None,
    fixed: dict | None = None,
    N: np.ndarray | None = None,
) -> tuple[DoveData, np.ndarray]:
    """Ancestral draw of (y, theta).

    ``fixed`` may pin any of ``s_eps``, ``s_eta``, ``s_psi``, ``s_alpha``
    (variances), ``alpha``, ``psi`` or ``u0`` instead of drawing them from
    their priors.
    """
    if T < 1 or grid.p < 1:
        raise ValueError("dimensions must be >= 1")
    hyper = hyper or DoveHyper()
    fixed = fixed or {}
    rng = np.random.default_rng(seed)
    p = grid.p
    Phi, R_alpha = build_spatial_basis(grid.coords, hyper.l, hyper.c, hyper.kernel)
    var = {}
    for k in VARIANCES:
        var[k] = float(fixed.get(f"s_{k}", hyper.scale[k] / rng.gamma(hyper.shape[k])))
    alpha = np.asarray(fixed.get("alpha", rng.normal(0.0, np.sqrt(var["alpha"] * R_alpha))), dtype=float)
    psi = np.asarray(fixed.get("psi", Phi @ alpha + rng.normal(0.0, np.sqrt(var["psi"]), p)), dtype=float)
    u = np.empty((T + 1, p))
    u[0] = fixed.get("u0", rng.normal(0.0, np.sqrt(hyper.u0_var), p))
    for t in range(1, T + 1):
        mean = u[t - 1] + (grid.laplacian @ u[t - 1]) * psi
        u[t] = mean + rng.normal(0.0, np.sqrt(var["eta"]), p)
    v = u[1:] + rng.normal(0.0, np.sqrt(var["eps"]), (T, p))
    N = np.ones((T, p)) if N is None else np.asarray(N, dtype=float)
    y = rng.poisson(N * np.exp(np.minimum(v, EXP_CLAMP)))
    data = DoveData(y, grid, N)
    model_theta = np.concatenate([u.ravel(), v.ravel(), psi, alpha, [np.log(var[k]) for k in VARIANCES]])
    return data, model_theta
