"""Wishart-process multivariate stochastic volatility model.

    y_t ~ N(0, Sigma_t),   Sigma_t^{-1} ~ Wishart(nu, S_{t-1}),
    S_t = H Sigma_t^{-d} H^T / nu,

with A = H H^T, A^{-1} ~ Wishart(gamma0, Q0), d ~ U(0, 1) and
nu - k ~ Gamma(alpha0, beta0) (rate parametrization). Sigma_0 is known.

The unconstrained vector is ordered states first, as the variational
family expects::

    theta = (vech(C'_1), ..., vech(C'_T), vech(H'), d', nu')

where primes log-transform the Cholesky diagonals, d = logistic(d') and
nu = k + exp(nu').
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import digamma, expit, gammaln, multigammaln
from scipy.stats import wishart

from dynfactorvb.matcalc import (
    commutation_matrix,
    d_matrix_power_neg_d,
    elimination_matrix,
    sym_eigen,
    unvech,
    vech,
)
from dynfactorvb.varfamily import ZetaBlock, ZetaGraph

from .base import ModelSpec

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2 = float(np.log(2.0))


@dataclass
class WishartHyper:
    k: int
    gamma0: float | None = None
    Q0: np.ndarray | None = None
    alpha0: float = 2.0
    beta0: float = 2.0
    Sigma0: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.gamma0 is None:
            self.gamma0 = self.k + 1.0
        self.Q0 = np.eye(self.k) if self.Q0 is None else np.asarray(self.Q0, dtype=float)
        if self.alpha0 <= 0 or self.beta0 <= 0:
            raise ValueError("alpha0 and beta0 must be positive")
        for name in ("Q0", "Sigma0"):
            M = getattr(self, name)
            if M is None:
                continue
            if M.shape != (self.k, self.k) or not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
                raise ValueError(f"{name} must be a symmetric positive definite {self.k}x{self.k} matrix")


@dataclass
class WishartTheta:
    C: np.ndarray  # (T, k, k) lower Cholesky factors of Sigma_t
    H: np.ndarray
    d: float
    nu: float

    @property
    def k(self) -> int:
        return self.H.shape[0]

    @property
    def Sigma(self) -> np.ndarray:
        return self.C @ np.transpose(self.C, (0, 2, 1))

    @property
    def A(self) -> np.ndarray:
        return self.H @ self.H.T


def _from_prime(v: np.ndarray, k: int) -> np.ndarray:
    M = unvech(v, k)
    M[np.diag_indices(k)] = np.exp(np.diag(M))
    return M


def _to_prime(M: np.ndarray) -> np.ndarray:
    M = np.tril(np.asarray(M, dtype=float)).copy()
    if np.any(np.diag(M) <= 0):
        raise ValueError("Cholesky factors need a positive diagonal")
    M[np.diag_indices(M.shape[0])] = np.log(np.diag(M))
    return vech(M)


def wishart_dim(k: int, T: int) -> int:
    return (T + 1) * (k * (k + 1) // 2) + 2


def wishart_unpack(theta: np.ndarray, k: int, T: int) -> WishartTheta:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (wishart_dim(k, T),):
        raise ValueError(f"theta must have length {wishart_dim(k, T)}")
    m = k * (k + 1) // 2
    C = np.stack([_from_prime(theta[t * m : (t + 1) * m], k) for t in range(T)]) if T else np.zeros((0, k, k))
    H = _from_prime(theta[T * m : (T + 1) * m], k)
    return WishartTheta(C, H, float(expit(theta[-2])), k + float(np.exp(theta[-1])))


def wishart_pack(par: WishartTheta) -> np.ndarray:
    k = par.k
    if not 0.0 < par.d < 1.0 or par.nu <= k:
        raise ValueError("need 0 < d < 1 and nu > k")
    parts = [_to_prime(C) for C in par.C] + [_to_prime(par.H)]
    return np.concatenate(parts + [[np.log(par.d / (1.0 - par.d)), np.log(par.nu - k)]])


def chol_jacobian(C: np.ndarray) -> np.ndarray:
    """d vech(C C^T) / d vech(C) = L_k (I + K_kk)(C kron I) L_k^T."""
    k = C.shape[0]
    L = elimination_matrix(k)
    IK = np.eye(k * k) + commutation_matrix(k, k).toarray()
    return L @ (IK @ np.kron(C, np.eye(k))) @ L.T.toarray()


def chol_logdet_jacobian(C: np.ndarray) -> float:
    """log |d vech(CC^T)/d vech(C)| = k log 2 + sum_i (k - i + 1) log C_ii (i from 1)."""
    k = C.shape[0]
    return k * LOG_2 + float(np.arange(k, 0, -1) @ np.log(np.diag(C)))


def _lower_chain(G: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Gradient wrt vech(C') of f(C C^T), given the symmetric gradient G of f wrt the matrix."""
    out = np.tril(2.0 * G @ C)
    out[np.diag_indices(C.shape[0])] *= np.diag(C)
    return vech(out)


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


class WishartModel(ModelSpec):
    """Posterior over the unconstrained theta for returns y (T x k)."""

    t0 = False

    def __init__(self, y: np.ndarray, hyper: WishartHyper | None = None):
        self.y = np.atleast_2d(np.asarray(y, dtype=float))
        T, k = self.y.shape
        if hyper is None:
            hyper = WishartHyper(k)
        if hyper.k != k:
            raise ValueError("hyperparameter dimension differs from the data")
        if hyper.Sigma0 is None:
            if T < 2:
                raise ValueError("Sigma0 must be given when T < 2")
            hyper.Sigma0 = np.cov(self.y, rowvar=False).reshape(k, k)
            hyper.__post_init__()
        self.hyper = hyper
        self.k, self.T = k, T
        self.m = k * (k + 1) // 2
        self.p, self.n_states, self.P = self.m, T, self.m + 2
        self.zeta_graph = ZetaGraph(
            (ZetaBlock("H", self.m), ZetaBlock("d", 1), ZetaBlock("nu", 1)),
            (("d", "H"), ("nu", "H"), ("nu", "d")),
        )
        self._Q0inv = np.linalg.inv(hyper.Q0)
        h = hyper
        self._const = (
            -0.5 * T * k * LOG_2PI
            - 0.5 * h.gamma0 * np.linalg.slogdet(h.Q0)[1]
            - 0.5 * h.gamma0 * k * LOG_2
            - multigammaln(0.5 * h.gamma0, k)
            + h.alpha0 * np.log(h.beta0)
            - gammaln(h.alpha0)
        )
        self._eig0 = sym_eigen(h.Sigma0)

    def unpack(self, theta) -> WishartTheta:
        return wishart_unpack(theta, self.k, self.T)

    def _prep(self, theta):
        par = self.unpack(theta)
        k, T = self.k, self.T
        Ik = np.eye(k)
        d, nu = par.d, par.nu
        Cinv = np.stack([solve_triangular(C, Ik, lower=True) for C in par.C])
        Sinv = np.transpose(Cinv, (0, 2, 1)) @ Cinv  # Sigma_t^{-1}, t = 1..T
        logdetSig = 2.0 * np.sum(np.log(np.diagonal(par.C, axis1=1, axis2=2)), axis=1)
        if not np.all(np.isfinite(logdetSig)):
            raise np.linalg.LinAlgError("degenerate Cholesky factor")
        eigs = [self._eig0] + [sym_eigen(par.C[t] @ par.C[t].T) for t in range(T)]
        Hinv = solve_triangular(par.H, Ik, lower=True)
        logdetH = float(np.sum(np.log(np.diag(par.H))))
        # S_{t-1} for t = 1..T (built from Sigma_0..Sigma_{T-1}) and its inverse
        S, S_inv, logdetS = [], [], []
        for t in range(T):
            e = eigs[t]
            Pm, lam = e.vectors, e.values
            S.append(par.H @ ((Pm * lam ** (-d)) @ Pm.T) @ par.H.T / nu)
            S_inv.append(nu * Hinv.T @ ((Pm * lam**d) @ Pm.T) @ Hinv)
            logdetS.append(-k * np.log(nu) + 2.0 * logdetH - d * np.sum(np.log(lam)))
        return par, Sinv, logdetSig, eigs, Hinv, logdetH, S, S_inv, np.array(logdetS)

    def log_h(self, theta) -> float:
        par, Sinv, logdetSig, _, Hinv, logdetH, _, S_inv, logdetS = self._prep(theta)
        h, k, T = self.hyper, self.k, self.T
        d, nu = par.d, par.nu
        out = self._const
        # Jacobians of the reparametrization
        for C in par.C:
            sign, ld = np.linalg.slogdet(chol_jacobian(C))
            if sign == 0 or not np.isfinite(ld):
                raise np.linalg.LinAlgError("non-finite Jacobian determinant")
            out += ld + np.sum(np.log(np.diag(C)))
        sign, ld = np.linalg.slogdet(chol_jacobian(par.H))
        if sign == 0 or not np.isfinite(ld):
            raise np.linalg.LinAlgError("non-finite Jacobian determinant")
        out += ld + logdetH + np.log(nu - k) + np.log(d) + np.log1p(-d)
        # priors: A^{-1} ~ Wishart(gamma0, Q0), d ~ U(0,1), nu - k ~ Gamma(alpha0, beta0)
        Ainv = Hinv.T @ Hinv
        out += -0.5 * (h.gamma0 + k + 1) * 2.0 * logdetH - 0.5 * np.sum(self._Q0inv * Ainv)
        out += (h.alpha0 - 1.0) * np.log(nu - k) - h.beta0 * (nu - k)
        # inverse-Wishart transitions and Gaussian likelihood
        out += T * (-0.5 * nu * k * LOG_2 - multigammaln(0.5 * nu, k))
        for t in range(T):
            out += -0.5 * nu * logdetS[t] - 0.5 * (nu + k + 1) * logdetSig[t] - 0.5 * np.sum(S_inv[t] * Sinv[t])
            out += -0.5 * logdetSig[t] - 0.5 * self.y[t] @ Sinv[t] @ self.y[t]
        return float(out)

    def grad_log_h(self, theta) -> np.ndarray:
        par, Sinv, logdetSig, eigs, Hinv, logdetH, S, S_inv, logdetS = self._prep(theta)
        h, k, T, m = self.hyper, self.k, self.T, self.m
        d, nu = par.d, par.nu
        H = par.H
        jac_diag = np.zeros((k, k))
        jac_diag[np.diag_indices(k)] = np.arange(k, 0, -1) + 1.0  # T_t1 closed form plus T_t2
        jac_vech = vech(jac_diag)

        # G_S[t]: gradient of log p(Sigma_{t+1} | nu, S_t) wrt S_t (S_t indexed from 0)
        G_S = [-0.5 * nu * S_inv[t] + 0.5 * S_inv[t] @ Sinv[t] @ S_inv[t] for t in range(T)]

        out = np.empty(wishart_dim(k, T))
        for t in range(T):
            Si = Sinv[t]
            G = -0.5 * (nu + k + 1) * Si + 0.5 * Si @ S_inv[t] @ Si  # T_t3
            G += -0.5 * Si + 0.5 * np.outer(Si @ self.y[t], Si @ self.y[t])  # T_t5
            if t < T - 1:  # T_t4: Sigma_t enters S_t, which drives Sigma_{t+1}
                M = H.T @ G_S[t + 1] @ H / nu
                J = d_matrix_power_neg_d(eigs[t + 1], d)
                G += _sym((J.T @ M.reshape(-1, order="F")).reshape(k, k, order="F"))
            out[t * m : (t + 1) * m] = jac_vech + _lower_chain(G, par.C[t])

        # H: T_H1 (prior on A), T_H2 (transitions), T_H3 + T_H4 (Jacobians)
        Ainv = Hinv.T @ Hinv
        G_A = -0.5 * (h.gamma0 + k + 1) * Ainv + 0.5 * Ainv @ self._Q0inv @ Ainv
        g_H = _lower_chain(G_A, H) + jac_vech
        GH = np.zeros((k, k))
        for t in range(T):
            Pm, lam = eigs[t].vectors, eigs[t].values
            X = (Pm * lam ** (-d)) @ Pm.T
            GH += (2.0 / nu) * G_S[t] @ H @ X
        GH = np.tril(GH)
        GH[np.diag_indices(k)] *= np.diag(H)
        g_H += vech(GH)
        out[T * m : (T + 1) * m] = g_H

        # d': T_d1 + T_d3
        gd = 0.0
        for t in range(T):
            Pm, lam = eigs[t].vectors, eigs[t].values
            dS = -(H @ ((Pm * (np.log(lam) * lam ** (-d))) @ Pm.T) @ H.T) / nu
            gd += np.sum(G_S[t] * dS)
        out[-2] = (1.0 - 2.0 * d) + gd * d * (1.0 - d)

        # nu': T_nu1 + T_nu2 + T_nu3
        i = np.arange(1, k + 1)
        tnu3 = -0.5 * T * k * LOG_2 - 0.5 * T * np.sum(digamma(0.5 * (nu + 1 - i)))
        for t in range(T):
            tnu3 -= -0.5 * k + 0.5 * (logdetS[t] + logdetSig[t]) + 0.5 * np.sum(S_inv[t] * Sinv[t]) / nu
        out[-1] = 1.0 + (h.alpha0 - 1.0) - h.beta0 * (nu - k) + (nu - k) * tnu3
        return out

    def default_theta(self) -> np.ndarray:
        """Every Sigma_t at Sigma_0, d = 1/2, nu = k + 5 and A = Sigma_0^{-1/2}.

        Repeated eigenvalues of Sigma_0 are split by a small diagonal
        spread, since the eigenvector derivative needs distinct eigenvalues.
        """
        k, T = self.k, self.T
        S0 = self.hyper.Sigma0
        e = self._eig0
        if k > 1 and np.min(-np.diff(e.values)) < 1e-3 * e.values[0]:
            S0 = S0 + np.diag(np.linspace(0.0, 0.05, k)) * e.values[0]
            e = sym_eigen(S0)
        C0 = np.linalg.cholesky(S0)
        A = (e.vectors * e.values**-0.5) @ e.vectors.T
        par = WishartTheta(np.repeat(C0[None], T, axis=0), np.linalg.cholesky(_sym(A)), 0.5, k + 5.0)
        return wishart_pack(par)


def simulate_wishart(
    k: int,
    T: int,
    H: np.ndarray,
    d: float,
    nu: float,
    Sigma0: np.ndarray,
    seed: int | np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (y, Sigma) with y of shape (T, k) and Sigma of shape (T, k, k)."""
    if nu <= k:
        raise ValueError("nu must exceed k")
    rng = np.random.default_rng(seed)
    H = np.asarray(H, dtype=float)
    Sig = np.asarray(Sigma0, dtype=float)
    y = np.empty((T, k))
    out = np.empty((T, k, k))
    for t in range(T):
        e = sym_eigen(Sig)
        S = H @ ((e.vectors * e.values ** (-d)) @ e.vectors.T) @ H.T / nu
        Sig_inv = np.atleast_2d(wishart(df=nu, scale=_sym(S)).rvs(random_state=rng))
        Sig = _sym(np.linalg.inv(Sig_inv))
        out[t] = Sig
        y[t] = rng.multivariate_normal(np.zeros(k), Sig)
    return y, out


def ar1_prefilter(series: np.ndarray, return_coef: bool = False):
    """Residuals (T-1, k) of per-column least-squares AR(1) fits with intercept."""
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 3:
        raise ValueError("need at least 3 observations")
    res = np.empty((x.shape[0] - 1, x.shape[1]))
    coef = np.empty((x.shape[1], 2))
    for j in range(x.shape[1]):
        lag, cur = x[:-1, j], x[1:, j]
        if np.ptp(lag) == 0:
            raise ValueError(f"column {j} is constant")
        X = np.column_stack([np.ones_like(lag), lag])
        b = np.linalg.lstsq(X, cur, rcond=None)[0]
        coef[j] = b
        res[:, j] = cur - X @ b
    return (res, coef) if return_coef else res
