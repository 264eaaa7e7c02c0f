"""Linear-Gaussian state space model with exact Kalman inference.

States ``x_1..x_T`` follow ``x_1 ~ N(m0, P0)``, ``x_t = F x_{t-1} + w_t`` with
``w_t ~ N(0, Q)``, and are observed as ``y_t = G x_t + v_t`` with
``v_t ~ N(0, R)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .base import ModelSpec

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class LGSSM:
    F: np.ndarray
    Q: np.ndarray
    G: np.ndarray
    R: np.ndarray
    m0: np.ndarray
    P0: np.ndarray

    def __post_init__(self) -> None:
        for name in ("F", "Q", "G", "R", "P0"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        self.m0 = np.atleast_1d(np.asarray(self.m0, dtype=float))
        p, m = self.F.shape[0], self.G.shape[0]
        if (
            self.F.shape != (p, p)
            or self.Q.shape != (p, p)
            or self.G.shape != (m, p)
            or self.R.shape != (m, m)
            or self.m0.shape != (p,)
            or self.P0.shape != (p, p)
        ):
            raise ValueError("inconsistent LGSSM dimensions")
        for name in ("Q", "R", "P0"):
            M = getattr(self, name)
            if not np.allclose(M, M.T) or np.linalg.eigvalsh(M).min() <= 0:
                raise ValueError(f"{name} must be symmetric positive definite")

    @property
    def p(self) -> int:
        return self.F.shape[0]

    @property
    def m(self) -> int:
        return self.G.shape[0]

    def simulate(self, T: int, rng: np.random.Generator | int | None = None) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(rng)
        x = np.empty((T, self.p))
        x[0] = rng.multivariate_normal(self.m0, self.P0)
        for t in range(1, T):
            x[t] = self.F @ x[t - 1] + rng.multivariate_normal(np.zeros(self.p), self.Q)
        y = x @ self.G.T + rng.multivariate_normal(np.zeros(self.m), self.R, size=T)
        return x, y


def kalman_filter(model: LGSSM, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Filtered means (T, p), covariances (T, p, p) and the exact log evidence."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    T = y.shape[0]
    F, Q, G, R = model.F, model.Q, model.G, model.R
    means = np.empty((T, model.p))
    covs = np.empty((T, model.p, model.p))
    m, P = model.m0, model.P0
    loglik = 0.0
    for t in range(T):
        if t > 0:
            m = F @ m
            P = F @ P @ F.T + Q
        S = G @ P @ G.T + R
        try:
            cf = cho_factor(S, lower=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"innovation covariance not positive definite at t={t}") from exc
        e = y[t] - G @ m
        loglik -= 0.5 * (model.m * LOG_2PI + 2.0 * np.sum(np.log(np.diag(cf[0]))) + e @ cho_solve(cf, e))
        K = cho_solve(cf, G @ P).T
        m = m + K @ e
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
        means[t], covs[t] = m, P
    return means, covs, float(loglik)


def kalman_smoother(model: LGSSM, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rauch-Tung-Striebel smoothed means (T, p) and covariances (T, p, p)."""
    fm, fP, _ = kalman_filter(model, y)
    T = fm.shape[0]
    F, Q = model.F, model.Q
    sm, sP = fm.copy(), fP.copy()
    for t in range(T - 2, -1, -1):
        Pp = F @ fP[t] @ F.T + Q
        J = np.linalg.solve(Pp, F @ fP[t]).T
        sm[t] = fm[t] + J @ (sm[t + 1] - F @ fm[t])
        sP[t] = fP[t] + J @ (sP[t + 1] - Pp) @ J.T
        sP[t] = 0.5 * (sP[t] + sP[t].T)
    return sm, sP


class LGSSMTarget(ModelSpec):
    """log p(x, y) for fixed system matrices; theta holds x_1..x_T (no static part)."""

    def __init__(self, model: LGSSM, y: np.ndarray):
        self.model = model
        self.y = np.atleast_2d(np.asarray(y, dtype=float))
        self.p, self.n_states, self.P = model.p, self.y.shape[0], 0
        self._Qi = np.linalg.inv(model.Q)
        self._Ri = np.linalg.inv(model.R)
        self._P0i = np.linalg.inv(model.P0)
        T = self.n_states
        self._const = -0.5 * (
            np.linalg.slogdet(2 * np.pi * model.P0)[1]
            + (T - 1) * np.linalg.slogdet(2 * np.pi * model.Q)[1]
            + T * np.linalg.slogdet(2 * np.pi * model.R)[1]
        )

    def _resid(self, theta):
        X = np.asarray(theta, dtype=float).reshape(self.n_states, self.p)
        e0 = X[0] - self.model.m0
        ew = X[1:] - X[:-1] @ self.model.F.T
        ev = self.y - X @ self.model.G.T
        return X, e0, ew, ev

    def log_h(self, theta):
        _, e0, ew, ev = self._resid(theta)
        quad = e0 @ self._P0i @ e0 + np.sum((ew @ self._Qi) * ew) + np.sum((ev @ self._Ri) * ev)
        return float(self._const - 0.5 * quad)

    def grad_log_h(self, theta):
        _, e0, ew, ev = self._resid(theta)
        gw = ew @ self._Qi
        g = (ev @ self._Ri) @ self.model.G
        g[0] -= self._P0i @ e0
        g[1:] -= gw
        g[:-1] += gw @ self.model.F
        return g.ravel()

    def default_theta(self) -> np.ndarray:
        return np.zeros(self.dim)

    def posterior(self) -> tuple[np.ndarray, np.ndarray]:
        """Smoothed means and marginal covariances."""
        return kalman_smoother(self.model, self.y)

    def log_evidence(self) -> float:
        return kalman_filter(self.model, self.y)[2]
