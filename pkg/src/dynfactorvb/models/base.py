"""Plug-in contract for target models, plus reference targets used in testing."""

from __future__ import annotations

import numpy as np

from dynfactorvb.varfamily import (
    FactorLayout,
    VariationalParams,
    ZetaBlock,
    ZetaGraph,
    build_C2_mask,
    log_q,
    workspace,
)
from dynfactorvb.varfamily.family import _mean


class ModelSpec:
    """Unnormalized log posterior ``log h(theta) = log p(theta) + log p(y | theta)``.

    Subclasses set ``p``, ``n_states``, ``P``, ``t0`` and ``zeta_graph`` and
    implement :meth:`log_h` and :meth:`grad_log_h`. Theta stores the states
    time-major (``n_states`` blocks of ``p``) followed by the ``P`` static
    parameters in ``zeta_graph`` order. Evaluation must not mutate the model.
    """

    p: int
    n_states: int
    P: int
    t0: bool = False
    zeta_graph: ZetaGraph = ZetaGraph()

    @property
    def dim(self) -> int:
        return self.p * self.n_states + self.P

    def log_h(self, theta: np.ndarray) -> float:
        raise NotImplementedError

    def grad_log_h(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def layout(self, q: int, mean_mode: str = "LD-SM", structure: str = "LR-S") -> FactorLayout:
        if structure != "LR-S":
            raise ValueError(f"{type(self).__name__} supports only the LR-S structure")
        return FactorLayout(self.p, q, self.n_states, self.P, mean_mode, structure, t0=self.t0)

    def c2_mask(self, layout: FactorLayout | None = None) -> tuple[np.ndarray, np.ndarray]:
        return build_C2_mask(self.zeta_graph, self.P)

    def default_theta(self) -> np.ndarray:
        """A point where log h is finite; used to initialize the variational mean."""
        return np.zeros(self.dim)

    def initial_params(self, layout: FactorLayout, delta: float = 0.1) -> VariationalParams:
        """B and C unit diagonals, mean matched to :meth:`default_theta`."""
        theta0 = self.default_theta()
        if layout.hd:
            mu = theta0.copy()
        else:
            # least-squares factor means under B = [I; 0]
            mu = np.zeros(layout.dim_mu)
            for c, idx, off in zip(layout.chains, layout.z_index, layout.x_offsets):
                X = theta0[off : off + c.n * c.p].reshape(c.n, c.p)
                mu[idx] = X[:, : c.q]
            mu[layout.n_z :] = theta0[layout.n_x :]
        return VariationalParams.initial(layout, self.c2_mask(layout), mu=mu, delta=delta)


def _richardson(f, theta, v, h):
    def cd(step):
        return (f(theta + step * v) - f(theta - step * v)) / (2 * step)

    return (4.0 * cd(h / 2) - cd(h)) / 3.0


def check_gradient(
    model: ModelSpec,
    theta0: np.ndarray,
    directions: int = 20,
    h: float = 1e-4,
    rng: np.random.Generator | int | None = 0,
    floor: float = 1e-8,
) -> float:
    """Largest relative error between analytic and finite-difference directional derivatives.

    Uses Richardson-extrapolated central differences along random unit
    directions; the error is ``|fd - an| / max(|fd|, |an|, floor)``.
    """
    rng = np.random.default_rng(rng)
    theta0 = np.asarray(theta0, dtype=float)
    f0 = model.log_h(theta0)
    if not np.isfinite(f0):
        raise FloatingPointError("log h is not finite at the base point")
    g = np.asarray(model.grad_log_h(theta0), dtype=float)
    if g.shape != theta0.shape:
        raise ValueError("gradient length differs from theta length")
    worst = 0.0
    for _ in range(directions):
        v = rng.standard_normal(theta0.size)
        v /= np.linalg.norm(v)
        fd = _richardson(model.log_h, theta0, v, h)
        if not np.isfinite(fd):
            raise FloatingPointError("non-finite finite-difference value")
        an = float(g @ v)
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
    return worst


class StandardNormal(ModelSpec):
    """log h = log N(theta | 0, I)."""

    def __init__(self, p: int, n_states: int = 1, P: int = 0):
        self.p, self.n_states, self.P = p, n_states, P
        self.zeta_graph = ZetaGraph((ZetaBlock("zeta", P),)) if P else ZetaGraph()

    def log_h(self, theta):
        return float(-0.5 * theta @ theta - 0.5 * theta.size * np.log(2 * np.pi))

    def grad_log_h(self, theta):
        return -np.asarray(theta, dtype=float)


class SelfTarget(ModelSpec):
    """Target equal to q_lambda itself, up to an additive constant."""

    def __init__(self, lam: VariationalParams, layout: FactorLayout, const: float = 0.0, graph: ZetaGraph | None = None):
        self.lam = lam.copy()
        self._layout = layout
        self.const = const
        self.p, self.n_states, self.P = layout.p, layout.n_states, layout.P
        self._ws = workspace(self.lam, layout)
        self.zeta_graph = graph or ZetaGraph()
        self._mask = (self.lam.c2_rows, self.lam.c2_cols)

    @property
    def dim(self) -> int:
        return self._layout.dim_theta

    def layout(self, q=None, mean_mode=None, structure=None) -> FactorLayout:
        return self._layout

    def c2_mask(self, layout=None):
        return self._mask

    def log_h(self, theta):
        return log_q(self.lam, self._layout, theta, self._ws) + self.const

    def grad_log_h(self, theta):
        lay, ws = self._layout, self._ws
        x = np.asarray(theta, dtype=float) - _mean(self.lam, lay)
        a1 = ws.V1_solve(x[: lay.n_x])
        x2 = x[lay.n_x :]
        a2 = ws.C2.matvec(ws.C2.rmatvec(x2)) if lay.P else np.zeros(0)
        return -np.concatenate([a1, a2])


def self_target(lam: VariationalParams, layout: FactorLayout, const: float = 0.0) -> SelfTarget:
    return SelfTarget(lam, layout, const)


class GaussianToy(ModelSpec):
    """Conjugate Gaussian target: theta ~ N(0, S0), y | theta ~ N(G theta, R).

    The evidence and posterior are available in closed form.
    """

    def __init__(self, p: int, n_states: int, P: int, S0, G, R, y):
        self.p, self.n_states, self.P = p, n_states, P
        self.S0 = np.atleast_2d(np.asarray(S0, dtype=float))
        self.G = np.atleast_2d(np.asarray(G, dtype=float))
        self.R = np.atleast_2d(np.asarray(R, dtype=float))
        self.y = np.asarray(y, dtype=float)
        d = p * n_states + P
        if self.S0.shape != (d, d) or self.G.shape[1] != d or self.R.shape != (self.y.size,) * 2:
            raise ValueError("inconsistent toy model dimensions")
        self.S0inv = np.linalg.inv(self.S0)
        self.Rinv = np.linalg.inv(self.R)
        self._c0 = -0.5 * (np.linalg.slogdet(2 * np.pi * self.S0)[1] + np.linalg.slogdet(2 * np.pi * self.R)[1])
        self.zeta_graph = ZetaGraph((ZetaBlock("zeta", P, dense=True),)) if P else ZetaGraph()

    @classmethod
    def random(cls, p: int, n_states: int, P: int, m: int | None = None, seed: int = 0) -> "GaussianToy":
        rng = np.random.default_rng(seed)
        d = p * n_states + P
        m = d if m is None else m
        A = rng.standard_normal((d, d))
        S0 = A @ A.T / d + np.eye(d)
        G = rng.standard_normal((m, d))
        R = 0.5 * np.eye(m)
        y = rng.multivariate_normal(np.zeros(m), G @ S0 @ G.T + R)
        return cls(p, n_states, P, S0, G, R, y)

    def log_h(self, theta):
        theta = np.asarray(theta, dtype=float)
        e = self.y - self.G @ theta
        return float(self._c0 - 0.5 * theta @ self.S0inv @ theta - 0.5 * e @ self.Rinv @ e)

    def grad_log_h(self, theta):
        theta = np.asarray(theta, dtype=float)
        return -self.S0inv @ theta + self.G.T @ (self.Rinv @ (self.y - self.G @ theta))

    def log_evidence(self) -> float:
        Sy = self.G @ self.S0 @ self.G.T + self.R
        return float(-0.5 * (np.linalg.slogdet(2 * np.pi * Sy)[1] + self.y @ np.linalg.solve(Sy, self.y)))

    def posterior(self) -> tuple[np.ndarray, np.ndarray]:
        prec = self.S0inv + self.G.T @ self.Rinv @ self.G
        cov = np.linalg.inv(prec)
        return cov @ self.G.T @ self.Rinv @ self.y, cov
