"""Stochastic gradient ascent on the ELBO with ADADELTA step sizes."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from dynfactorvb.varfamily import BLOCKS, FactorLayout, NoiseDraw, VariationalParams, mean_gradient, workspace
from dynfactorvb.varfamily.family import elbo_samples

TRACE_COLUMNS = ("iteration", "elbo", "grad_norm_mu", "grad_norm_B", "grad_norm_delta", "grad_norm_C", "seconds")
DIVERGENCE_FLOOR = -1e12


class FitDivergence(RuntimeError):
    """Raised when the ELBO or a parameter leaves the finite range; keeps the last lambda."""

    def __init__(self, message: str, iteration: int, lam: VariationalParams):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
        self.lam = lam


@dataclass
class FitConfig:
    iterations: int = 1000
    samples: int = 1
    estimator: str = "roeder"
    stride: int = 10
    final_samples: int = 100
    seed: int = 0
    rho: float = 0.95
    eps: float = 1e-6
    monitor_samples: int = 1
    shared_noise: bool = False
    threads: int | None = None

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.samples < 1 or self.stride < 1 or self.monitor_samples < 1:
            raise ValueError("iterations, samples, stride and monitor_samples must be >= 1")
        if self.estimator not in ("standard", "roeder"):
            raise ValueError("estimator must be 'standard' or 'roeder'")
        if not 0.0 < self.rho < 1.0 or self.eps <= 0.0:
            raise ValueError("ADADELTA needs 0 < rho < 1 and eps > 0")


@dataclass
class AdadeltaState:
    """Running averages E[g^2] and E[dx^2], one array per parameter array."""

    rho: float = 0.95
    eps: float = 1e-6
    eg2: list[np.ndarray] = field(default_factory=list)
    edx2: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def like(cls, arrays: list[np.ndarray], rho: float = 0.95, eps: float = 1e-6) -> "AdadeltaState":
        return cls(rho, eps, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adadelta_step(g: list[np.ndarray], state: AdadeltaState) -> list[np.ndarray]:
    """ADADELTA increments (to be added for ascent); updates ``state`` in place."""
    if len(g) != len(state.eg2):
        raise ValueError("gradient and state shapes differ")
    rho, eps = state.rho, state.eps
    out = []
    for gi, eg2, edx2 in zip(g, state.eg2, state.edx2):
        eg2 *= rho
        eg2 += (1.0 - rho) * gi * gi
        dx = np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * gi
        edx2 *= rho
        edx2 += (1.0 - rho) * dx * dx
        out.append(dx)
    return out


@dataclass
class ELBOTrace:
    rows: list[tuple] = field(default_factory=list)

    def append(self, iteration: int, elbo: float, norms: dict[str, float], seconds: float) -> None:
        if self.rows and iteration <= self.rows[-1][0]:
            raise ValueError("trace iterations must increase")
        self.rows.append((iteration, elbo, norms["mu"], norms["B"], norms["delta"], norms["C"], seconds))

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def iterations(self) -> np.ndarray:
        return np.array([r[0] for r in self.rows], dtype=int)

    @property
    def elbo(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def as_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float).reshape(-1, len(TRACE_COLUMNS))


def fit(
    lam0: VariationalParams,
    layout: FactorLayout,
    model,
    config: FitConfig,
    callback=None,
) -> tuple[VariationalParams, ELBOTrace]:
    """Run ``config.iterations`` sweeps of the mu, B, delta, C updates.

    Each sub-step evaluates its block gradient at the partially updated
    lambda with its own noise draw (or one draw per sweep when
    ``shared_noise`` is set). The ELBO is monitored on iterations
    1, 1 + stride, ... with an independent random stream.
    """
    lam0.check(layout)
    lam = lam0.copy()
    grad_rng, mon_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    states = {b: AdadeltaState.like(lam.block_arrays(b), config.rho, config.eps) for b in BLOCKS}
    norms = {b: 0.0 for b in BLOCKS}
    trace = ELBOTrace()
    start = time.perf_counter()
    for m in range(1, config.iterations + 1):
        shared = [NoiseDraw.draw(layout, grad_rng) for _ in range(config.samples)] if config.shared_noise else None
        for block in BLOCKS:
            draws = shared or [NoiseDraw.draw(layout, grad_rng) for _ in range(config.samples)]
            try:
                ws = workspace(lam, layout)
                g = mean_gradient(lam, layout, model, draws, config.estimator, (block,), ws, config.threads)
            except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
                raise FitDivergence(f"gradient evaluation failed in block {block}: {exc}", m, lam) from exc
            garrs = g.block_arrays(block)
            if not all(np.all(np.isfinite(a)) for a in garrs):
                raise FitDivergence(f"non-finite gradient in block {block}", m, lam)
            norms[block] = g.block_norm(block)
            for target, step in zip(lam.block_arrays(block), adadelta_step(garrs, states[block])):
                target += step
            if not all(np.all(np.isfinite(a)) for a in lam.block_arrays(block)):
                raise FitDivergence(f"non-finite parameters in block {block}", m, lam)
        if (m - 1) % config.stride == 0:
            try:
                vals = elbo_samples(lam, layout, model, config.monitor_samples, mon_rng)
            except (np.linalg.LinAlgError, FloatingPointError) as exc:
                raise FitDivergence(f"ELBO evaluation failed: {exc}", m, lam) from exc
            elbo = float(np.mean(vals))
            if not np.isfinite(elbo) or elbo < DIVERGENCE_FLOOR:
                raise FitDivergence(f"ELBO diverged ({elbo})", m, lam)
            trace.append(m, elbo, norms, time.perf_counter() - start)
            if callback is not None:
                callback(m, lam, trace)
    return lam, trace


def final_elbo(
    lam: VariationalParams,
    layout: FactorLayout,
    model,
    S_final: int = 100,
    rng: np.random.Generator | int | None = None,
) -> tuple[float, tuple[float, float]]:
    """Mean of S_final single-draw ELBO values with a normal 95% interval."""
    if S_final < 2:
        raise ValueError("S_final must be >= 2")
    rng = np.random.default_rng(rng)
    vals = elbo_samples(lam, layout, model, S_final, rng)
    mean = float(vals.mean())
    half = 1.96 * float(vals.std(ddof=1)) / np.sqrt(S_final)
    return mean, (mean - half, mean + half)


def theil_sen_slope(x: np.ndarray, y: np.ndarray) -> float:
    """Median of pairwise slopes."""
    from scipy.stats import theilslopes

    return float(theilslopes(y, x)[0])
