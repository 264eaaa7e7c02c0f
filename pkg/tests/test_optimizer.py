import math

import numpy as np
import pytest

import oracles
from dynfactorvb.models import GaussianToy, StandardNormal, self_target
from dynfactorvb.optimizer import (
    AdadeltaState,
    FitConfig,
    FitDivergence,
    adadelta_step,
    final_elbo,
    fit,
    theil_sen_slope,
)
from dynfactorvb.varfamily import FactorLayout, build_C2_mask, ZetaBlock, ZetaGraph


def test_adadelta_zero_gradient():
    st = AdadeltaState.like([np.zeros(3)])
    assert np.all(adadelta_step([np.zeros(3)], st)[0] == 0)


def test_adadelta_first_step_magnitude():
    rho, eps, g = 0.95, 1e-6, np.array([0.3, -2.0])
    st = AdadeltaState.like([g], rho, eps)
    dx = adadelta_step([g], st)[0]
    np.testing.assert_allclose(np.abs(dx), np.sqrt(eps) / np.sqrt((1 - rho) * g**2 + eps) * np.abs(g))


def test_adadelta_constant_gradient_recurrence():
    # Iterating the scalar recurrence by hand: once E[g^2] ~ g^2, each step
    # gives E[dx^2] <- E[dx^2] + (1 - rho) eps, so |dx| ~ sqrt(k (1 - rho) eps).
    rho, eps, g = 0.95, 1e-6, 0.5
    st = AdadeltaState.like([np.array([g])], rho, eps)
    eg2 = edx2 = 0.0
    for k in range(1, 20001):
        step = adadelta_step([np.array([g])], st)[0][0]
        eg2 = rho * eg2 + (1 - rho) * g * g
        ref = math.sqrt(edx2 + eps) / math.sqrt(eg2 + eps) * g
        edx2 = rho * edx2 + (1 - rho) * ref * ref
        assert step == pytest.approx(ref, rel=1e-12)
    assert step == pytest.approx(math.sqrt(k * (1 - rho) * eps), rel=0.05)


def test_fit_config_validation():
    with pytest.raises(ValueError):
        FitConfig(iterations=0)
    with pytest.raises(ValueError):
        FitConfig(estimator="adam")


def _toy():
    model = GaussianToy.random(2, 1, 0, seed=0)
    layout = model.layout(1, "HD-SM")
    return model, layout, model.initial_params(layout, delta=1.0)


@pytest.mark.parametrize(
    "layout",
    [
        FactorLayout(3, 2, 3, 2),
        FactorLayout(3, 2, 3, 2, mean_mode="HD-SM"),
        FactorLayout(3, 2, 3, 2, structure="LR-SA", p2=2, q2=2, n2=2),
    ],
)
def test_self_target_roeder_leaves_lambda_fixed(layout):
    mask = build_C2_mask(ZetaGraph((ZetaBlock("z", 2, dense=True),)), 2)
    lam = oracles.random_params(layout, mask, np.random.default_rng(0))
    # zero mean keeps theta - M mu free of rounding, so the gradient is exactly zero
    lam.mu[:] = 0.0
    model = self_target(lam, layout)
    out, trace = fit(lam, layout, model, FitConfig(iterations=500, stride=7, seed=3))
    assert np.max(np.abs(out.flatten() - lam.flatten())) <= 1e-8
    assert len(trace) == math.ceil(500 / 7)
    assert np.allclose(trace.elbo, 0.0, atol=1e-9)


def test_self_target_first_steps_are_negligible():
    layout = FactorLayout(3, 2, 3, 2)
    mask = build_C2_mask(ZetaGraph((ZetaBlock("z", 2, dense=True),)), 2)
    lam = oracles.random_params(layout, mask, np.random.default_rng(0))
    out, _ = fit(lam, layout, self_target(lam, layout), FitConfig(iterations=1, seed=3))
    assert np.max(np.abs(out.flatten() - lam.flatten())) <= 1e-8


@pytest.fixture(scope="module")
def fitted_toy():
    model, layout, lam0 = _toy()
    lam, trace = fit(lam0, layout, model, FitConfig(iterations=5000, stride=50, seed=1))
    return model, layout, lam, trace


def test_toy_fit_reaches_evidence(fitted_toy):
    model, layout, lam, trace = fitted_toy
    est, (lo, hi) = final_elbo(lam, layout, model, 100, rng=0)
    assert abs(est - model.log_evidence()) < 0.05
    half = len(trace) // 2
    assert theil_sen_slope(trace.iterations[:half], trace.elbo[:half]) > 0
    lam.check(layout)


def test_same_seed_same_trace():
    model, layout, lam0 = _toy()
    cfg = FitConfig(iterations=300, stride=10, seed=4)
    a, ta = fit(lam0, layout, model, cfg)
    b, tb = fit(lam0, layout, model, cfg)
    np.testing.assert_array_equal(a.flatten(), b.flatten())
    np.testing.assert_array_equal(ta.as_array()[:, :6], tb.as_array()[:, :6])


def test_shared_noise_and_standard_estimator_run():
    model, layout, lam0 = _toy()
    for cfg in (FitConfig(iterations=50, shared_noise=True), FitConfig(iterations=50, estimator="standard", samples=3)):
        lam, trace = fit(lam0, layout, model, cfg)
        assert len(trace) == 5
        lam.check(layout)


def test_masks_hold_during_fit():
    model = GaussianToy.random(3, 4, 2, seed=2)
    layout = model.layout(2)
    lam0 = model.initial_params(layout)
    seen = []

    def check(m, lam, trace):
        lam.check(layout)
        seen.append(m)

    fit(lam0, layout, model, FitConfig(iterations=100, stride=1, seed=0), callback=check)
    assert len(seen) == 100


def test_divergence_guard():
    class Exploding(StandardNormal):
        def log_h(self, theta):
            return -1e13

        def grad_log_h(self, theta):
            return np.full(theta.size, np.nan)

    model = Exploding(2)
    layout = model.layout(1)
    with pytest.raises(FitDivergence) as info:
        fit(model.initial_params(layout), layout, model, FitConfig(iterations=5))
    assert info.value.iteration == 1
    assert info.value.lam is not None


def test_final_elbo_self_target():
    layout = FactorLayout(2, 1, 2, 1)
    mask = build_C2_mask(ZetaGraph((ZetaBlock("z", 1),)), 1)
    lam = oracles.random_params(layout, mask, np.random.default_rng(0))
    est, (lo, hi) = final_elbo(lam, layout, self_target(lam, layout), 100, rng=0)
    assert abs(est) < 1e-9 and abs(lo) < 1e-9 and abs(hi) < 1e-9
    with pytest.raises(ValueError):
        final_elbo(lam, layout, self_target(lam, layout), 1)


def test_final_elbo_interval_covers_evidence(fitted_toy):
    model, layout, lam, _ = fitted_toy
    evidence = model.log_evidence()
    hits = sum(lo <= evidence <= hi for _, (lo, hi) in (final_elbo(lam, layout, model, 100, rng=i) for i in range(100)))
    assert hits >= 90
