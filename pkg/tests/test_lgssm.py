import numpy as np
import pytest
from scipy.stats import multivariate_normal

from dynfactorvb.models import LGSSM, LGSSMTarget, check_gradient, kalman_filter, kalman_smoother


def _random_model(p=2, m=2, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((p, p))
    F = 0.8 * A / np.max(np.abs(np.linalg.eigvals(A)))
    Q = 0.5 * np.eye(p) + 0.1 * np.ones((p, p))
    return LGSSM(F, Q, rng.standard_normal((m, p)), 0.3 * np.eye(m), rng.standard_normal(p), np.eye(p))


def _joint(model, T):
    """Dense mean and covariance of (x_1..x_T, y_1..y_T)."""
    p, m = model.p, model.m
    mean_x = np.empty((T, p))
    cov = np.zeros((T * p, T * p))
    mean_x[0] = model.m0
    cov[:p, :p] = model.P0
    for t in range(1, T):
        mean_x[t] = model.F @ mean_x[t - 1]
        prev = slice((t - 1) * p, t * p)
        cur = slice(t * p, (t + 1) * p)
        cov[cur, : t * p] = model.F @ cov[prev, : t * p]
        cov[: t * p, cur] = cov[cur, : t * p].T
        cov[cur, cur] = model.F @ cov[prev, prev] @ model.F.T + model.Q
    Gb = np.kron(np.eye(T), model.G)
    Sxy = cov @ Gb.T
    Syy = Gb @ cov @ Gb.T + np.kron(np.eye(T), model.R)
    return mean_x.ravel(), cov, Gb @ mean_x.ravel(), Sxy, Syy


@pytest.mark.parametrize("p,T", [(1, 1), (2, 3), (3, 5)])
def test_filter_evidence_matches_dense_joint(p, T):
    model = _random_model(p, 2, seed=p)
    _, y = model.simulate(T, rng=1)
    _, _, ll = kalman_filter(model, y)
    _, _, my, _, Syy = _joint(model, T)
    assert ll == pytest.approx(multivariate_normal(my, Syy).logpdf(y.ravel()), rel=1e-9)


def test_static_model_evidence():
    model = LGSSM([[0.0]], [[2.0]], [[1.0]], [[0.5]], [0.0], [[2.0]])
    y = np.array([[0.3], [-1.0], [2.0]])
    _, _, ll = kalman_filter(model, y)
    assert ll == pytest.approx(np.sum(multivariate_normal(0.0, 2.5).logpdf(y.ravel())), rel=1e-12)


def test_similarity_transform_invariance():
    model = _random_model(2, 2, seed=3)
    _, y = model.simulate(6, rng=2)
    S = np.array([[1.0, 0.4], [-0.2, 1.5]])
    Si = np.linalg.inv(S)
    other = LGSSM(S @ model.F @ Si, S @ model.Q @ S.T, model.G @ Si, model.R, S @ model.m0, S @ model.P0 @ S.T)
    assert kalman_filter(other, y)[2] == pytest.approx(kalman_filter(model, y)[2], rel=1e-10)


def test_smoother_matches_dense_conditioning():
    model = _random_model(2, 2, seed=4)
    T = 3
    _, y = model.simulate(T, rng=5)
    mx, Sxx, my, Sxy, Syy = _joint(model, T)
    post_mean = mx + Sxy @ np.linalg.solve(Syy, y.ravel() - my)
    post_cov = Sxx - Sxy @ np.linalg.solve(Syy, Sxy.T)
    sm, sP = kalman_smoother(model, y)
    np.testing.assert_allclose(sm.ravel(), post_mean, atol=1e-10)
    for t in range(T):
        np.testing.assert_allclose(sP[t], post_cov[2 * t : 2 * t + 2, 2 * t : 2 * t + 2], atol=1e-10)


def test_smoother_single_step_equals_filter_and_shrinks():
    model = _random_model(2, 2, seed=6)
    _, y1 = model.simulate(1, rng=0)
    fm, fP, _ = kalman_filter(model, y1)
    sm, sP = kalman_smoother(model, y1)
    np.testing.assert_array_equal(fm, sm)
    _, y = model.simulate(8, rng=0)
    fm, fP, _ = kalman_filter(model, y)
    _, sP = kalman_smoother(model, y)
    for t in range(8):
        assert np.linalg.eigvalsh(fP[t] - sP[t]).min() >= -1e-12


def test_posterior_precision_is_block_tridiagonal():
    model = _random_model(2, 2, seed=7)
    T = 5
    _, Sxx, _, Sxy, Syy = _joint(model, T)
    prec = np.linalg.inv(Sxx - Sxy @ np.linalg.solve(Syy, Sxy.T))
    for i in range(T):
        for j in range(T):
            if abs(i - j) > 1:
                assert np.max(np.abs(prec[2 * i : 2 * i + 2, 2 * j : 2 * j + 2])) < 1e-9


def test_target_matches_dense_and_gradient():
    model = _random_model(2, 2, seed=8)
    T = 4
    _, y = model.simulate(T, rng=3)
    tgt = LGSSMTarget(model, y)
    mx, Sxx, my, Sxy, Syy = _joint(model, T)
    x = np.random.default_rng(0).standard_normal(tgt.dim)
    dense = multivariate_normal(mx, Sxx).logpdf(x)
    resid = y.ravel() - np.kron(np.eye(T), model.G) @ x
    dense += multivariate_normal(np.zeros(2 * T), np.kron(np.eye(T), model.R)).logpdf(resid)
    assert tgt.log_h(x) == pytest.approx(dense, rel=1e-12)
    assert check_gradient(tgt, x) < 1e-7
    assert tgt.log_evidence() == pytest.approx(kalman_filter(model, y)[2])


def test_validation():
    with pytest.raises(ValueError):
        LGSSM(np.eye(2), -np.eye(2), np.eye(2), np.eye(2), np.zeros(2), np.eye(2))
    with pytest.raises(ValueError):
        LGSSM(np.eye(2), np.eye(3), np.eye(2), np.eye(2), np.zeros(2), np.eye(2))
