import numpy as np
import pytest

from dynfactorvb import matcalc as mc


def _sym(rng, k):
    A = rng.standard_normal((k, k))
    return A + A.T


def _spd(rng, k):
    A = rng.standard_normal((k, k))
    return A @ A.T + k * np.eye(k)


def test_vech_basic():
    assert mc.vech(np.array([[2.5]])).tolist() == [2.5]
    assert mc.vech(np.array([[1.0, 2.0], [2.0, 3.0]])).tolist() == [1.0, 2.0, 3.0]
    with pytest.raises(ValueError):
        mc.vech(np.ones((2, 3)))


def test_vech_unvech_roundtrip():
    rng = np.random.default_rng(0)
    for k in range(1, 7):
        A = _sym(rng, k)
        np.testing.assert_array_equal(mc.unvech(mc.vech(A), symmetric=True), A)


def test_elimination_duplication_identities():
    rng = np.random.default_rng(1)
    assert mc.elimination_matrix(1).toarray().tolist() == [[1.0]]
    assert mc.duplication_matrix(1).toarray().tolist() == [[1.0]]
    L2 = mc.elimination_matrix(2).toarray()
    # vec positions 1, 2, 4 (one-based) are kept
    assert [int(np.flatnonzero(r)[0]) for r in L2] == [0, 1, 3]
    for k in range(1, 7):
        L, D = mc.elimination_matrix(k), mc.duplication_matrix(k)
        A = _sym(rng, k)
        np.testing.assert_array_equal(L @ mc.vec(A), mc.vech(A))
        np.testing.assert_array_equal(D @ mc.vech(A), mc.vec(A))
        np.testing.assert_array_equal((L @ D).toarray(), np.eye(k * (k + 1) // 2))
        assert D.sum() == k * k
    with pytest.raises(ValueError):
        mc.elimination_matrix(0)


def test_commutation_matrix():
    rng = np.random.default_rng(2)
    assert mc.commutation_matrix(1, 1).toarray().tolist() == [[1.0]]
    K22 = mc.commutation_matrix(2, 2).toarray()
    np.testing.assert_array_equal(K22, np.eye(4)[[0, 2, 1, 3]])
    Z = rng.standard_normal((3, 2))
    np.testing.assert_array_equal(mc.commutation_matrix(3, 2) @ mc.vec(Z), mc.vec(Z.T))
    for r in range(1, 6):
        for s in range(1, 6):
            K = mc.commutation_matrix(r, s).toarray()
            assert np.all(K.sum(0) == 1) and np.all(K.sum(1) == 1)
            np.testing.assert_array_equal(mc.commutation_matrix(s, r).toarray() @ K, np.eye(r * s))


def _random_banded(rng, n, bw):
    ab = rng.standard_normal((bw + 1, n))
    ab[0] = rng.uniform(0.5, 2.0, n) * rng.choice([-1, 1], n)
    for d in range(1, bw + 1):
        ab[d, n - d :] = 0.0
    return mc.BandedLowerTriangular(n, bw, ab)


def test_banded_solve_transposed():
    rng = np.random.default_rng(3)
    w = rng.standard_normal(8)
    np.testing.assert_array_equal(mc.banded_solve_transposed(mc.BandedLowerTriangular.identity(8, 2), w), w)
    C = _random_banded(rng, 8, 2)
    dense = C.to_dense()
    assert np.all(np.triu(dense, 1) == 0) and np.all(np.tril(dense, -3) == 0)
    x = mc.banded_solve_transposed(C, w)
    np.testing.assert_allclose(x, np.linalg.solve(dense.T, w), rtol=1e-12)
    assert np.max(np.abs(dense.T @ x - w)) <= 1e-12 * np.max(np.abs(w))
    np.testing.assert_allclose(C.solve(w), np.linalg.solve(dense, w), rtol=1e-12)
    np.testing.assert_allclose(C.matvec(w), dense @ w, atol=1e-14)
    np.testing.assert_allclose(C.rmatvec(w), dense.T @ w, atol=1e-14)
    bad = C.values.copy()
    bad[0, 3] = 0.0
    with pytest.raises(np.linalg.LinAlgError):
        mc.BandedLowerTriangular(8, 2, bad).solve_transposed(w)


def test_sparse_lower_triangular():
    rng = np.random.default_rng(4)
    n = 6
    rows = [0, 1, 2, 3, 4, 5, 3, 5, 5]
    cols = [0, 1, 2, 3, 4, 5, 0, 1, 3]
    S = mc.SparseLowerTriangular(n, rows, cols, rng.uniform(1, 2, 9))
    dense = S.to_dense()
    w = rng.standard_normal(n)
    np.testing.assert_allclose(S.solve(w), np.linalg.solve(dense, w), rtol=1e-12)
    np.testing.assert_allclose(S.solve_transposed(w), np.linalg.solve(dense.T, w), rtol=1e-12)
    np.testing.assert_allclose(S.matvec(w), dense @ w)
    np.testing.assert_allclose(S.rmatvec(w), dense.T @ w)
    assert S.logabsdet() == pytest.approx(np.linalg.slogdet(dense)[1])
    with pytest.raises(ValueError):
        mc.SparseLowerTriangular(2, [0, 0], [0, 1])
    with pytest.raises(ValueError):
        mc.SparseLowerTriangular(2, [0], [0])


def test_woodbury_and_logdet():
    rng = np.random.default_rng(5)
    rhs = rng.standard_normal(10)
    psi = rng.uniform(0.5, 2, 10)
    np.testing.assert_allclose(mc.woodbury_solve(np.zeros((10, 2)), np.eye(2), psi, rhs), rhs / psi)
    assert mc.lowrank_logdet(np.zeros((10, 2)), np.eye(2), psi) == pytest.approx(np.log(psi).sum())
    assert mc.lowrank_logdet(np.zeros((10, 2)), np.eye(2), 3 * psi) == pytest.approx(
        np.log(psi).sum() + 10 * np.log(3)
    )
    # Sherman-Morrison by hand
    e1 = np.zeros((4, 1))
    e1[0, 0] = 1.0
    r = np.arange(1.0, 5.0)
    expected = r.copy()
    expected[0] = r[0] / 2
    np.testing.assert_allclose(mc.woodbury_solve(e1, np.eye(1), np.ones(4), r), expected)
    for n, m in [(10, 2), (8, 3), (30, 8)]:
        Lam = rng.standard_normal((n, m))
        G = np.linalg.cholesky(_spd(rng, m))
        psi = rng.uniform(0.5, 2, n)
        A = Lam @ G @ G.T @ Lam.T + np.diag(psi)
        rhs = rng.standard_normal(n)
        np.testing.assert_allclose(mc.woodbury_solve(Lam, G, psi, rhs), np.linalg.solve(A, rhs), rtol=1e-10)
        assert mc.lowrank_logdet(Lam, G, psi) == pytest.approx(np.linalg.slogdet(A)[1], rel=1e-10)


def test_banded_gram_and_selected_inverse():
    rng = np.random.default_rng(6)
    for n, bw in [(1, 0), (5, 1), (12, 3), (9, 8)]:
        C = _random_banded(rng, n, bw)
        dense = C.to_dense()
        Kb = mc.banded_gram(C)
        np.testing.assert_allclose(mc.band_to_dense_symmetric(Kb), dense @ dense.T, atol=1e-12)
        L = np.linalg.cholesky(dense @ dense.T + np.eye(n))
        Lb = mc.BandedLowerTriangular.from_dense(L, bw).values
        Z = mc.banded_selected_inverse(Lb)
        Kinv = np.linalg.inv(L @ L.T)
        for d in range(bw + 1):
            np.testing.assert_allclose(Z[d, : n - d], np.diagonal(Kinv, -d), rtol=1e-9, atol=1e-12)


def test_matrix_power_neg_d():
    out, eig = mc.matrix_power_neg_d(np.diag([4.0, 1.0]), 0.5)
    np.testing.assert_allclose(out, np.diag([0.5, 1.0]))
    rng = np.random.default_rng(7)
    S = _spd(rng, 3)
    np.testing.assert_allclose(mc.matrix_power_neg_d(S, 1.0)[0], np.linalg.inv(S), rtol=1e-10)
    np.testing.assert_allclose(mc.matrix_power_neg_d(S, 0.0)[0], np.eye(3), atol=1e-12)
    _, eig = mc.matrix_power_neg_d(S, 0.3)
    assert np.all(np.diff(eig.values) < 0)
    np.testing.assert_allclose(eig.reconstruct(), S, rtol=1e-10)
    np.testing.assert_allclose(eig.vectors.T @ eig.vectors, np.eye(3), atol=1e-10)
    with pytest.raises(np.linalg.LinAlgError):
        mc.matrix_power_neg_d(-np.eye(2), 0.5)


def test_d_matrix_power_neg_d_scalar():
    _, eig = mc.matrix_power_neg_d(np.array([[2.0]]), 0.4)
    assert mc.d_matrix_power_neg_d(eig, 0.4)[0, 0] == pytest.approx(-0.4 * 2.0 ** -1.4)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_d_matrix_power_neg_d_fd(k):
    rng = np.random.default_rng(10 + k)
    d = 0.3
    S = _spd(rng, k)
    _, eig = mc.matrix_power_neg_d(S, d)
    J = mc.d_matrix_power_neg_d(eig, d)
    h = 1e-5
    for _ in range(10):
        E = _sym(rng, k)
        fd = (mc.matrix_power_neg_d(S + h * E, d)[0] - mc.matrix_power_neg_d(S - h * E, d)[0]) / (2 * h)
        an = mc.unvec(J @ mc.vec(E), k)
        assert np.max(np.abs(an - fd)) <= 1e-6 * np.max(np.abs(fd))


def test_d_matrix_power_neg_d_rejects_ties():
    _, eig = mc.matrix_power_neg_d(np.diag([2.0, 2.0, 1.0]), 0.5)
    with pytest.raises(mc.EigenGapError):
        mc.d_matrix_power_neg_d(eig, 0.5)
