"""Dense reference implementations used only by the tests.

Everything here materializes W, Z, C and dW/dB explicitly and follows the
textbook matrix expressions term by term, so it shares no code path with
the structured kernels under test.
"""

from __future__ import annotations

import numpy as np

from dynfactorvb.matcalc import commutation_matrix, vec


def dense_C(lam, layout):
    n1 = layout.n_z
    C1 = np.zeros((n1, n1))
    for d in range(lam.c1.shape[0]):
        C1 += np.diag(lam.c1[d, : n1 - d], -d)
    C2 = np.zeros((layout.P, layout.P))
    C2[lam.c2_rows, lam.c2_cols] = lam.c2
    C = np.zeros((layout.dim_rho, layout.dim_rho))
    C[:n1, :n1] = C1
    C[n1:, n1:] = C2
    return C


def selectors(layout):
    """Per chain: P_c (theta rows x n p) and Q_c (n q x rho columns)."""
    out = []
    for c, idx, off in zip(layout.chains, layout.z_index, layout.x_offsets):
        Pc = np.zeros((layout.dim_theta, c.n * c.p))
        Pc[off : off + c.n * c.p, :] = np.eye(c.n * c.p)
        Qc = np.zeros((c.n * c.q, layout.dim_rho))
        Qc[np.arange(c.n * c.q), idx.reshape(-1)] = 1.0
        out.append((Pc, Qc))
    return out


def dense_W(lam, layout):
    W = np.zeros((layout.dim_theta, layout.dim_rho))
    for (Pc, Qc), Bc, c in zip(selectors(layout), lam.B, layout.chains):
        W += Pc @ np.kron(np.eye(c.n), Bc) @ Qc
    W[layout.n_x :, layout.n_z :] = np.eye(layout.P)
    return W


def dense_Z(lam, layout):
    Z = np.zeros((layout.dim_theta, layout.dim_theta))
    Z[: layout.n_x, : layout.n_x] = np.diag(lam.delta)
    return Z


def dense_M(lam, layout):
    return np.eye(layout.dim_theta) if layout.hd else dense_W(lam, layout)


def dW_dB(layout, chain):
    """d vec(W) / d vec(B_c) = (Q^T kron P)[{(I_n kron K_{q,n})(vec(I_n) kron I_q)} kron I_p]."""
    c = layout.chains[chain]
    Pc, Qc = selectors(layout)[chain]
    n, q, p = c.n, c.q, c.p
    inner = np.kron(np.eye(n), commutation_matrix(q, n).toarray()) @ np.kron(vec(np.eye(n))[:, None], np.eye(q))
    return np.kron(Qc.T, Pc) @ np.kron(inner, np.eye(p))


def sample_theta(lam, layout, omega, eps):
    C, W, Z, M = dense_C(lam, layout), dense_W(lam, layout), dense_Z(lam, layout), dense_M(lam, layout)
    ext = np.concatenate([eps, np.zeros(layout.P)])
    return M @ lam.mu + W @ np.linalg.solve(C.T, omega) + Z @ ext


def covariance(lam, layout):
    C, W, Z = dense_C(lam, layout), dense_W(lam, layout), dense_Z(lam, layout)
    Sigma = np.linalg.inv(C @ C.T)
    return W @ Sigma @ W.T + Z @ Z


def log_q(lam, layout, theta):
    V = covariance(lam, layout)
    x = theta - dense_M(lam, layout) @ lam.mu
    sign, logdet = np.linalg.slogdet(2 * np.pi * V)
    assert sign > 0
    return -0.5 * (logdet + x @ np.linalg.solve(V, x))


def gradients(lam, layout, grad_log_h, omega, eps, estimator):
    """Single-draw gradient blocks from the literal matrix expressions.

    Returns (g_mu, [g_B per chain, as p x q], g_delta, g_C as dense matrix).
    """
    C, W, Z, M = dense_C(lam, layout), dense_W(lam, layout), dense_Z(lam, layout), dense_M(lam, layout)
    Cinv = np.linalg.inv(C)
    CinvT = Cinv.T
    Sigma = CinvT @ Cinv
    V = W @ Sigma @ W.T + Z @ Z
    Vinv = np.linalg.inv(V)
    ext = np.concatenate([eps, np.zeros(layout.P)])
    eta = CinvT @ omega
    x = W @ eta + Z @ ext
    theta = M @ lam.mu + x
    g = grad_log_h(theta)
    nx, nz = layout.n_x, layout.n_z
    # beta multiplies dW/dB: mu + C^{-T} omega when the mean goes through W
    beta = eta if layout.hd else lam.mu + eta

    if estimator == "standard":
        g_mu = M.T @ g
    else:
        g_mu = M.T @ (g + Vinv @ x)

    g_B = []
    dim_theta = layout.dim_theta
    for ci, c in enumerate(layout.chains):
        J = dW_dB(layout, ci)
        T1 = J.T @ (np.kron(beta[:, None], np.eye(dim_theta)) @ g)
        if estimator == "standard":
            T2 = J.T @ vec(Vinv @ W @ Sigma)
            T3 = J.T @ vec(Vinv @ np.outer(x, omega) @ Cinv - Vinv @ np.outer(x, x) @ Vinv @ W @ Sigma)
            gb = T1 + T2 + T3
        else:
            T3p = J.T @ vec(Vinv @ np.outer(x, beta))
            gb = T1 + T3p
        g_B.append(gb.reshape((c.p, c.q), order="F"))

    V1inv = Vinv[:nx, :nx]
    D = np.diag(lam.delta)
    x1 = x[:nx]
    gX = g[:nx]
    if estimator == "standard":
        g_delta = np.diag(
            np.outer(gX, eps) + V1inv @ D + V1inv @ np.outer(x1, eps) - V1inv @ np.outer(x1, x1) @ V1inv @ D
        )
    else:
        g_delta = np.diag(np.outer(gX, eps) + V1inv @ np.outer(x1, eps))

    if estimator == "standard":
        g_C = (
            -np.outer(eta, g) @ W @ CinvT
            - Sigma @ W.T @ Vinv @ W @ CinvT
            - np.outer(eta, x) @ Vinv @ W @ CinvT
            + Sigma @ W.T @ Vinv @ np.outer(x, x) @ Vinv @ W @ CinvT
        )
    else:
        g_C = -np.outer(eta, g + Vinv @ x) @ W @ CinvT
    return g_mu, g_B, g_delta, g_C


def entropy_free_elbo_terms(lam, layout, log_h, omega, eps):
    """log h(theta(u)) - log q(theta(u)) for a fixed draw, dense route."""
    theta = sample_theta(lam, layout, omega, eps)
    return log_h(theta) - log_q(lam, layout, theta)


def random_params(layout, mask, rng, scale=0.3):
    """A mask-valid lambda with generic (non-identity) values."""
    from dynfactorvb.varfamily import VariationalParams

    lam = VariationalParams.initial(layout, mask)
    lam.mu[:] = rng.standard_normal(lam.mu.size)
    for b, m in zip(lam.B, layout.b_masks):
        b[m] = rng.standard_normal(m.sum())
        np.fill_diagonal(b, 1.0 + np.abs(np.diag(b)))
    lam.delta[:] = rng.uniform(0.5, 1.5, lam.delta.size)
    band = layout.c1_band_mask
    lam.c1[band] = scale * rng.standard_normal(band.sum())
    lam.c1[0] = rng.uniform(0.8, 1.6, lam.c1.shape[1])
    off = lam.c2_rows != lam.c2_cols
    lam.c2[off] = scale * rng.standard_normal(off.sum())
    lam.c2[~off] = rng.uniform(0.8, 1.6, (~off).sum())
    return lam
