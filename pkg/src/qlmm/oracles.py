"""Dense brute-force references for validating the streaming implementations.

Everything here is deliberately naive: full ``N x N`` matrices, exact
symmetric eigendecompositions, and a generic proximal-gradient Lasso solver
that shares no code with the coordinate-descent path.  Guarded to small
problems (``N <= 2000``).
"""

from __future__ import annotations

import numpy as np

from qlmm.model_core import ClusteredDataset

__all__ = [
    "dense_sigma_a",
    "dense_matrix_power",
    "fista_weighted_lasso",
    "dense_oracle_pipeline",
    "plain_debias_reference",
]

_DENSE_GUARD = 2000


def dense_sigma_a(dataset: ClusteredDataset, a: float) -> np.ndarray:
    """Block-diagonal ``a Z Z^T + I`` over all clusters, as one dense matrix."""
    N = dataset.N
    if N > _DENSE_GUARD:
        raise ValueError(f"dense oracle limited to N <= {_DENSE_GUARD}, got {N}")
    out = np.zeros((N, N))
    offsets = dataset.row_offsets()
    for i, c in enumerate(dataset.clusters):
        sl = slice(offsets[i], offsets[i + 1])
        out[sl, sl] = a * (c.Z @ c.Z.T) + np.eye(c.m)
    return out


def dense_matrix_power(M: np.ndarray, power: float) -> np.ndarray:
    """Symmetric matrix power through an exact eigendecomposition."""
    w, V = np.linalg.eigh(np.asarray(M, dtype=np.float64))
    return (V * w ** power) @ V.T


def fista_weighted_lasso(X, y, lam, norm_const, weights=None,
                         max_iter=200_000, kkt_tol=1e-9):
    """Accelerated proximal-gradient solver for the weighted Lasso.

    Reference implementation, independent of the coordinate-descent kernels;
    iterates until the stationarity residual drops below ``kkt_tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = X.shape[1]
    w = np.ones(p) if weights is None else np.asarray(weights, dtype=np.float64)
    gram = X.T @ X / norm_const
    L = float(np.linalg.eigvalsh(gram).max()) if p else 1.0
    L = max(L, 1e-12)
    xty = X.T @ y / norm_const
    step_thresh = lam * w / L

    def grad(b):
        return gram @ b - xty

    def kkt(b):
        g = xty - gram @ b
        worst = 0.0
        for j in range(p):
            if b[j] != 0.0:
                viol = abs(g[j] - lam * w[j] * np.sign(b[j]))
            else:
                viol = max(0.0, abs(g[j]) - lam * w[j])
            worst = max(worst, viol)
        return worst

    beta = np.zeros(p)
    z = beta.copy()
    t = 1.0
    for it in range(1, max_iter + 1):
        step = z - grad(z) / L
        beta_new = np.sign(step) * np.maximum(np.abs(step) - step_thresh, 0.0)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = beta_new + ((t - 1.0) / t_new) * (beta_new - beta)
        beta, t = beta_new, t_new
        if it % 50 == 0 and kkt(beta) <= kkt_tol:
            break
    return beta


def dense_oracle_pipeline(dataset: ClusteredDataset, a: float, lam: float,
                          weights=None) -> dict:
    """Whiten with a dense eigendecomposition, then solve by FISTA.

    Returns ``{"beta", "t_a", "X_a", "y_a"}`` for comparison against the
    streaming transform + coordinate-descent path.
    """
    sigma = dense_sigma_a(dataset, a)
    inv = np.linalg.inv(sigma)
    t_a = float(np.trace(inv))
    half_inv = dense_matrix_power(sigma, -0.5)
    X_a = half_inv @ dataset.stacked_X()
    y_a = half_inv @ dataset.stacked_y()
    beta = fista_weighted_lasso(X_a, y_a, lam, t_a, weights=weights)
    return {"beta": beta, "t_a": t_a, "X_a": X_a, "y_a": y_a}


def plain_debias_reference(dataset: ClusteredDataset, lam: float, targets,
                           lam_j: float, alpha: float = 0.05) -> dict:
    """Debiased Lasso for a plain linear model on the raw data.

    Reference for the no-random-effects reduction: raw-data Lasso and
    nodewise regressions via FISTA, the one-step correction, and the
    cluster-sum empirical variance.  Normalization by N throughout.
    """
    from scipy.stats import norm

    X = dataset.stacked_X()
    y = dataset.stacked_y()
    N = X.shape[0]
    beta = fista_weighted_lasso(X, y, lam, N)
    resid = y - X @ beta
    offsets = dataset.row_offsets()
    records = {}
    for j in targets:
        x_j = X[:, j]
        X_rest = np.delete(X, j, axis=1)
        kappa = fista_weighted_lasso(X_rest, x_j, lam_j, N)
        w = x_j - X_rest @ kappa
        denom = float(w @ x_j)
        beta_db = beta[j] + float(w @ resid) / denom
        sums = np.add.reduceat(w * resid, offsets[:-1])
        v_hat = float(sums @ sums) / denom ** 2
        half = norm.ppf(1 - alpha / 2) * np.sqrt(v_hat)
        records[int(j)] = {
            "beta_db": float(beta_db),
            "v_hat": v_hat,
            "ci": (beta_db - half, beta_db + half),
        }
    return {"beta": beta, "records": records, "t_a": float(N)}
