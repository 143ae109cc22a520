"""Proxy-covariance whitening.

The within-cluster covariance of the random part is unknown, so a proxy
``S_a = a Z Z^T + I`` (block diagonal over clusters) stands in for it.  This
module builds per-cluster factorizations of ``S_a``, applies ``S_a^{-1/2}``
to data, computes the effective sample size ``trace(S_a^{-1})`` and the
penalty-scale diagnostic ``lambda_star``, and checks the two-sided spectral
sandwich between ``S_a^{-1}`` and the true inverse covariance.

Factorization route: with ``q < m_i`` the thin SVD of ``Z_i`` gives
``S_a^{-1/2} = I - U diag(1 - (1 + a s_k^2)^{-1/2}) U^T`` at O(m q^2) cost;
with ``q >= m_i`` a full symmetric eigendecomposition of ``a Z Z^T + I`` is
used instead.  Clusters of equal size are processed in batch.  The SVD does
not depend on ``a``, so it is computed once per dataset and cached.
"""

from __future__ import annotations

import numpy as np

from qlmm.model_core import ClusteredDataset

__all__ = [
    "ProxyWhitener",
    "TransformedDataset",
    "build_whitener",
    "apply_inv_sqrt",
    "effective_sample_size",
    "transform_dataset",
    "lambda_star",
    "sandwich_margins",
]

# eigenvalues of S_a below 1 are impossible (S_a >= I); anything further
# below than this is a numerical failure, not something to regularize away
_EIG_SANITY = 1e-10


class _GroupFactors:
    """a-independent spectral factors for all clusters of one size."""

    __slots__ = ("indices", "m", "r", "U", "s2", "Z")

    def __init__(self, indices, Z_stack):
        self.indices = np.asarray(indices)
        k, m, q = Z_stack.shape
        self.m = m
        self.Z = Z_stack
        if q < m:
            # thin SVD of Z: S_a shares eigenvectors with Z Z^T
            U, s, _ = np.linalg.svd(Z_stack, full_matrices=False)
            self.U = U
            self.s2 = s ** 2
            self.r = q
        else:
            w, U = np.linalg.eigh(Z_stack @ Z_stack.transpose(0, 2, 1))
            if np.any(w < -_EIG_SANITY):
                raise FloatingPointError(
                    "eigendecomposition of Z Z^T produced an eigenvalue "
                    f"{w.min():.3e} below the sanity threshold"
                )
            self.U = U
            self.s2 = np.maximum(w, 0.0)
            self.r = m


def _design_factors(dataset: ClusteredDataset):
    """Group clusters by size and factorize each group's Z blocks (cached)."""
    cached = dataset._cache.get("design_factors")
    if cached is not None:
        return cached
    by_m: dict[int, list[int]] = {}
    for i, c in enumerate(dataset.clusters):
        by_m.setdefault(c.m, []).append(i)
    groups = []
    for m, idx in sorted(by_m.items()):
        Z_stack = np.stack([dataset[i].Z for i in idx])
        groups.append(_GroupFactors(idx, Z_stack))
    dataset._cache["design_factors"] = groups
    return groups


class ProxyWhitener:
    """Per-cluster factorization of ``S_a^i = a Z_i Z_i^T + I``.

    Supports applying ``S_a^{-1/2}`` and ``S_a^{-1}`` without ever forming a
    dense inverse, and caches the effective sample size
    ``T_a = sum_i trace((S_a^i)^{-1})``.
    """

    def __init__(self, dataset: ClusteredDataset, a: float):
        a = float(a)
        if not a >= 0:
            raise ValueError(f"proxy constant a must be nonnegative, got {a}")
        self.dataset = dataset
        self.a = a
        self._groups = _design_factors(dataset)
        # d = a * s^2 are the eigenvalue excesses of S_a over the identity
        self._d = [a * g.s2 for g in self._groups]
        if any((1.0 + d < 1.0 - _EIG_SANITY).any() for d in self._d):
            raise FloatingPointError("proxy covariance eigenvalue below 1")
        self._shrink_half = [1.0 - 1.0 / np.sqrt(1.0 + d) for d in self._d]
        self._shrink_full = [d / (1.0 + d) for d in self._d]
        # trace((S_a^i)^{-1}) = (m - r) + sum_k 1/(1 + d_k)
        self._trace_inv = np.empty(dataset.n)
        for g, d in zip(self._groups, self._d):
            self._trace_inv[g.indices] = (g.m - g.r) + (1.0 / (1.0 + d)).sum(
                axis=1
            )
        self.t_a = float(self._trace_inv.sum())
        # cluster index -> (group, position in group)
        self._where = {}
        for gi, g in enumerate(self._groups):
            for pos, ci in enumerate(g.indices):
                self._where[int(ci)] = (gi, pos)

    def _apply(self, shrink_list, index, M):
        gi, pos = self._where[index]
        g = self._groups[gi]
        M = np.asarray(M, dtype=np.float64)
        vec = M.ndim == 1
        if M.shape[0] != g.m:
            raise ValueError(
                f"cluster {index} has {g.m} rows, operand has {M.shape[0]}"
            )
        if self.a == 0.0:
            return M.copy()
        cols = M.reshape(g.m, -1)
        U = g.U[pos]
        out = cols - U @ (shrink_list[gi][pos][:, None] * (U.T @ cols))
        return out[:, 0] if vec else out

    def apply_inv_sqrt(self, index: int, M):
        """``(S_a^i)^{-1/2} @ M`` for the cluster at ``index``."""
        return self._apply(self._shrink_half, index, M)

    def apply_inv(self, index: int, M):
        """``(S_a^i)^{-1} @ M`` for the cluster at ``index``."""
        return self._apply(self._shrink_full, index, M)

    def trace_inv(self, index: int) -> float:
        return float(self._trace_inv[index])

    def dense_inv(self, index: int) -> np.ndarray:
        gi, pos = self._where[index]
        g = self._groups[gi]
        U = g.U[pos]
        return np.eye(g.m) - (U * self._shrink_full[gi][pos]) @ U.T

    def whiten_stacked(self, stacked: np.ndarray, offsets) -> np.ndarray:
        """Apply ``S_a^{-1/2}`` blockwise to rows stacked in cluster order."""
        stacked = np.asarray(stacked, dtype=np.float64)
        if self.a == 0.0:
            return stacked.copy()
        vec = stacked.ndim == 1
        cols = stacked.reshape(stacked.shape[0], -1)
        out = np.empty_like(cols)
        for gi, g in enumerate(self._groups):
            rows = np.concatenate(
                [np.arange(offsets[i], offsets[i + 1]) for i in g.indices]
            )
            block = cols[rows].reshape(len(g.indices), g.m, -1)
            V = g.U.transpose(0, 2, 1) @ block
            block = block - g.U @ (self._shrink_half[gi][:, :, None] * V)
            out[rows] = block.reshape(len(rows), -1)
        return out[:, 0] if vec else out


class TransformedDataset:
    """Whitened data ``(y_a, X_a)`` plus the whitener that produced it.

    The stacked design is kept Fortran-ordered because every downstream
    solver walks it column by column.
    """

    def __init__(self, dataset, whitener, X_a, y_a):
        self.dataset = dataset
        self.whitener = whitener
        self.X = np.asfortranarray(X_a)
        self.y = np.ascontiguousarray(y_a)
        self.offsets = dataset.row_offsets()
        self._cache: dict = {}

    @property
    def a(self) -> float:
        return self.whitener.a

    @property
    def t_a(self) -> float:
        return self.whitener.t_a

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def cluster_rows(self, i) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def X_cluster(self, i) -> np.ndarray:
        return self.X[self.cluster_rows(i)]

    def y_cluster(self, i) -> np.ndarray:
        return self.y[self.cluster_rows(i)]


def build_whitener(dataset: ClusteredDataset, a: float) -> ProxyWhitener:
    """Factorize ``S_a`` for every cluster; rejects negative ``a``."""
    return ProxyWhitener(dataset, a)


def apply_inv_sqrt(whitener: ProxyWhitener, index: int, M):
    return whitener.apply_inv_sqrt(index, M)


def effective_sample_size(whitener: ProxyWhitener) -> float:
    """``T_a = sum_i trace((S_a^i)^{-1})``; equals N at ``a = 0``."""
    return whitener.t_a


def transform_dataset(dataset: ClusteredDataset, a: float) -> TransformedDataset:
    """Whiten every cluster by ``(S_a^i)^{-1/2}``; identity when ``a = 0``."""
    w = build_whitener(dataset, a)
    offsets = dataset.row_offsets()
    X = dataset.stacked_X()
    y = dataset.stacked_y()
    if a == 0.0:
        return TransformedDataset(dataset, w, X, y)
    return TransformedDataset(
        dataset, w, w.whiten_stacked(X, offsets), w.whiten_stacked(y, offsets)
    )


def _check_psd(Psi, q, strict=False):
    Psi = np.asarray(Psi, dtype=np.float64)
    if Psi.shape != (q, q):
        raise ValueError(f"Psi must be {q}x{q}, got {Psi.shape}")
    if not np.allclose(Psi, Psi.T):
        raise ValueError("Psi must be symmetric")
    evals = np.linalg.eigvalsh(Psi)
    scale = max(1.0, float(np.abs(evals).max()) if evals.size else 1.0)
    if strict:
        if evals.size == 0 or evals.min() <= scale * 1e-12:
            raise ValueError("Psi must be strictly positive definite")
    elif evals.size and evals.min() < -scale * 1e-10:
        raise ValueError(
            f"Psi must be positive semidefinite (min eigenvalue {evals.min():.3e})"
        )
    return Psi, evals


def lambda_star(dataset: ClusteredDataset, a: float, Psi, sigma2_e: float) -> float:
    """Penalty-scale diagnostic at proxy constant ``a``.

    Evaluates ``sqrt(trace(S_a^{-1} S_true S_a^{-1}) log p) / trace(S_a^{-1})``
    where ``S_true = Z Psi Z^T + sigma2_e I`` blockwise.  With ``Psi = eta I``
    the minimizer over ``a`` sits at ``eta / sigma2_e``.
    """
    if not sigma2_e > 0:
        raise ValueError("sigma2_e must be positive")
    Psi, _ = _check_psd(Psi, dataset.q)
    w = build_whitener(dataset, a)
    if not w.t_a > 0:
        raise ValueError("effective sample size is zero")
    num = 0.0
    for g, shrink in zip(w._groups, w._shrink_full):
        eye = np.eye(g.m)
        W = eye - (g.U * shrink[:, None, :]) @ g.U.transpose(0, 2, 1)
        St = g.Z @ Psi @ g.Z.transpose(0, 2, 1) + sigma2_e * eye
        WSt = W @ St
        num += float(np.einsum("kij,kji->", WSt, W))
    return float(np.sqrt(num * np.log(dataset.p)) / w.t_a)


def sandwich_margins(dataset: ClusteredDataset, a: float, Psi, sigma2_e: float) -> dict:
    """Slacks of the two-sided bound of ``S_true^{-1}`` by ``S_a^{-1}``.

    Returns the smallest eigenvalue of
    ``S_true^{-1} - min(1/sigma2_e, a/eigmax(Psi)) S_a^{-1}`` (``lower``) and
    of ``max(1/sigma2_e, a/eigmin(Psi)) S_a^{-1} - S_true^{-1}`` (``upper``),
    minimized over clusters; both are nonnegative up to roundoff.
    """
    if not a > 0:
        raise ValueError("the sandwich bound requires a > 0")
    if not sigma2_e > 0:
        raise ValueError("sigma2_e must be positive")
    Psi, evals = _check_psd(Psi, dataset.q, strict=True)
    c_lo = min(1.0 / sigma2_e, a / evals.max())
    c_hi = max(1.0 / sigma2_e, a / evals.min())
    w = build_whitener(dataset, a)
    lower = np.inf
    upper = np.inf
    for g, shrink in zip(w._groups, w._shrink_full):
        eye = np.eye(g.m)
        W = eye - (g.U * shrink[:, None, :]) @ g.U.transpose(0, 2, 1)
        St = g.Z @ Psi @ g.Z.transpose(0, 2, 1) + sigma2_e * eye
        St_inv = np.linalg.inv(St)
        lower = min(lower, float(np.linalg.eigvalsh(St_inv - c_lo * W).min()))
        upper = min(upper, float(np.linalg.eigvalsh(c_hi * W - St_inv).min()))
    return {"lower": lower, "upper": upper}
