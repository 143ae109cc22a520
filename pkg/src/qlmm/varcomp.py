"""Variance-component estimation with sample splitting and cross-fitting.

The noise variance comes from projection residuals: with ``P_perp`` the
orthogonal complement of each cluster's random-effects column span,
``sigma2 = sum ||P_perp r_i||^2 / sum trace(P_perp)``.  The random-effect
covariance is parameterized as ``Psi = sum_j eta_j G_j`` over a symmetric
basis and estimated by moment matching under the proxy weighting: the
objective ``sum_i || S_a^{-1/2} (r r^T - Z Psi_eta Z^T - sigma2 I) S_a^{-1/2} ||_F^2``
is an exact convex quadratic in ``eta``, solved through its d x d normal
equations.

Clusters with fewer than two observations are excluded from both estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from qlmm.lasso import LassoOptions, fit_fixed_effects
from qlmm.model_core import ClusteredDataset
from qlmm.proxy import build_whitener

__all__ = [
    "SplitPlan",
    "VarCompOptions",
    "VarCompFit",
    "split_clusters",
    "projection_residuals",
    "sigma2_estimate",
    "design_gram",
    "eta_estimate",
    "eta_estimate_from_moments",
    "cross_fit_varcomp",
    "psi_from_eta",
]

_RANK_RTOL = 1e-10  # relative singular-value threshold for rank of Z


@dataclass(frozen=True)
class SplitPlan:
    """Two disjoint cluster folds of nearly equal size."""

    i1: tuple
    i2: tuple
    seed: int

    def swapped(self) -> "SplitPlan":
        return SplitPlan(i1=self.i2, i2=self.i1, seed=self.seed)


@dataclass(frozen=True)
class VarCompOptions:
    """Controls for the variance-component pipeline.

    ``split`` selects the estimation scheme: "cross" fits the fixed effects
    on one fold and the moments on the other, then averages over the swap;
    "single" does one direction only; "none" uses all clusters for both
    stages (the scheme behind the desk-scale reference tables).
    """

    split: str = "cross"
    seed: int = 0
    lasso: LassoOptions = LassoOptions()
    psd_project: bool = False
    min_cluster_size: int = 2

    def __post_init__(self):
        if self.split not in ("cross", "single", "none"):
            raise ValueError("split must be 'cross', 'single' or 'none'")


@dataclass
class VarCompFit:
    sigma2_e: float
    eta: np.ndarray
    psi: np.ndarray
    a: float
    cross_fit: bool
    split: SplitPlan | None
    halves: list
    dg_min_eigval: float
    dg_condition: float
    sigma2_clamped: bool = False
    psd_projected: bool = False


def split_clusters(dataset: ClusteredDataset, seed: int = 0) -> SplitPlan:
    """Uniformly random balanced split of the cluster indices."""
    n = dataset.n
    if n < 2:
        raise ValueError("splitting needs at least two clusters")
    perm = np.random.default_rng(seed).permutation(n)
    half = n // 2
    return SplitPlan(
        i1=tuple(sorted(int(i) for i in perm[:half])),
        i2=tuple(sorted(int(i) for i in perm[half:])),
        seed=seed,
    )


def _z_range_basis(Z):
    """Orthonormal basis of the column span of Z with relative rank cutoff."""
    if Z.shape[1] == 0:
        return np.zeros((Z.shape[0], 0)), 0
    U, s, _ = np.linalg.svd(Z, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((Z.shape[0], 0)), 0
    rank = int(np.sum(s > s[0] * _RANK_RTOL))
    return U[:, :rank], rank


def projection_residuals(cluster, beta_hat) -> dict:
    """Residual and its projection off the random-effects column span.

    Returns ``{"r", "r_perp", "rank", "dof"}`` where ``dof = m - rank(Z)``
    is the trace of the complement projector.
    """
    r = cluster.y - cluster.X @ np.asarray(beta_hat, dtype=np.float64)
    U, rank = _z_range_basis(cluster.Z)
    r_perp = r - U @ (U.T @ r) if rank else r.copy()
    return {"r": r, "r_perp": r_perp, "rank": rank, "dof": cluster.m - rank}


def sigma2_estimate(dataset: ClusteredDataset, indices, beta_hat,
                    min_cluster_size: int = 2) -> dict:
    """Projection-residual estimate of the noise variance over one fold.

    ``sum ||P_perp r_i||^2 / sum (m_i - rank(Z_i))`` over the clusters at
    ``indices`` with at least ``min_cluster_size`` observations.  Raises when
    every usable cluster has ``m_i <= rank(Z_i)`` (no degrees of freedom for
    the noise).
    """
    num = 0.0
    dof_total = 0
    residuals = {}
    for i in indices:
        c = dataset[int(i)]
        if c.m < min_cluster_size:
            continue
        pr = projection_residuals(c, beta_hat)
        residuals[int(i)] = pr
        num += float(pr["r_perp"] @ pr["r_perp"])
        dof_total += pr["dof"]
    if dof_total <= 0:
        raise ValueError(
            "noise variance is not estimable: every usable cluster has "
            "m_i <= rank(Z_i); need at least one cluster with more "
            "observations than random-effect directions"
        )
    sigma2 = num / dof_total
    clamped = sigma2 < 0.0
    return {
        "sigma2": max(sigma2, 0.0),
        "dof": dof_total,
        "clamped": clamped,
        "residuals": residuals,
    }


def design_gram(basis) -> tuple[np.ndarray, float]:
    """Trace Gram matrix of the basis, ``D[j, k] = trace(G_j G_k)``.

    Raises on a (numerically) linearly dependent basis.
    """
    mats = [np.asarray(G, dtype=np.float64) for G in basis]
    if not mats:
        raise ValueError("basis must be nonempty")
    q = mats[0].shape[0]
    for G in mats:
        if G.shape != (q, q):
            raise ValueError("all basis matrices must share the same shape")
        if not np.allclose(G, G.T):
            raise ValueError("basis matrices must be symmetric")
    d = len(mats)
    D = np.empty((d, d))
    for j in range(d):
        for k in range(j, d):
            D[j, k] = D[k, j] = float(np.sum(mats[j] * mats[k]))
    evals = np.linalg.eigvalsh(D)
    scale = max(1.0, float(evals.max()))
    if evals.min() <= scale * 1e-12:
        raise ValueError(
            "basis matrices are linearly dependent "
            f"(smallest Gram eigenvalue {evals.min():.3e})"
        )
    return D, float(evals.min())


def _eta_normal_equations(dataset, indices, a, basis, sigma2_hat, moments,
                          min_cluster_size):
    """Assemble ``A eta = b`` for the moment-matching quadratic.

    Per cluster, with ``W = (S_a)^{-1}`` and second-moment matrix ``M``
    standing in for ``r r^T``:
    ``A[j, k] += trace(G_j K G_k K)`` with ``K = Z^T W Z`` and
    ``b[j] += <G_j, (WZ)^T M (WZ)> - sigma2 <G_j, Z^T W^2 Z>``.
    """
    mats = [np.asarray(G, dtype=np.float64) for G in basis]
    d = len(mats)
    w = build_whitener(dataset, a)
    A = np.zeros((d, d))
    b = np.zeros(d)
    used = 0
    for i, M in zip(indices, moments):
        c = dataset[int(i)]
        if c.m < min_cluster_size:
            continue
        used += 1
        WZ = w.apply_inv(int(i), c.Z)
        K = c.Z.T @ WZ
        K2 = WZ.T @ WZ
        mid = WZ.T @ M @ WZ
        KGK = [K @ G @ K for G in mats]
        for j in range(d):
            b[j] += float(np.sum(mats[j] * mid)) - sigma2_hat * float(
                np.sum(mats[j] * K2)
            )
            for k in range(j, d):
                val = float(np.sum(KGK[j] * mats[k]))
                A[j, k] += val
                if k != j:
                    A[k, j] += val
    if used == 0:
        raise ValueError("no usable clusters for the moment equations")
    return A, b


def _solve_eta(A, b, basis):
    try:
        eta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "moment equations are singular; the basis combination "
            f"{[np.asarray(G).shape for G in basis]} is not identified by "
            "the observed random-effect designs"
        ) from exc
    return eta


def eta_estimate(dataset: ClusteredDataset, indices, residuals, sigma2_hat: float,
                 a: float, basis, min_cluster_size: int = 2) -> np.ndarray:
    """Moment-matching estimate of the basis coefficients of ``Psi``.

    ``residuals`` is a sequence of per-cluster residual vectors aligned with
    ``indices``; the second moments ``r r^T`` enter the exact normal
    equations of the convex quadratic objective.
    """
    design_gram(basis)  # rejects dependent bases early
    moments = [np.outer(r, r) for r in residuals]
    A, b = _eta_normal_equations(
        dataset, indices, a, basis, float(sigma2_hat), moments, min_cluster_size
    )
    return _solve_eta(A, b, basis)


def eta_estimate_from_moments(dataset: ClusteredDataset, indices, moments,
                              sigma2_hat: float, a: float, basis,
                              min_cluster_size: int = 2) -> np.ndarray:
    """Same normal equations with caller-supplied second-moment matrices."""
    design_gram(basis)
    A, b = _eta_normal_equations(
        dataset, indices, a, basis, float(sigma2_hat), moments, min_cluster_size
    )
    return _solve_eta(A, b, basis)


def psi_from_eta(eta, basis) -> np.ndarray:
    """Reconstruct ``Psi = sum_j eta_j G_j``; symmetric by construction."""
    eta = np.asarray(eta, dtype=np.float64)
    mats = [np.asarray(G, dtype=np.float64) for G in basis]
    if eta.shape[0] != len(mats):
        raise ValueError("eta length must match the basis size")
    q = mats[0].shape[0] if mats else 0
    out = np.zeros((q, q))
    for coef, G in zip(eta, mats):
        out += coef * G
    return out


def _one_direction(dataset, fit_idx, est_idx, a, basis, options):
    """Fixed effects on ``fit_idx``, variance components on ``est_idx``."""
    sub = dataset.subset(sorted(fit_idx))
    fit, _, _ = fit_fixed_effects(sub, a=a, options=options.lasso)
    sig = sigma2_estimate(dataset, est_idx, fit.beta, options.min_cluster_size)
    resids = [sig["residuals"][int(i)]["r"] for i in est_idx
              if int(i) in sig["residuals"]]
    kept = [int(i) for i in est_idx if int(i) in sig["residuals"]]
    eta = eta_estimate(dataset, kept, resids, sig["sigma2"], a, basis,
                       options.min_cluster_size)
    return {
        "sigma2": sig["sigma2"],
        "eta": eta,
        "clamped": sig["clamped"],
        "dof": sig["dof"],
        "fit_clusters": tuple(sorted(int(i) for i in fit_idx)),
        "est_clusters": tuple(kept),
        "beta_sparsity": int(np.count_nonzero(fit.beta)),
        "lam": fit.lam,
    }


def _project_psd(eta, basis, dg):
    """Nearest-PSD projection of Psi, re-expressed in the basis if exact."""
    psi = psi_from_eta(eta, basis)
    evals, vecs = np.linalg.eigh(psi)
    if evals.min() >= 0:
        return eta, False
    psi_psd = (vecs * np.maximum(evals, 0.0)) @ vecs.T
    rhs = np.array([float(np.sum(np.asarray(G) * psi_psd)) for G in basis])
    eta_new = np.linalg.solve(dg, rhs)
    recon = psi_from_eta(eta_new, basis)
    gap = np.linalg.norm(recon - psi_psd)
    if gap <= 1e-8 * max(1.0, np.linalg.norm(psi_psd)):
        return eta_new, True
    # projection leaves the basis span; keep the raw estimate
    return eta, False


def cross_fit_varcomp(dataset: ClusteredDataset, a: float, basis,
                      options: VarCompOptions = VarCompOptions(),
                      plan: SplitPlan | None = None) -> VarCompFit:
    """Variance components under the configured splitting scheme.

    With ``split="cross"`` the two directional estimates (fit on one fold,
    moments on the other, then swapped) are averaged; provenance keeps both
    halves.  ``split="none"`` reuses all clusters for both stages.
    """
    dg, dg_min = design_gram(basis)
    dg_cond = float(np.linalg.cond(dg))
    if options.split == "none":
        all_idx = tuple(range(dataset.n))
        halves = [_one_direction(dataset, all_idx, all_idx, a, basis, options)]
        plan = None
    else:
        if plan is None:
            plan = split_clusters(dataset, options.seed)
        halves = [
            _one_direction(dataset, plan.i2, plan.i1, a, basis, options)
        ]
        if options.split == "cross":
            halves.append(
                _one_direction(dataset, plan.i1, plan.i2, a, basis, options)
            )
    sigma2 = float(np.mean([h["sigma2"] for h in halves]))
    eta = np.mean([h["eta"] for h in halves], axis=0)
    clamped = any(h["clamped"] for h in halves)

    projected = False
    if options.psd_project:
        eta, projected = _project_psd(eta, basis, dg)
    return VarCompFit(
        sigma2_e=sigma2,
        eta=eta,
        psi=psi_from_eta(eta, basis),
        a=float(a),
        cross_fit=(options.split == "cross"),
        split=plan,
        halves=halves,
        dg_min_eigval=dg_min,
        dg_condition=dg_cond,
        sigma2_clamped=clamped,
        psd_projected=projected,
    )
