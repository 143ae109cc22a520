"""Coordinate-wise debiased estimation, variance, intervals and tests.

For a target coordinate ``j`` the correction score is the residual of a
nodewise Lasso of column ``j`` on the remaining columns of the whitened
design; the debiased estimate adds ``w_j^T (y_a - X_a b) / (w_j^T X_a[:, j])``
to the initial Lasso coordinate.  The variance estimate sums squared
per-cluster inner products of the score with the residual, so no
variance-component plug-in is ever needed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from qlmm.lasso import (
    FixedEffectsFit,
    LassoOptions,
    _cd_solve,
    _scaled_lasso_arrays,
    lasso_fit,
    penalty_level,
)
from qlmm.model_core import ClusteredDataset
from qlmm.proxy import TransformedDataset, transform_dataset

__all__ = [
    "CorrectionScore",
    "InferenceRecord",
    "InferenceOptions",
    "InferenceResult",
    "nodewise_fit",
    "debias_coordinate",
    "empirical_variance",
    "confidence_interval",
    "z_test",
    "infer_coordinates",
    "bh_fdr",
]


class NotIdentifiableError(ValueError):
    """The correction score is orthogonal to its own column at this penalty."""


@dataclass
class CorrectionScore:
    """Nodewise-regression residual used to debias one coordinate."""

    j: int
    kappa: np.ndarray  # length p-1, coefficients on the remaining columns
    w: np.ndarray  # length N score vector, cluster blocks in stacked order
    denominator: float  # w^T X_a[:, j]
    lam_j: float
    sigma_x: float | None = None
    kkt_residual: float = 0.0


@dataclass
class InferenceRecord:
    """Debiased estimate, variance, interval and test for one coordinate."""

    j: int
    beta_db: float
    v_hat: float
    ci_lo: float
    ci_hi: float
    z: float
    p_value: float
    alpha: float
    lam_j: float
    degenerate: bool = False


@dataclass(frozen=True)
class InferenceOptions:
    """Debiasing controls.

    ``mode="whitened"`` runs the nodewise regression and correction on the
    ``a``-whitened data; ``mode="a0-robust"`` keeps the whitened initial fit
    but debiases on the raw data (robust to correlation between the fixed
    and random designs).  ``lambda_j=None`` resolves each nodewise penalty by
    the scaled-Lasso rule.  ``nodewise_norm`` sets the normalizer of the
    nodewise objective: "effective" uses ``T_a`` as in the whitened fit,
    "rows" uses the raw row count.
    """

    lasso: LassoOptions = LassoOptions()
    mode: str = "whitened"
    lambda_j: float | None = None
    nodewise_norm: str = "effective"

    def __post_init__(self):
        if self.mode not in ("whitened", "a0-robust"):
            raise ValueError("mode must be 'whitened' or 'a0-robust'")
        if self.nodewise_norm not in ("rows", "effective"):
            raise ValueError("nodewise_norm must be 'rows' or 'effective'")


@dataclass
class InferenceResult:
    records: list
    failures: dict
    fit: FixedEffectsFit
    a_fit: float
    a_debias: float
    alpha: float
    mode: str
    kkt_max: float = 0.0

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def nodewise_fit(transformed: TransformedDataset, j: int,
                 lam_j: float | None = None,
                 options: LassoOptions = LassoOptions(),
                 norm: str = "effective") -> CorrectionScore:
    """Regress column ``j`` on the remaining columns with an L1 penalty.

    With ``lam_j=None`` the penalty is ``sigma_x * sqrt(2 log p / N)`` where
    ``sigma_x`` comes from a scaled Lasso of the same regression.  ``norm``
    picks the normalizer of the nodewise objective: "effective" (``T_a``,
    matching the whitened-fit normalization) or "rows" (N).  Results are
    cached on the transformed dataset.
    """
    key = ("nodewise", int(j), lam_j, norm, id(options))
    cached = transformed._cache.get(key)
    if cached is not None:
        return cached

    p = transformed.p
    if not 0 <= j < p:
        raise ValueError(f"coordinate {j} outside [0, {p})")
    t_a = transformed.t_a
    if not t_a > 0:
        raise ValueError("effective sample size must be positive")
    X = transformed.X
    x_j = np.ascontiguousarray(X[:, j])
    X_rest = np.asfortranarray(np.delete(X, j, axis=1))
    norm_const = X.shape[0] if norm == "rows" else t_a

    sigma_x = None
    kkt_scaled = 0.0
    if lam_j is None:
        n_rule = X.shape[0] if options.lambda_scale == "rows" else t_a
        sl = _scaled_lasso_arrays(X_rest, x_j, n_rule, options, n_fit=t_a,
                                  n_sigma=t_a)
        sigma_x = sl.sigma
        kkt_scaled = sl.kkt_max
        lam_j = max(sigma_x, 1e-10) * penalty_level(p, n_rule,
                                                    options.lambda_rule)
    if not lam_j > 0:
        raise ValueError("lam_j must be positive")

    res = _cd_solve(X_rest, x_j, lam_j, norm_const, options)
    kappa = res["beta"]
    w = x_j - X_rest @ kappa
    denom = float(w @ x_j)
    if abs(denom) <= 1e-12 * max(1.0, float(x_j @ x_j)):
        raise NotIdentifiableError(
            f"coordinate {j} is not identifiable at lam_j={lam_j:.3g}: "
            "the correction score is orthogonal to its own column"
        )
    score = CorrectionScore(
        j=int(j),
        kappa=kappa,
        w=w,
        denominator=denom,
        lam_j=float(lam_j),
        sigma_x=sigma_x,
        kkt_residual=max(res["kkt"], kkt_scaled),
    )
    transformed._cache[key] = score
    return score


def debias_coordinate(transformed: TransformedDataset, fit: FixedEffectsFit,
                      score: CorrectionScore) -> float:
    """One-step corrected coordinate estimate."""
    resid = transformed.y - transformed.X @ fit.beta
    return float(fit.beta[score.j] + score.w @ resid / score.denominator)


def empirical_variance(transformed: TransformedDataset, fit: FixedEffectsFit,
                       score: CorrectionScore) -> float:
    """Cluster-level empirical variance of the debiased estimate.

    Sums ``(w_j^i . resid_i)^2`` over clusters and divides by the squared
    score denominator; averaging over clusters rather than rows is what
    absorbs the within-cluster correlation.
    """
    resid = transformed.y - transformed.X @ fit.beta
    prod = score.w * resid
    starts = transformed.offsets[:-1]
    cluster_sums = np.add.reduceat(prod, starts)
    v = float(cluster_sums @ cluster_sums) / score.denominator ** 2
    if v == 0.0:
        warnings.warn(
            f"empirical variance for coordinate {score.j} is zero; "
            "downstream intervals are degenerate"
        )
    return v


def confidence_interval(beta_db: float, v_hat: float, alpha: float):
    """Two-sided normal interval ``beta_db +- z_{alpha/2} sqrt(v_hat)``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    if v_hat < 0:
        raise ValueError("v_hat must be nonnegative")
    if v_hat == 0.0:
        warnings.warn("zero variance: confidence interval has zero width")
    half = norm.ppf(1.0 - alpha / 2.0) * np.sqrt(v_hat)
    return float(beta_db - half), float(beta_db + half)


def z_test(beta_db: float, v_hat: float, null_value: float = 0.0) -> dict:
    """Two-sided z-test of ``beta == null_value``."""
    if not v_hat > 0:
        raise ValueError("z-test needs a positive variance estimate")
    z = (beta_db - null_value) / np.sqrt(v_hat)
    return {"z": float(z), "p_value": float(2.0 * norm.sf(abs(z)))}


def infer_coordinates(dataset: ClusteredDataset, a: float, targets,
                      alpha: float = 0.05,
                      options: InferenceOptions = InferenceOptions(),
                      fit: FixedEffectsFit | None = None,
                      transformed: TransformedDataset | None = None,
                      ) -> InferenceResult:
    """Full inference pipeline for a set of coordinates (0-based).

    Whitens at ``a``, fits the initial Lasso (both reusable via ``fit`` /
    ``transformed``), then runs nodewise regression, debiasing, variance and
    interval/test per coordinate.  Per-coordinate failures are collected in
    ``result.failures``; the remaining coordinates are still returned.
    Zero-variance records are kept, flagged ``degenerate``.
    """
    if transformed is None:
        transformed = transform_dataset(dataset, float(a))
    if fit is None:
        fit = lasso_fit(transformed, options.lasso)
    if options.mode == "a0-robust" and transformed.a != 0.0:
        tf_db = transform_dataset(dataset, 0.0)
    else:
        tf_db = transformed

    records = []
    failures = {}
    kkt_max = fit.kkt_residual
    for j in targets:
        try:
            score = nodewise_fit(tf_db, int(j), options.lambda_j, options.lasso,
                                 norm=options.nodewise_norm)
            kkt_max = max(kkt_max, score.kkt_residual)
            beta_db = debias_coordinate(tf_db, fit, score)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                v_hat = empirical_variance(tf_db, fit, score)
                ci_lo, ci_hi = confidence_interval(beta_db, v_hat, alpha)
            if v_hat > 0:
                test = z_test(beta_db, v_hat)
                z, p_value = test["z"], test["p_value"]
                degenerate = False
            else:
                z, p_value, degenerate = np.nan, np.nan, True
            records.append(
                InferenceRecord(
                    j=int(j),
                    beta_db=beta_db,
                    v_hat=v_hat,
                    ci_lo=ci_lo,
                    ci_hi=ci_hi,
                    z=z,
                    p_value=p_value,
                    alpha=alpha,
                    lam_j=score.lam_j,
                    degenerate=degenerate,
                )
            )
        except ValueError as exc:
            failures[int(j)] = str(exc)
    return InferenceResult(
        records=records,
        failures=failures,
        fit=fit,
        a_fit=fit.a,
        a_debias=tf_db.a,
        alpha=alpha,
        mode=options.mode,
        kkt_max=kkt_max,
    )


def bh_fdr(p_values, level: float) -> np.ndarray:
    """Benjamini-Hochberg step-up selection; returns sorted 0-based indices."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.size and (np.nanmin(p) < 0 or np.nanmax(p) > 1):
        raise ValueError("p-values must lie in [0, 1]")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    m = p.size
    if m == 0:
        return np.array([], dtype=int)
    order = np.argsort(p, kind="stable")
    ranked = p[order]
    thresholds = level * np.arange(1, m + 1) / m
    passing = np.nonzero(ranked <= thresholds)[0]
    if passing.size == 0:
        return np.array([], dtype=int)
    k = passing.max() + 1
    return np.sort(order[:k])
