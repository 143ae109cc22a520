"""Quasi-likelihood estimation and inference for high-dimensional linear
mixed-effects models.

Pipeline: whiten clustered data with the proxy covariance ``a Z Z^T + I``,
fit the fixed effects by a weighted Lasso normalized by the effective sample
size, debias single coordinates through nodewise regressions for intervals
and tests, and estimate variance components by projection residuals plus
convex moment matching.  A Monte-Carlo harness reproduces the reference
simulation tables at desk scale.
"""

from qlmm.model_core import (
    Cluster,
    ClusteredDataset,
    FixedEffects,
    VarComps,
    dimensions,
    validate_dataset,
)
from qlmm.proxy import (
    ProxyWhitener,
    TransformedDataset,
    apply_inv_sqrt,
    build_whitener,
    effective_sample_size,
    lambda_star,
    sandwich_margins,
    transform_dataset,
)
from qlmm.lasso import (
    CrossValResult,
    FixedEffectsFit,
    LassoOptions,
    cross_validate_a,
    default_lambda,
    fit_fixed_effects,
    lasso_fit,
    ridge_weights,
    scaled_lasso_noise,
)
from qlmm.debias import (
    CorrectionScore,
    InferenceOptions,
    InferenceRecord,
    InferenceResult,
    bh_fdr,
    confidence_interval,
    debias_coordinate,
    empirical_variance,
    infer_coordinates,
    nodewise_fit,
    z_test,
)
from qlmm.varcomp import (
    SplitPlan,
    VarCompFit,
    VarCompOptions,
    cross_fit_varcomp,
    design_gram,
    eta_estimate,
    projection_residuals,
    psi_from_eta,
    sigma2_estimate,
    split_clusters,
)
from qlmm.simulate import (
    McOptions,
    McReport,
    Scenario,
    a_sweep,
    generate_dataset,
    make_basis,
    make_psi,
    run_mc,
    scenario_from_total,
)
from qlmm.solver_backend import BACKEND

__version__ = "0.1.0"
