import numpy as np
import pytest

from qlmm.model_core import Cluster, ClusteredDataset
from qlmm.simulate import Scenario, generate_dataset, make_basis
from qlmm.varcomp import (
    SplitPlan,
    VarCompOptions,
    cross_fit_varcomp,
    design_gram,
    eta_estimate,
    eta_estimate_from_moments,
    projection_residuals,
    psi_from_eta,
    sigma2_estimate,
    split_clusters,
)
from tests.conftest import make_dataset


def test_split_sizes(rng):
    data4 = make_dataset(rng, n=4)
    plan = split_clusters(data4, seed=0)
    assert len(plan.i1) == len(plan.i2) == 2
    data5 = make_dataset(rng, n=5)
    plan5 = split_clusters(data5, seed=0)
    assert {len(plan5.i1), len(plan5.i2)} == {2, 3}
    assert sorted(plan5.i1 + plan5.i2) == list(range(5))


def test_split_deterministic(rng):
    data = make_dataset(rng, n=7)
    assert split_clusters(data, seed=42) == split_clusters(data, seed=42)
    with pytest.raises(ValueError):
        split_clusters(make_dataset(rng, n=1), seed=0)


def test_projection_kills_span(rng):
    c = make_dataset(rng, n=1, m=5, p=3, q=2)[0]
    beta = np.zeros(3)
    coef = rng.standard_normal(2)
    shifted = Cluster(id=0, y=c.Z @ coef, X=c.X, Z=c.Z)
    out = projection_residuals(shifted, beta)
    assert np.linalg.norm(out["r_perp"]) < 1e-10
    assert out["dof"] == 5 - 2


def test_projection_identity_for_zero_Z(rng):
    c = Cluster(id=0, y=rng.standard_normal(4),
                X=rng.standard_normal((4, 2)), Z=np.zeros((4, 2)))
    out = projection_residuals(c, np.zeros(2))
    np.testing.assert_allclose(out["r_perp"], out["r"])
    assert out["rank"] == 0 and out["dof"] == 4


def test_projection_invariant_to_span_shifts(rng):
    c = make_dataset(rng, n=1, m=6, p=2, q=2)[0]
    beta = rng.standard_normal(2)
    base = projection_residuals(c, beta)
    for _ in range(5):
        coef = rng.standard_normal(2)
        shifted = Cluster(id=0, y=c.y + c.Z @ coef, X=c.X, Z=c.Z)
        out = projection_residuals(shifted, beta)
        np.testing.assert_allclose(out["r_perp"], base["r_perp"], atol=1e-10)


def test_sigma2_no_random_effects(rng):
    # q=0: the projector is the identity and the ratio is a plain mean square
    clusters = [
        Cluster(id=i, y=rng.standard_normal(4), X=rng.standard_normal((4, 2)),
                Z=np.zeros((4, 0)))
        for i in range(3)
    ]
    data = ClusteredDataset(clusters)
    beta = np.zeros(2)
    out = sigma2_estimate(data, range(3), beta)
    expected = sum(float(c.y @ c.y) for c in clusters) / 12
    assert out["sigma2"] == pytest.approx(expected)


def test_sigma2_unbiased_at_true_beta():
    # exact beta and Gaussian noise: MC mean within 0.01 of the truth
    sc = Scenario(n=36, m=4, p=10, q=2, psi_kind="diag", sigma2_e=0.25, seed=11)
    estimates = []
    for seed in np.random.SeedSequence(17).spawn(300):
        data, truth = generate_dataset(sc, seed=seed)
        out = sigma2_estimate(data, range(data.n), truth.beta)
        estimates.append(out["sigma2"])
    assert np.mean(estimates) == pytest.approx(0.25, abs=0.01)


def test_sigma2_requires_free_directions(rng):
    # every cluster has m <= rank(Z): no noise degrees of freedom
    clusters = [
        Cluster(id=i, y=rng.standard_normal(2), X=rng.standard_normal((2, 2)),
                Z=rng.standard_normal((2, 3)))
        for i in range(3)
    ]
    with pytest.raises(ValueError):
        sigma2_estimate(ClusteredDataset(clusters), range(3), np.zeros(2))


def test_sigma2_excludes_singletons(rng):
    big = Cluster(id=0, y=rng.standard_normal(4),
                  X=rng.standard_normal((4, 2)), Z=np.zeros((4, 1)))
    single = Cluster(id=1, y=np.array([100.0]),
                     X=rng.standard_normal((1, 2)), Z=np.zeros((1, 1)))
    data = ClusteredDataset([big, single])
    out = sigma2_estimate(data, [0, 1], np.zeros(2))
    assert out["dof"] == 4  # the singleton contributed nothing


def test_design_gram_single_entry_basis():
    basis = [np.diag(row) for row in np.eye(3)]
    D, min_eig = design_gram(basis)
    np.testing.assert_allclose(D, np.eye(3))
    assert min_eig == pytest.approx(1.0)


def test_design_gram_halves_q4():
    D, _ = design_gram(make_basis("diagonal-halves", 4))
    np.testing.assert_allclose(D, 2.0 * np.eye(2))


def test_design_gram_rejects_dependence():
    with pytest.raises(ValueError):
        design_gram([np.eye(2), np.eye(2)])


def test_eta_exact_moment_identifiability(rng):
    # expectation-substituted inputs return the exact coefficients
    for trial in range(10):
        data = make_dataset(rng, n=5, m=5, p=3, q=2, unequal=True)
        basis = make_basis("diagonal-halves", 2)
        eta_true = rng.uniform(0.2, 1.5, size=2)
        psi = psi_from_eta(eta_true, basis)
        sigma2 = float(rng.uniform(0.1, 1.0))
        moments = [c.Z @ psi @ c.Z.T + sigma2 * np.eye(c.m) for c in data]
        eta_hat = eta_estimate_from_moments(
            data, range(data.n), moments, sigma2, a=1.3, basis=basis
        )
        np.testing.assert_allclose(eta_hat, eta_true, atol=1e-8)


def test_eta_normal_equation_residual(rng):
    data = make_dataset(rng, n=6, m=4, p=3, q=2)
    basis = make_basis("diagonal-halves", 2)
    residuals = [c.y for c in data]
    from qlmm.varcomp import _eta_normal_equations

    moments = [np.outer(r, r) for r in residuals]
    A, b = _eta_normal_equations(data, range(data.n), 1.0, basis, 0.3,
                                 moments, 2)
    eta = eta_estimate(data, range(data.n), residuals, 0.3, 1.0, basis)
    assert np.linalg.norm(A @ eta - b) <= 1e-8 * max(np.linalg.norm(b), 1e-12)


def test_eta_minimizes_frobenius_objective(rng):
    # convexity certificate: the estimate beats 100 random perturbations
    data = make_dataset(rng, n=5, m=4, p=3, q=2)
    basis = make_basis("diagonal-halves", 2)
    residuals = [c.y for c in data]
    sigma2, a = 0.4, 1.5
    eta = eta_estimate(data, range(data.n), residuals, sigma2, a, basis)

    from qlmm.proxy import build_whitener

    w = build_whitener(data, a)

    def objective(e):
        psi = psi_from_eta(e, basis)
        total = 0.0
        for i, c in enumerate(data):
            inner = np.outer(residuals[i], residuals[i]) - c.Z @ psi @ c.Z.T \
                - sigma2 * np.eye(c.m)
            half = w.apply_inv_sqrt(i, w.apply_inv_sqrt(i, inner).T)
            total += float(np.sum(half * half))
        return total

    base = objective(eta)
    for _ in range(100):
        assert base <= objective(eta + rng.standard_normal(2) * 0.3) + 1e-9


def test_psi_from_eta_cases():
    basis = make_basis("diagonal-halves", 4)
    np.testing.assert_allclose(psi_from_eta([0.0, 0.0], basis), np.zeros((4, 4)))
    np.testing.assert_allclose(psi_from_eta([0.56, 0.56], basis),
                               0.56 * np.eye(4))
    np.testing.assert_allclose(psi_from_eta([2.5], [np.eye(3)]), 2.5 * np.eye(3))
    with pytest.raises(ValueError):
        psi_from_eta([1.0, 2.0], [np.eye(2)])


def test_cross_fit_identical_clusters_equals_single(rng):
    base = make_dataset(rng, n=1, m=5, p=3, q=2)[0]
    clusters = [Cluster(id=i, y=base.y, X=base.X, Z=base.Z) for i in range(6)]
    data = ClusteredDataset(clusters)
    basis = make_basis("diagonal-halves", 2)
    cross = cross_fit_varcomp(data, 1.0, basis,
                              VarCompOptions(split="cross", seed=3))
    single = cross_fit_varcomp(data, 1.0, basis,
                               VarCompOptions(split="single", seed=3))
    assert cross.sigma2_e == pytest.approx(single.sigma2_e, rel=1e-9)
    np.testing.assert_allclose(cross.eta, single.eta, atol=1e-9)


def test_cross_fit_swap_invariance(rng):
    sc = Scenario(n=10, m=4, p=6, q=2, psi_kind="diag", seed=5)
    data, _ = generate_dataset(sc)
    basis = make_basis("diagonal-halves", 2)
    plan = split_clusters(data, seed=9)
    opts = VarCompOptions(split="cross")
    a_fit = cross_fit_varcomp(data, 1.0, basis, opts, plan=plan)
    b_fit = cross_fit_varcomp(data, 1.0, basis, opts, plan=plan.swapped())
    assert a_fit.sigma2_e == pytest.approx(b_fit.sigma2_e, rel=1e-9)
    np.testing.assert_allclose(a_fit.eta, b_fit.eta, atol=1e-9)


def test_varcomp_fit_reconstructs_psi(rng):
    sc = Scenario(n=8, m=4, p=6, q=2, psi_kind="diag", seed=6)
    data, _ = generate_dataset(sc)
    basis = make_basis("diagonal-halves", 2)
    fit = cross_fit_varcomp(data, 1.0, basis, VarCompOptions(split="none"))
    np.testing.assert_allclose(fit.psi, psi_from_eta(fit.eta, basis))
    assert fit.sigma2_e >= 0.0
    assert fit.dg_min_eigval > 0


def test_psd_projection_flag(rng):
    sc = Scenario(n=8, m=4, p=6, q=2, psi_kind="singular", seed=8)
    data, _ = generate_dataset(sc)
    basis = make_basis("diagonal-halves", 2)
    fit = cross_fit_varcomp(data, 1.0, basis,
                            VarCompOptions(split="none", psd_project=True))
    assert np.linalg.eigvalsh(fit.psi).min() >= -1e-12 or not fit.psd_projected
