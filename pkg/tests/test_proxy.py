import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlmm.model_core import Cluster, ClusteredDataset
from qlmm.oracles import dense_matrix_power, dense_sigma_a
from qlmm.proxy import (
    build_whitener,
    effective_sample_size,
    lambda_star,
    sandwich_margins,
    transform_dataset,
)
from tests.conftest import make_dataset


def zero_z_dataset(rng, n=3, m=4, p=5):
    clusters = [
        Cluster(id=i, y=rng.standard_normal(m), X=rng.standard_normal((m, p)),
                Z=np.zeros((m, 2)))
        for i in range(n)
    ]
    return ClusteredDataset(clusters)


def test_zero_random_design_gives_identity(rng):
    data = zero_z_dataset(rng)
    w = build_whitener(data, 3.7)
    assert effective_sample_size(w) == pytest.approx(data.N)
    M = rng.standard_normal((4, 3))
    np.testing.assert_allclose(w.apply_inv_sqrt(0, M), M)


def test_a_zero_is_identity_and_full_size(rng):
    data = make_dataset(rng, unequal=True)
    w = build_whitener(data, 0.0)
    assert effective_sample_size(w) == pytest.approx(data.N)
    tf = transform_dataset(data, 0.0)
    np.testing.assert_array_equal(tf.X, data.stacked_X())
    np.testing.assert_array_equal(tf.y, data.stacked_y())


def test_negative_a_rejected(rng):
    with pytest.raises(ValueError):
        build_whitener(make_dataset(rng), -0.5)


def test_two_by_two_against_eigendecomposition(rng):
    # m=2, q=1, Z = (1,1)^T, a=1 -> S_a = [[2,1],[1,2]]
    cluster = Cluster(id=0, y=np.zeros(2), X=rng.standard_normal((2, 3)),
                      Z=np.array([[1.0], [1.0]]))
    data = ClusteredDataset([cluster])
    w = build_whitener(data, 1.0)
    sigma = np.array([[2.0, 1.0], [1.0, 2.0]])
    inv_sqrt = dense_matrix_power(sigma, -0.5)
    M = rng.standard_normal((2, 4))
    np.testing.assert_allclose(w.apply_inv_sqrt(0, M), inv_sqrt @ M, atol=1e-12)
    assert w.t_a == pytest.approx(np.trace(np.linalg.inv(sigma)))


def test_apply_to_sqrt_gives_orthonormal_result(rng):
    data = make_dataset(rng, n=2, m=5, q=2)
    a = 2.5
    w = build_whitener(data, a)
    for i, c in enumerate(data.clusters):
        sigma = a * c.Z @ c.Z.T + np.eye(c.m)
        M = dense_matrix_power(sigma, 0.5)
        out = w.apply_inv_sqrt(i, M)
        np.testing.assert_allclose(out.T @ out, np.eye(c.m), atol=1e-9)


def test_apply_twice_equals_inverse(rng):
    data = make_dataset(rng, n=3, m=4, q=2, unequal=True)
    a = 1.3
    w = build_whitener(data, a)
    for i, c in enumerate(data.clusters):
        sigma = a * c.Z @ c.Z.T + np.eye(c.m)
        M = rng.standard_normal((c.m, 3))
        twice = w.apply_inv_sqrt(i, w.apply_inv_sqrt(i, M))
        np.testing.assert_allclose(twice, np.linalg.solve(sigma, M), atol=1e-10)
        np.testing.assert_allclose(w.apply_inv(i, M), np.linalg.solve(sigma, M),
                                   atol=1e-10)


def test_inv_sqrt_squared_times_sigma_is_identity(rng):
    # relative Frobenius error within 1e-8 on every cluster
    data = make_dataset(rng, n=4, m=5, q=3, unequal=True)
    a = 4.0
    w = build_whitener(data, a)
    for i, c in enumerate(data.clusters):
        sigma = a * c.Z @ c.Z.T + np.eye(c.m)
        prod = w.apply_inv_sqrt(i, w.apply_inv_sqrt(i, sigma))
        err = np.linalg.norm(prod - np.eye(c.m)) / np.sqrt(c.m)
        assert err < 1e-8


def test_wide_random_design_uses_eigh_branch(rng):
    # q > m exercises the full eigendecomposition path
    data = make_dataset(rng, n=3, m=3, q=6)
    a = 2.0
    w = build_whitener(data, a)
    for i, c in enumerate(data.clusters):
        sigma = a * c.Z @ c.Z.T + np.eye(c.m)
        np.testing.assert_allclose(
            w.apply_inv_sqrt(i, np.eye(c.m)),
            dense_matrix_power(sigma, -0.5),
            atol=1e-10,
        )


def test_effective_sample_size_matches_dense_trace(rng):
    data = make_dataset(rng, n=3, m=4, q=2, unequal=True)
    for a in (0.0, 0.7, 5.0):
        w = build_whitener(data, a)
        dense = dense_sigma_a(data, a)
        assert w.t_a == pytest.approx(np.trace(np.linalg.inv(dense)), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    sizes=st.lists(st.integers(min_value=1, max_value=7), min_size=1, max_size=5),
    q=st.integers(min_value=0, max_value=8),
    a=st.floats(min_value=0.0, max_value=50.0),
    seed=st.integers(min_value=0, max_value=10_000),
)
def test_effective_sample_size_bounds(sizes, q, a, seed):
    # sum of max(m_i - q, 0) <= T_a <= N for every a >= 0
    rng = np.random.default_rng(seed)
    clusters = [
        Cluster(id=i, y=rng.standard_normal(m), X=rng.standard_normal((m, 2)),
                Z=rng.standard_normal((m, q)))
        for i, m in enumerate(sizes)
    ]
    data = ClusteredDataset(clusters)
    t_a = effective_sample_size(build_whitener(data, a))
    lower = sum(max(m - q, 0) for m in sizes)
    assert lower - 1e-9 <= t_a <= data.N + 1e-9


def test_effective_sample_size_nonincreasing_in_a(rng):
    data = make_dataset(rng, n=4, m=5, q=2)
    grid = [0.0, 0.1, 0.5, 1.0, 4.0, 16.0, 64.0]
    values = [effective_sample_size(build_whitener(data, a)) for a in grid]
    assert all(v1 >= v2 - 1e-12 for v1, v2 in zip(values, values[1:]))


def test_transform_identity_for_empty_Z(rng):
    clusters = [
        Cluster(id=i, y=rng.standard_normal(3), X=rng.standard_normal((3, 4)),
                Z=np.zeros((3, 0)))
        for i in range(2)
    ]
    data = ClusteredDataset(clusters)
    tf = transform_dataset(data, 7.0)
    np.testing.assert_array_equal(tf.X, data.stacked_X())
    assert tf.t_a == pytest.approx(data.N)


def test_transform_round_trip_with_dense_sqrt(rng):
    data = make_dataset(rng, n=3, m=4, q=2)
    a = 3.0
    tf = transform_dataset(data, a)
    sqrt = dense_matrix_power(dense_sigma_a(data, a), 0.5)
    np.testing.assert_allclose(sqrt @ tf.X, data.stacked_X(), atol=1e-9)
    np.testing.assert_allclose(sqrt @ tf.y, data.stacked_y(), atol=1e-9)


def test_apply_rejects_wrong_row_count(rng):
    data = make_dataset(rng, n=2, m=4, q=1)
    w = build_whitener(data, 1.0)
    with pytest.raises(ValueError):
        w.apply_inv_sqrt(0, np.zeros((5, 2)))


def test_lambda_star_zero_design_closed_form(rng):
    data = zero_z_dataset(rng, n=4, m=3, p=6)
    sigma2 = 0.49
    expected = np.sqrt(sigma2 * np.log(data.p) / data.N)
    assert lambda_star(data, 1.0, np.eye(2), sigma2) == pytest.approx(expected)


def test_lambda_star_matches_dense_blocks(rng):
    data = make_dataset(rng, n=3, m=4, q=2)
    psi = np.array([[1.0, 0.3], [0.3, 0.8]])
    sigma2 = 0.5
    a = 2.0
    dense = dense_sigma_a(data, a)
    inv = np.linalg.inv(dense)
    theta = np.zeros_like(dense)
    offsets = data.row_offsets()
    for i, c in enumerate(data.clusters):
        sl = slice(offsets[i], offsets[i + 1])
        theta[sl, sl] = c.Z @ psi @ c.Z.T + sigma2 * np.eye(c.m)
    expected = np.sqrt(np.trace(inv @ theta @ inv) * np.log(data.p)) / np.trace(inv)
    assert lambda_star(data, a, psi, sigma2) == pytest.approx(expected, rel=1e-10)


def test_lambda_star_grid_minimum_near_theory(rng):
    # with Psi = eta I the minimizer sits at eta / sigma2
    data = make_dataset(rng, n=8, m=6, q=2)
    eta, sigma2 = 1.2, 0.4
    grid = np.linspace(0.5, 6.0, 23)
    vals = [lambda_star(data, a, eta * np.eye(2), sigma2) for a in grid]
    best = grid[int(np.argmin(vals))]
    theory = eta / sigma2
    step = grid[1] - grid[0]
    assert abs(best - theory) <= step + 1e-12


def test_lambda_star_rejects_non_psd(rng):
    data = make_dataset(rng, n=2, m=4, q=2)
    with pytest.raises(ValueError):
        lambda_star(data, 1.0, np.array([[1.0, 2.0], [2.0, 1.0]]), 0.3)


def test_sandwich_exact_when_proxy_matches(rng):
    # Psi = I, sigma2 = 1, a = 1 makes the proxy equal the truth
    data = make_dataset(rng, n=3, m=4, q=2)
    out = sandwich_margins(data, 1.0, np.eye(2), 1.0)
    assert abs(out["lower"]) < 1e-10 and abs(out["upper"]) < 1e-10


def test_sandwich_scaled_match(rng):
    data = make_dataset(rng, n=3, m=4, q=2)
    out = sandwich_margins(data, 2.0, 2.0 * np.eye(2), 1.0)
    assert out["lower"] >= -1e-8 and out["upper"] >= -1e-8


def test_sandwich_random_instances(rng):
    for _ in range(25):
        data = make_dataset(rng, n=2, m=4, q=2, unequal=True)
        A = rng.standard_normal((2, 2))
        psi = A @ A.T + 0.2 * np.eye(2)
        sigma2 = float(rng.uniform(0.2, 2.0))
        for a in (0.5, 2.0):
            out = sandwich_margins(data, a, psi, sigma2)
            assert out["lower"] >= -1e-8
            assert out["upper"] >= -1e-8


def test_sandwich_rejects_singular_psi(rng):
    data = make_dataset(rng, n=2, m=3, q=2)
    with pytest.raises(ValueError):
        sandwich_margins(data, 1.0, np.diag([1.0, 0.0]), 1.0)
    with pytest.raises(ValueError):
        sandwich_margins(data, 0.0, np.eye(2), 1.0)
