import math

import numpy as np
import pytest
from scipy.special import ndtri

from smcprobit.probit import (
    BLOCK,
    SHARED,
    DegenerateEstimateError,
    Parameters,
    ProbitDataset,
    build_design_matrix,
    log_likelihood,
    orthant_from_response,
    project_to_identified,
    recompose,
    univariate_probit_init,
)

from .conftest import random_spd


@pytest.mark.parametrize(
    "response, expected",
    [((1, 1, 1, 1), (1, 1, 1, 1)), ((0, 0), (-1, -1)), ((1, 0, 1), (1, -1, 1))],
)
def test_orthant_from_response(response, expected):
    np.testing.assert_array_equal(orthant_from_response(response), expected)


def test_orthant_rejects_non_binary():
    with pytest.raises(ValueError):
        orthant_from_response([1, 2])


def test_block_design_two_scalars():
    d = build_design_matrix([[2.5], [-1.0]], BLOCK)
    np.testing.assert_array_equal(d.matrix, [[2.5, 0.0], [0.0, -1.0]])


def test_shared_design_sixcities_rows():
    h = 1.0
    rows = [[1, i - 9, h, (i - 9) * h] for i in (7, 8, 9, 10)]
    d = build_design_matrix(rows, SHARED)
    np.testing.assert_array_equal(d.matrix[0], [1, -2, 1, -2])
    np.testing.assert_array_equal(d.matrix[3], [1, 1, 1, 1])


def test_p1_layouts_coincide():
    a = build_design_matrix([[1.0, 2.0, 3.0]], BLOCK).matrix
    b = build_design_matrix([[1.0, 2.0, 3.0]], SHARED).matrix
    np.testing.assert_array_equal(a, b)
    assert a.shape == (1, 3)


def test_dataset_design_matches_single_row_builder(rng):
    n = 6
    covs = [rng.normal(size=(n, 2)), rng.normal(size=(n, 3))]
    ds = ProbitDataset(rng.integers(0, 2, size=(n, 2)), covs)
    x = ds.design(BLOCK)
    for j in range(n):
        one = build_design_matrix([c[j] for c in covs], BLOCK).matrix
        np.testing.assert_array_equal(x[j], one)


def test_dataset_validation():
    with pytest.raises(ValueError):
        ProbitDataset(np.array([[0, 2]]), [np.ones((1, 1)), np.ones((1, 1))])
    with pytest.raises(ValueError):
        ProbitDataset(np.array([[0, 1]]), [np.ones((1, 1))])


def test_init_intercept_only_matches_inverse_cdf(rng):
    n = 4000
    y = np.column_stack([rng.random(n) < 0.3, rng.random(n) < 0.5]).astype(int)
    ds = ProbitDataset(y, [np.ones((n, 1)), np.ones((n, 1))])
    init = univariate_probit_init(ds, BLOCK)
    np.testing.assert_allclose(init.beta, ndtri(y.mean(axis=0)), atol=1e-8)
    np.testing.assert_array_equal(init.sigma, np.eye(2))


def test_init_balanced_gives_zero_intercept():
    y = np.array([[0], [1]] * 50)
    ds = ProbitDataset(y, [np.ones((100, 1))])
    assert abs(univariate_probit_init(ds).beta[0]) < 1e-12


def test_init_irrelevant_covariate_near_zero(rng):
    n = 20000
    x = rng.normal(size=n)
    y = (rng.random(n) < 0.4).astype(int)[:, None]
    ds = ProbitDataset(y, [np.column_stack([np.ones(n), x])])
    b = univariate_probit_init(ds).beta
    assert abs(b[0] - ndtri(y.mean())) < 0.01
    assert abs(b[1]) < 0.03


def test_projection_identity():
    beta = np.array([0.3, -1.0])
    ip = project_to_identified(Parameters(beta, np.eye(2)), "correlation", (1, 1))
    np.testing.assert_array_equal(ip.omega, np.eye(2))
    np.testing.assert_array_equal(ip.lam, beta)
    np.testing.assert_array_equal(ip.scale, [1, 1])


def test_projection_diagonal_correlation():
    beta = np.array([2.0, 4.0, 3.0, 6.0])
    ip = project_to_identified(Parameters(beta, np.diag([4.0, 9.0])), "correlation", (2, 2))
    np.testing.assert_allclose(ip.omega, np.eye(2))
    np.testing.assert_allclose(ip.lam, [1.0, 2.0, 1.0, 2.0])
    np.testing.assert_allclose(ip.scale, [2.0, 3.0])


def test_projection_fixed_first_uniform():
    ip = project_to_identified(Parameters([1.0, 1.0], [[4.0, 2.0], [2.0, 4.0]]), "fixed_first", (1, 1))
    np.testing.assert_allclose(ip.omega, [[1.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(ip.scale, [2.0, 2.0])


def test_projection_roundtrip(rng):
    sig = random_spd(rng, 3)
    beta = rng.normal(size=6)
    params = Parameters(beta, sig)
    for mode in ("correlation", "fixed_first"):
        back = recompose(project_to_identified(params, mode, (2, 2, 2)), (2, 2, 2))
        np.testing.assert_allclose(back.beta, beta, rtol=1e-12)
        np.testing.assert_allclose(back.sigma, sig, rtol=1e-12)


def test_projection_shared_requires_common_scale():
    params = Parameters([1.0, 2.0], np.diag([1.0, 4.0]))
    with pytest.raises(ValueError):
        project_to_identified(params, "correlation", (2, 2), SHARED)
    ip = project_to_identified(params, "fixed_first", (2, 2), SHARED)
    np.testing.assert_allclose(ip.omega, np.diag([1.0, 4.0]))


def test_projection_rejects_bad_diagonal():
    with pytest.raises(ValueError):
        project_to_identified(Parameters([0.0], [[-1.0]]), "correlation")


def test_log_likelihood_basic():
    assert log_likelihood(None, None, np.ones(5)) == 0.0
    assert log_likelihood(None, None, [0.5]) == pytest.approx(math.log(0.5))
    with pytest.raises(DegenerateEstimateError):
        log_likelihood(None, None, [0.5, 0.0])
