import numpy as np
import pytest
import scipy.sparse as sp

from longbayes.linalg import CholeskyError, SparseCholesky, cholesky_logdet
from longbayes.surface import spde_precision


@pytest.fixture
def spd(small_fem):
    return spde_precision(small_fem, 0.5, 2.0).Q + sp.identity(small_fem.n) * 0.1


def test_logdet_and_solve_match_dense(spd, rng):
    A = spd.toarray()
    ch = SparseCholesky(spd)
    assert ch.logdet() == pytest.approx(np.linalg.slogdet(A)[1], rel=1e-12)
    b = rng.normal(size=(A.shape[0], 3))
    np.testing.assert_allclose(ch.solve(b), np.linalg.solve(A, b), rtol=1e-9, atol=1e-12)
    assert cholesky_logdet(spd) == pytest.approx(ch.logdet())


def test_inv_diag_exact(spd):
    inv = np.linalg.inv(spd.toarray())
    ch = SparseCholesky(spd)
    np.testing.assert_allclose(ch.inv_diag(), np.diag(inv), rtol=1e-10)
    np.testing.assert_allclose(ch.inv_diag([3, 0, 7]), np.diag(inv)[[3, 0, 7]], rtol=1e-10)


def test_samples_have_inverse_covariance(spd):
    cov = np.linalg.inv(spd.toarray())
    x = SparseCholesky(spd).sample(200_000, np.random.default_rng(1))
    emp = x @ x.T / x.shape[1]
    # Monte Carlo error of a covariance entry is about sqrt((s_ii s_jj + s_ij^2) / n)
    sd = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / x.shape[1])
    assert np.all(np.abs(emp - cov) < 5 * sd)


def test_indefinite_matrix_raises():
    A = sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(CholeskyError, match="not positive definite"):
        SparseCholesky(A, "(test)")


def test_singular_matrix_raises():
    A = sp.csc_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(CholeskyError):
        SparseCholesky(A)
