"""Sparse symmetric positive definite factorization.

SuperLU is run with a symmetric fill-reducing ordering and pivoting disabled,
which makes the LU factors an LDL^T decomposition of an SPD matrix: the
diagonal of U is the pivot vector D, all of whose entries must be positive.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class CholeskyError(np.linalg.LinAlgError):
    """Raised when a matrix expected to be SPD fails to factor."""


class SparseCholesky:
    """Factor an SPD sparse matrix once, then solve and take log-determinants.

    Parameters
    ----------
    A : sparse matrix
        Symmetric positive definite, square.
    context : str, optional
        Included in the error message on failure (e.g. the hyperparameters).
    """

    def __init__(self, A, context=""):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.n = A.shape[0]
        try:
            self._lu = spla.splu(
                A,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:  # exactly singular
            raise CholeskyError(f"factorization failed {context}: {exc}") from exc
        d = self._lu.U.diagonal()
        if not np.array_equal(self._lu.perm_r, self._lu.perm_c) or np.any(d <= 0) \
                or not np.all(np.isfinite(d)):
            raise CholeskyError(f"matrix is not positive definite {context}".rstrip())
        self._d = d

    def logdet(self):
        return float(np.sum(np.log(self._d)))

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        return self._lu.solve(b)

    def sample(self, n_samples, rng):
        """Draws from N(0, A^{-1}), one per column.

        Uses ``x = P U^{-1} D^{1/2} w``; the triangular solve with U alone is
        obtained from the full LU solve by pre-multiplying with L.
        """
        w = rng.standard_normal((self.n, n_samples))
        c = np.sqrt(self._d)[:, None] * w
        b = self._lu.L @ c
        # solve applies the row permutation first; pre-apply its inverse
        return self._lu.solve(b[self._lu.perm_r])

    def inv_diag(self, index=None):
        """Diagonal of A^{-1}, optionally restricted to ``index``.

        Solves against unit vectors in chunks; exact, no sampling.
        """
        idx = np.arange(self.n) if index is None else np.asarray(index)
        out = np.empty(len(idx))
        chunk = 256
        for s in range(0, len(idx), chunk):
            sub = idx[s:s + chunk]
            E = np.zeros((self.n, len(sub)))
            E[sub, np.arange(len(sub))] = 1.0
            out[s:s + chunk] = self.solve(E)[sub, np.arange(len(sub))]
        return out


def cholesky_logdet(A, context=""):
    return SparseCholesky(A, context).logdet()
