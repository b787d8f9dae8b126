"""Massive-univariate GLM with Bonferroni and Benjamini-Hochberg corrections."""

from dataclasses import dataclass
import csv

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class ClassicalFit:
    beta_hat: np.ndarray  # V x K
    se: np.ndarray        # V x K
    tstat: np.ndarray     # V, first (HRF) column
    pvals: np.ndarray     # V
    df: int
    m: int
    sigma2: np.ndarray    # V residual variances
    alternative: str = "two-sided"

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex", "beta", "se", "t", "p"])
            for v in range(self.m):
                w.writerow([v, repr(float(self.beta_hat[v, 0])), repr(float(self.se[v, 0])),
                            repr(float(self.tstat[v])), repr(float(self.pvals[v]))])


def fit_classical(session, alternative="two-sided"):
    """Per-vertex OLS of residualized data on the residualized task columns.

    Degrees of freedom account for the intercept and nuisance columns removed
    upstream: ``df = T_kept - 1 - p - K``.
    """
    X = np.asarray(session.X_task, float)
    Y = np.asarray(session.Y, float)
    T, K = X.shape
    df = T - 1 - session.n_nuisance - K
    if df < 1:
        raise ValueError(f"not enough volumes: T={T}, K={K}, nuisance={session.n_nuisance}")
    XtX = X.T @ X
    if np.linalg.matrix_rank(XtX) < K:
        raise np.linalg.LinAlgError("task design is singular (zero or collinear column)")
    XtX_inv = np.linalg.inv(XtX)
    B = XtX_inv @ (X.T @ Y)  # K x V
    R = Y - X @ B
    s2 = np.sum(R ** 2, axis=0) / df
    se = np.sqrt(np.outer(s2, np.diag(XtX_inv)))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = B[0] / se[:, 0]
    t = np.where(se[:, 0] > 0, t, np.sign(B[0]) * np.inf)
    if alternative == "two-sided":
        p = 2.0 * stats.t.sf(np.abs(t), df)
    elif alternative == "greater":
        p = stats.t.sf(t, df)
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    p = np.nan_to_num(p, nan=1.0)
    return ClassicalFit(B.T, se, t, np.clip(p, 0.0, 1.0), int(df), Y.shape[1], s2, alternative)


# relative slack on the <= comparisons so that ties that are exact in decimal
# arithmetic (p = k * alpha / m) are not lost to rounding
_TIE_RTOL = 1e-12


def _check(p, alpha):
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        raise ValueError("no p-values given")
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    return p


def bonferroni(pvals, alpha=0.05):
    p = _check(pvals, alpha)
    return p <= alpha / p.size * (1 + _TIE_RTOL)


def bh_fdr(pvals, alpha=0.05):
    """Benjamini-Hochberg step-up rule; returns the rejection mask."""
    p = _check(pvals, alpha)
    m = p.size
    ps = np.sort(p)
    ok = np.flatnonzero(ps <= alpha * np.arange(1, m + 1) / m * (1 + _TIE_RTOL))
    if ok.size == 0:
        return np.zeros(m, dtype=bool)
    return p <= ps[ok[-1]]
