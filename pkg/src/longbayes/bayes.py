"""Longitudinal spatial Bayesian GLM with SPDE priors.

Model, per visit j and task k::

    y_j = sum_k (I (x) x_jk) beta_jk + eps_j,   eps_j ~ N(0, sigma2 I)
    beta_jk ~ N(0, Q_k^{-1}),  Q_k = tau_k (kappa_k^4 C + 2 kappa_k^2 G + G C^-1 G)

with (kappa_k, tau_k, sigma2) shared by all visits. Given the
hyperparameters the model is jointly Gaussian, so the evidence is computed
exactly from sparse factorizations and maximized (plus log-prior) over the
log-hyperparameters.

The data enter only through per-visit sufficient statistics: the K x K Gram
matrix of the task columns, ``X'Y`` (K x V), ``y'y`` and the number of
effective observations per vertex (``session.df``: kept volumes minus the
intercept and nuisance columns projected out, which makes the likelihood of
the residualized data exact).
"""

from dataclasses import dataclass, field
import json
import logging
import os
import time

import numpy as np
import scipy.sparse as sp
from scipy import optimize, stats
from scipy.special import gammaln

from .linalg import SparseCholesky, CholeskyError
from .surface import spde_precision, spde_logdet, spde_marginal_variance
from . import formats

log = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Hyperparameters:
    kappa: tuple
    tau: tuple
    sigma2: float

    def __post_init__(self):
        k = tuple(float(x) for x in np.atleast_1d(self.kappa))
        t = tuple(float(x) for x in np.atleast_1d(self.tau))
        if len(k) != len(t):
            raise ValueError("kappa and tau must have one entry per task")
        if min(k + t + (self.sigma2,)) <= 0:
            raise ValueError("hyperparameters must be strictly positive")
        object.__setattr__(self, "kappa", k)
        object.__setattr__(self, "tau", t)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def K(self):
        return len(self.kappa)

    def to_log(self):
        """[log kappa_1, log tau_1, ..., log kappa_K, log tau_K, log sigma2]"""
        v = np.empty(2 * self.K + 1)
        v[0:-1:2] = np.log(self.kappa)
        v[1:-1:2] = np.log(self.tau)
        v[-1] = np.log(self.sigma2)
        return v

    @classmethod
    def from_log(cls, v):
        v = np.asarray(v, float)
        e = np.exp(v)
        return cls(tuple(e[0:-1:2]), tuple(e[1:-1:2]), float(e[-1]))

    def as_dict(self):
        return {"kappa": list(self.kappa), "tau": list(self.tau), "sigma2": self.sigma2}


@dataclass(frozen=True)
class HyperPriors:
    """Log-normal priors on kappa_k, tau_k and a gamma prior on 1/sigma2.

    The log-prior is the density of the optimization variables
    (log kappa, log tau, log sigma2). ``flat=True`` drops it entirely.
    """

    log_kappa_mean: float = 0.0
    log_kappa_sd: float = 2.0
    log_tau_mean: float = 0.0
    log_tau_sd: float = 2.0
    prec_shape: float = 0.01
    prec_rate: float = 0.01
    flat: bool = False

    def __post_init__(self):
        if min(self.log_kappa_sd, self.log_tau_sd, self.prec_shape, self.prec_rate) <= 0:
            raise ValueError("prior sds and gamma shape/rate must be positive")

    def logpdf(self, theta):
        if self.flat:
            return 0.0
        lp = np.sum(stats.norm.logpdf(np.log(theta.kappa), self.log_kappa_mean, self.log_kappa_sd))
        lp += np.sum(stats.norm.logpdf(np.log(theta.tau), self.log_tau_mean, self.log_tau_sd))
        a, b = self.prec_shape, self.prec_rate
        prec = 1.0 / theta.sigma2
        lp += a * np.log(b) - gammaln(a) + a * np.log(prec) - b * prec
        return float(lp)

    def as_dict(self):
        return dict(self.__dict__)


@dataclass(frozen=True)
class SessionStats:
    gram: np.ndarray   # K x K
    xty: np.ndarray    # K x V
    yty: float
    n_obs: int         # effective observations per vertex

    @classmethod
    def from_session(cls, s):
        X = np.asarray(s.X_task, float)
        Y = np.asarray(s.Y, float)
        return cls(X.T @ X, X.T @ Y, float(np.sum(Y * Y)), int(s.df))


def _as_stats(sessions):
    return [s if isinstance(s, SessionStats) else SessionStats.from_session(s) for s in sessions]


def prior_precision(theta, fem):
    return sp.block_diag([spde_precision(fem, k, t).Q for k, t in zip(theta.kappa, theta.tau)],
                         format="csc")


def posterior_precision(theta, st, fem, Qprior=None):
    Qprior = prior_precision(theta, fem) if Qprior is None else Qprior
    return sp.csc_matrix(Qprior + sp.kron(st.gram / theta.sigma2, sp.identity(fem.n)))


def _check_dims(stats_list, fem, K):
    for i, st in enumerate(stats_list):
        if st.xty.shape != (K, fem.n):
            raise ValueError(f"session {i}: X'Y has shape {st.xty.shape}, "
                             f"expected ({K}, {fem.n})")


def log_marginal_likelihood(theta, sessions, fem, priors=HyperPriors(), return_parts=False):
    """Sum over visits of log p(y_j | theta) plus log pi(theta)."""
    stats_list = _as_stats(sessions)
    _check_dims(stats_list, fem, theta.K)
    ctx = f"at theta={theta.as_dict()}"
    Qprior = prior_precision(theta, fem)
    ld_prior = sum(spde_logdet(fem, k, t) for k, t in zip(theta.kappa, theta.tau))
    s2 = theta.sigma2
    total = 0.0
    for st in stats_list:
        Qp = posterior_precision(theta, st, fem, Qprior)
        chol = SparseCholesky(Qp, ctx)
        b = st.xty.ravel()
        quad = b @ chol.solve(b) / s2
        total += (0.5 * ld_prior - 0.5 * chol.logdet()
                  - 0.5 * st.n_obs * fem.n * (LOG2PI + np.log(s2))
                  - 0.5 / s2 * (st.yty - quad))
    lp = priors.logpdf(theta)
    if return_parts:
        return total + lp, total, lp
    return total + lp


def posterior_given_theta(theta, session, fem):
    """Exact conjugate posterior ``(mu, Qpost)`` of all task fields of one visit."""
    st = _as_stats([session])[0]
    _check_dims([st], fem, theta.K)
    Qp = posterior_precision(theta, st, fem)
    chol = SparseCholesky(Qp, f"at theta={theta.as_dict()}")
    mu = chol.solve(st.xty.ravel() / theta.sigma2)
    return mu, Qp


@dataclass
class FitOptions:
    max_iter: int = 200
    # relative objective tolerance; the evidence is O(T V J) in magnitude, so
    # 1e-6 would stop several log-likelihood units short of the optimum
    ftol: float = 1e-10
    gtol: float = 1e-2
    fd_step: float = 1e-4
    kappa0: float = 1.0
    init: Hyperparameters = None
    bounds_log_kappa: tuple = (np.log(1e-3), np.log(1e3))
    bounds_log_tau: tuple = (np.log(1e-6), np.log(1e6))
    bounds_log_sigma2: tuple = (np.log(1e-12), np.log(1e12))


def numerical_gradient(f, x, h):
    """Central-difference gradient."""
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def initial_theta(sessions, fem, K, kappa0=1.0):
    """kappa0 fixed; tau matched to OLS beta variance; sigma2 pooled OLS residual."""
    stats_list = _as_stats(sessions)
    betas = [[] for _ in range(K)]
    rss, dof = 0.0, 0
    for st in stats_list:
        B = np.linalg.lstsq(st.gram, st.xty, rcond=None)[0]
        for k in range(K):
            betas[k].append(B[k])
        rss += st.yty - np.sum(B * st.xty)
        dof += (st.n_obs - np.linalg.matrix_rank(st.gram)) * fem.n
    taus = []
    for k in range(K):
        var = np.var(np.concatenate(betas[k]))
        var = var if var > 0 else 1.0
        taus.append(1.0 / (4 * np.pi * kappa0 ** 2 * var))
    return Hyperparameters((kappa0,) * K, tuple(taus), max(rss / max(dof, 1), 1e-12))


@dataclass
class PosteriorFit:
    theta_hat: Hyperparameters
    priors: HyperPriors
    visit_ids: list
    mu: dict
    Qpost: dict
    log_marginal: float
    diagnostics: dict
    V: int
    K: int
    _chol: dict = field(default_factory=dict, repr=False)

    def field_mean(self, visit, task=0):
        return self.mu[visit][task * self.V:(task + 1) * self.V]

    def factor(self, visit):
        if visit not in self._chol:
            self._chol[visit] = SparseCholesky(self.Qpost[visit], f"(visit {visit})")
        return self._chol[visit]

    def marginal_sd(self, visit, task=0):
        idx = np.arange(task * self.V, (task + 1) * self.V)
        return np.sqrt(self.factor(visit).inv_diag(idx))


def fit_bayes_longitudinal(sessions, fem, priors=HyperPriors(), opts=None, visit_ids=None):
    """MAP hyperparameters pooled over visits, then per-visit posteriors."""
    opts = opts or FitOptions()
    if len(sessions) == 0:
        raise ValueError("need at least one session")
    stats_list = _as_stats(sessions)
    K = stats_list[0].gram.shape[0]
    if any(st.gram.shape != (K, K) for st in stats_list):
        raise ValueError("all visits must have the same tasks")
    _check_dims(stats_list, fem, K)
    if visit_ids is None:
        visit_ids = [getattr(s, "visit_id", str(i + 1)) for i, s in enumerate(sessions)]
    visit_ids = [str(v) for v in visit_ids]
    if len(set(visit_ids)) != len(visit_ids):
        raise ValueError(f"duplicate visit ids {visit_ids}")
    theta0 = opts.init or initial_theta(stats_list, fem, K, opts.kappa0)
    x0 = theta0.to_log()
    bounds = []
    for _ in range(K):
        bounds += [opts.bounds_log_kappa, opts.bounds_log_tau]
    bounds.append(opts.bounds_log_sigma2)
    x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])

    n_eval = [0]
    best = {"f": np.inf, "x": x0.copy()}

    def negobj(x):
        n_eval[0] += 1
        val = -log_marginal_likelihood(Hyperparameters.from_log(x), stats_list, fem, priors)
        if val < best["f"]:
            best["f"], best["x"] = val, np.array(x)
        return val

    def fun(x):
        f = negobj(x)
        g = numerical_gradient(negobj, x, opts.fd_step)
        return f, g

    t0 = time.perf_counter()
    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options=dict(maxiter=opts.max_iter, ftol=opts.ftol, gtol=opts.gtol))
    x_hat = res.x if res.fun <= best["f"] else best["x"]
    theta_hat = Hyperparameters.from_log(x_hat)
    converged = bool(res.success)
    if not converged:
        log.warning("hyperparameter optimization did not converge: %s", res.message)
    lml = -min(res.fun, best["f"])
    mu, Qpost, chols = {}, {}, {}
    Qprior = prior_precision(theta_hat, fem)
    for vid, st in zip(visit_ids, stats_list):
        Qp = posterior_precision(theta_hat, st, fem, Qprior)
        chol = SparseCholesky(Qp, f"(visit {vid})")
        mu[vid] = chol.solve(st.xty.ravel() / theta_hat.sigma2)
        Qpost[vid] = Qp
        chols[vid] = chol
    diag = {"converged": converged, "message": str(res.message), "n_iter": int(res.nit),
            "n_eval": n_eval[0], "grad_norm": float(np.max(np.abs(res.jac))),
            "seconds": time.perf_counter() - t0, "theta_init": theta0.as_dict()}
    return PosteriorFit(theta_hat, priors, visit_ids, mu, Qpost, float(lml), diag,
                        fem.n, K, chols)


# ---------------------------------------------------------------- persistence

def write_fit(fit, directory, mesh_checksum=""):
    os.makedirs(directory, exist_ok=True)
    header = {"theta_hat": fit.theta_hat.as_dict(), "priors": fit.priors.as_dict(),
              "log_marginal": fit.log_marginal, "diagnostics": fit.diagnostics,
              "visits": fit.visit_ids, "V": fit.V, "K": fit.K,
              "mesh_checksum": mesh_checksum}
    with open(os.path.join(directory, "fit.json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
    for vid in fit.visit_ids:
        formats.write_vertex_map(os.path.join(directory, f"mu_{vid}.bin"), fit.mu[vid])
        formats.write_coo(os.path.join(directory, f"qpost_{vid}.coo"), fit.Qpost[vid])


def read_fit(directory):
    with open(os.path.join(directory, "fit.json")) as fh:
        h = json.load(fh)
    th = h["theta_hat"]
    mu = {v: formats.read_vertex_map(os.path.join(directory, f"mu_{v}.bin")) for v in h["visits"]}
    Q = {v: formats.read_coo(os.path.join(directory, f"qpost_{v}.coo")) for v in h["visits"]}
    return PosteriorFit(Hyperparameters(th["kappa"], th["tau"], th["sigma2"]),
                        HyperPriors(**h["priors"]), h["visits"], mu, Q, h["log_marginal"],
                        h["diagnostics"], h["V"], h["K"])
