"""Disability predictors, natural splines and random-intercept mixed models."""

from dataclasses import dataclass, field
import datetime as dt
import hashlib
import warnings

import numpy as np
from scipy import optimize, stats
from scipy.interpolate import BSpline
from scipy.linalg import qr

ITEM_NAMES = ("speech", "salivation", "swallowing", "handwriting", "cutting",
              "dressing_hygiene", "turning_in_bed", "walking", "climbing_stairs",
              "dyspnea", "orthopnea", "respiratory_insufficiency")
HAND_ITEMS = ("handwriting", "cutting", "dressing_hygiene")
DAYS_PER_MONTH = 30.4375


@dataclass(frozen=True)
class ClinicalVisit:
    subject_id: str
    group: str
    visit_date: dt.date
    enrollment_date: dt.date
    onset_date: dt.date = None
    alsfrs_items: tuple = None
    visit_id: str = ""

    @property
    def total(self):
        return None if self.alsfrs_items is None else int(sum(self.alsfrs_items))


def _items(visit):
    if isinstance(visit, ClinicalVisit):
        items = visit.alsfrs_items
    elif isinstance(visit, dict):
        items = [visit.get(n) for n in ITEM_NAMES]
    else:
        items = visit
    if items is None or len(items) != 12:
        raise ValueError("ALSFRS-R needs 12 item scores")
    out = []
    for name, v in zip(ITEM_NAMES, items):
        if v is None or v == "" or (isinstance(v, float) and np.isnan(v)):
            raise ValueError(f"missing ALSFRS-R item {name!r}")
        iv = int(v)
        if iv != float(v) or not 0 <= iv <= 4:
            raise ValueError(f"ALSFRS-R item {name!r} must be an integer 0-4, got {v!r}")
        out.append(iv)
    return out


def disability_scores(visit):
    """(total, hand motor, other) disability, each in [0, 1]."""
    items = _items(visit)
    hand = sum(v for n, v in zip(ITEM_NAMES, items) if n in HAND_ITEMS)
    other = sum(items) - hand
    return 1 - sum(items) / 48.0, 1 - hand / 12.0, 1 - other / 36.0


def progression_rate(last_total, onset_date=None, last_visit_date=None, months=None):
    """ALSFRS-R points lost per month from onset to the last visit, and its class.

    The elapsed time is given either as two dates (months = days / 30.4375)
    or directly as ``months``. Classes: slow (< 0.1), moderate ([0.1, 0.7)),
    fast (>= 0.7).
    """
    if months is None:
        if onset_date is None or last_visit_date is None:
            raise ValueError("give onset and last-visit dates, or months")
        months = (last_visit_date - onset_date).days / DAYS_PER_MONTH
    if not months > 0:
        raise ValueError("onset must precede the last visit")
    if not 0 <= last_total <= 48:
        raise ValueError(f"ALSFRS-R total must be in [0, 48], got {last_total}")
    rate = (48 - last_total) / months
    # compare on a rounded value so that decimal boundaries are exact
    r = round(rate, 12)
    cls = "slow" if r < 0.1 else ("moderate" if r < 0.7 else "fast")
    return rate, cls


def windowing(visits, window_days=730, exclude=()):
    """Keep the visits used for the mixed models.

    ALS subjects keep the ``window_days`` window, anchored at one of their
    visit dates, with the largest ALSFRS-R range (earliest on ties). HC
    subjects drop visits more than ``window_days`` after enrollment. Subjects
    in ``exclude`` are removed.
    """
    by_subject = {}
    for v in visits:
        by_subject.setdefault(v.subject_id, []).append(v)
    kept = []
    for sid, vs in by_subject.items():
        if sid in exclude:
            continue
        vs = sorted(vs, key=lambda v: v.visit_date)
        if vs[0].group == "ALS":
            best, best_range = None, -1
            for anchor in vs:
                end = anchor.visit_date + dt.timedelta(days=window_days)
                inside = [v for v in vs if anchor.visit_date <= v.visit_date <= end]
                tot = [v.total for v in inside]
                rng = max(tot) - min(tot)
                if rng > best_range:
                    best, best_range = inside, rng
            kept += best
        else:
            kept += [v for v in vs if (v.visit_date - v.enrollment_date).days <= window_days]
    return kept


# ------------------------------------------------------------------ splines

@dataclass(frozen=True)
class SplineBasis:
    """Natural cubic spline with two interior knots (3 columns, no intercept)."""

    interior_knots: tuple
    boundary_knots: tuple

    def __post_init__(self):
        k = np.r_[self.boundary_knots[0], self.interior_knots, self.boundary_knots[1]]
        if np.any(np.diff(k) <= 0):
            raise ValueError(f"knots must be strictly increasing, got {k.tolist()}")

    @classmethod
    def from_data(cls, x, quantiles=(0.33, 0.67)):
        x = np.asarray(x, float)
        if len(np.unique(x)) < 4:
            raise ValueError("need at least 4 distinct predictor values")
        # linear-interpolation sample quantiles
        q = np.quantile(x, quantiles)
        return cls(tuple(q.tolist()), (float(x.min()), float(x.max())))

    @property
    def dim(self):
        return len(self.interior_knots) + 1


def _bspline_parts(basis):
    lo, hi = basis.boundary_knots
    t = np.r_[[lo] * 4, basis.interior_knots, [hi] * 4]
    n = len(t) - 4
    splines = [BSpline(t, np.eye(n)[i], 3, extrapolate=True) for i in range(n)]
    # second-derivative constraints at both boundary knots
    const = np.array([[s.derivative(2)(b) for s in splines] for b in (lo, hi)])
    # drop the first B-spline (no intercept), project onto the null space
    const = const[:, 1:]
    Qf, _ = np.linalg.qr(const.T, mode="complete")
    return splines[1:], Qf[:, 2:]


def ns_basis(x, basis):
    """Natural cubic spline basis evaluated at ``x`` (n x 3).

    B-spline basis with the natural boundary conditions imposed by projecting
    onto the null space of the boundary second-derivative constraints. All
    columns vanish at the lower boundary knot and are extended linearly
    outside the boundary knots.
    """
    x = np.asarray(x, float)
    splines, P = _bspline_parts(basis)
    lo, hi = basis.boundary_knots

    def raw(z):
        return np.column_stack([s(z) for s in splines])

    def raw_d1(z):
        return np.column_stack([s.derivative(1)(z) for s in splines])

    B = np.empty((len(x), len(splines)))
    inside = (x >= lo) & (x <= hi)
    B[inside] = raw(x[inside])
    for edge, sel in ((lo, x < lo), (hi, x > hi)):
        if sel.any():
            B[sel] = raw(np.array([edge])) + (x[sel] - edge)[:, None] * raw_d1(np.array([edge]))
    out = B @ P
    out[np.abs(out) < 1e-15] = 0.0
    return out


# ------------------------------------------------------------------ mixed models

@dataclass(frozen=True)
class ModelSpec:
    """Fixed-effect terms: (predictor, 'spline' | 'linear') pairs after the intercept."""

    name: str
    terms: tuple = ()


ALS_TOTAL = ModelSpec("als_total", (("D_tot", "spline"),))
ALS_HAND = ModelSpec("als_hand", (("D_hand", "spline"), ("D_oth", "linear")))
HC_INTERCEPT = ModelSpec("hc_intercept", ())


def build_design(spec, predictors, bases=None, n_obs=None):
    """Fixed-effects design matrix, column names and the spline bases used.

    ``n_obs`` is only needed for the intercept-only model.
    """
    n = len(next(iter(predictors.values()))) if predictors else n_obs
    bases = dict(bases or {})
    cols, names = [], ["(Intercept)"]
    for pred, kind in spec.terms:
        x = np.asarray(predictors[pred], float)
        n = len(x)
        if kind == "linear":
            cols.append(x[:, None])
            names.append(pred)
        elif kind == "spline":
            if pred not in bases:
                bases[pred] = SplineBasis.from_data(x)
            cols.append(ns_basis(x, bases[pred]))
            names += [f"ns({pred}){i + 1}" for i in range(bases[pred].dim)]
        else:
            raise ValueError(f"unknown term kind {kind!r}")
    if n is None:
        raise ValueError("cannot infer number of observations")
    X = np.column_stack([np.ones(n)] + cols)
    return X, names, bases


@dataclass
class LmmFit:
    spec: ModelSpec
    method: str
    fixed_effects: np.ndarray
    names: list
    random_intercept_var: float
    residual_var: float
    loglik: float          # maximized ML log-likelihood
    reml_loglik: float     # maximized REML log-likelihood
    fixed_cov: np.ndarray
    n_obs: int
    n_subjects: int
    lam: float
    blups: dict
    bases: dict
    dropped: list = field(default_factory=list)
    data_key: str = ""
    X: np.ndarray = field(default=None, repr=False)

    @property
    def n_fixed(self):
        return int(np.sum(np.isfinite(self.fixed_effects)))


class _RandomIntercept:
    def __init__(self, y, X, groups):
        self.y, self.X = y, X
        self.labels, inv = np.unique(groups, return_inverse=True)
        self.g = inv
        self.n_i = np.bincount(inv).astype(float)
        G = len(self.labels)
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = y @ y
        self.Sx = np.zeros((G, X.shape[1]))
        np.add.at(self.Sx, inv, X)
        self.Sy = np.bincount(inv, weights=y, minlength=G)
        self.n, self.p = X.shape

    def profile(self, lam, reml):
        w = lam / (1 + self.n_i * lam)
        A = self.XtX - (self.Sx * w[:, None]).T @ self.Sx
        c = self.Xty - (self.Sx * w[:, None]).T @ self.Sy
        L = np.linalg.cholesky(A)
        beta = np.linalg.solve(A, c)
        rVr = self.yty - 2 * beta @ self.Xty + beta @ self.XtX @ beta \
            - np.sum(w * (self.Sy - self.Sx @ beta) ** 2)
        logdetV = np.sum(np.log1p(self.n_i * lam))
        dof = self.n - self.p if reml else self.n
        s2 = rVr / dof
        ll = -0.5 * (dof * np.log(2 * np.pi * s2) + logdetV + dof)
        if reml:
            ll -= np.sum(np.log(np.diag(L)))
        return ll, beta, s2, A

    def optimize(self, reml, lo=-12.0, hi=12.0):
        f = lambda u: -self.profile(np.exp(u), reml)[0]
        grid = np.linspace(lo, hi, 49)
        vals = np.array([f(u) for u in grid])
        i = int(np.argmin(vals))
        a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
        res = optimize.minimize_scalar(f, bounds=(a, b), method="bounded",
                                       options=dict(xatol=1e-10))
        u, fu = (res.x, res.fun) if res.fun < vals[i] else (grid[i], vals[i])
        lam = np.exp(u)
        if -self.profile(0.0, reml)[0] <= fu:
            lam = 0.0
        return lam


def _data_key(y, groups, predictors):
    h = hashlib.sha256(np.asarray(y, float).tobytes())
    h.update("|".join(map(str, groups)).encode())
    return h.hexdigest()


def fit_lmm(spec, y, predictors, groups, method="ML", bases=None, drop_aliased=True):
    """Random-intercept model ``y = X beta + b_subject + eps``.

    The variance ratio ``lam = sigma_b^2 / sigma^2`` is found by a 1-D search
    on ``log lam`` in [-12, 12] (plus the ``lam = 0`` boundary) with fixed
    effects and residual variance profiled out. Both the ML and the REML
    maxima are computed; ``method`` selects which estimates are reported.
    Exactly aliased fixed-effect columns (e.g. an all-zero predictor) are
    dropped with a warning, as lme4 does; their coefficients are NaN.
    """
    if method not in ("ML", "REML"):
        raise ValueError("method must be 'ML' or 'REML'")
    y = np.asarray(y, float)
    groups = np.asarray(groups)
    X, names, bases = build_design(spec, predictors, bases, n_obs=len(y))
    if len(y) != X.shape[0] or len(groups) != len(y):
        raise ValueError("y, predictors and groups must have the same length")
    if len(np.unique(groups)) < 2:
        raise ValueError("need at least 2 subjects")
    _, R, piv = qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > max(X.shape) * np.finfo(float).eps * d[0]))
    keep = np.sort(piv[:rank])
    dropped = [names[i] for i in range(X.shape[1]) if i not in set(keep.tolist())]
    if dropped:
        if not drop_aliased:
            raise np.linalg.LinAlgError(f"singular fixed-effects design: {dropped}")
        warnings.warn(f"fixed-effects design is rank deficient; dropping {dropped}")
    if len(y) <= rank:
        raise ValueError(f"{len(y)} observations for {rank} fixed effects")
    Xk = X[:, keep]
    r = y - Xk @ np.linalg.lstsq(Xk, y, rcond=None)[0]
    if r @ r <= 1e-24 * max(y @ y, 1.0):
        raise ValueError("response is fitted exactly by the fixed effects "
                         "(e.g. constant areas); variance components are not identifiable")
    model = _RandomIntercept(y, Xk, groups)
    lam_ml = model.optimize(reml=False)
    lam_reml = model.optimize(reml=True)
    ll_ml = model.profile(lam_ml, False)[0]
    ll_reml = model.profile(lam_reml, True)[0]
    lam = lam_ml if method == "ML" else lam_reml
    _, beta_k, s2, A = model.profile(lam, method == "REML")
    beta = np.full(X.shape[1], np.nan)
    beta[keep] = beta_k
    cov = np.full((X.shape[1], X.shape[1]), np.nan)
    cov[np.ix_(keep, keep)] = s2 * np.linalg.inv(A)
    resid_sum = model.Sy - model.Sx @ beta_k
    b = lam * resid_sum / (1 + model.n_i * lam)
    blups = dict(zip(model.labels.tolist(), b.tolist()))
    return LmmFit(spec, method, beta, names, float(lam * s2), float(s2), float(ll_ml),
                  float(ll_reml), cov, len(y), len(model.labels), float(lam), blups, bases,
                  dropped, _data_key(y, groups, predictors), X)


def aic(fit):
    """``-2 loglik + 2 p`` with p = fixed effects + 2 variance parameters."""
    if fit.method != "ML":
        raise ValueError("AIC requires an ML fit")
    return -2.0 * fit.loglik + 2.0 * (fit.n_fixed + 2)


def lrt(null_fit, alt_fit):
    """Likelihood-ratio test of nested ML fits: (statistic, df, p)."""
    for f in (null_fit, alt_fit):
        if f.method != "ML":
            raise ValueError("likelihood ratio tests need ML fits")
    if null_fit.data_key != alt_fit.data_key:
        raise ValueError("fits were estimated on different data")
    Xn = null_fit.X[:, np.isfinite(null_fit.fixed_effects)]
    Xa = alt_fit.X[:, np.isfinite(alt_fit.fixed_effects)]
    coef = np.linalg.lstsq(Xa, Xn, rcond=None)[0]
    scale = max(1.0, np.abs(Xn).max())
    if np.abs(Xa @ coef - Xn).max() > 1e-8 * scale:
        raise ValueError("null model is not nested in the alternative")
    df = alt_fit.n_fixed - null_fit.n_fixed
    if df < 0:
        raise ValueError("alternative has fewer parameters than the null")
    stat = max(0.0, 2.0 * (alt_fit.loglik - null_fit.loglik))
    p = 1.0 if df == 0 else float(stats.chi2.sf(stat, df))
    return stat, df, p


def coefficient_curve(fit, predictor, grid, held_at=None):
    """Fitted population mean and its standard error along ``grid``.

    Other predictors are held at ``held_at`` (default 0). Returns
    ``(mean, se, extrapolated)``, the last flagging grid points outside the
    spline boundary knots.
    """
    grid = np.asarray(grid, float)
    held_at = dict(held_at or {})
    preds = {}
    for name, _ in fit.spec.terms:
        preds[name] = grid if name == predictor else np.full(len(grid), held_at.get(name, 0.0))
    if predictor not in preds:
        raise ValueError(f"{predictor!r} is not a term of {fit.spec.name}")
    X, _, _ = build_design(fit.spec, preds, fit.bases)
    ok = np.isfinite(fit.fixed_effects)
    Xk = X[:, ok]
    mean = Xk @ fit.fixed_effects[ok]
    cov = fit.fixed_cov[np.ix_(ok, ok)]
    se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", Xk, cov, Xk), 0.0))
    extrap = np.zeros(len(grid), bool)
    if predictor in fit.bases:
        lo, hi = fit.bases[predictor].boundary_knots
        extrap = (grid < lo) | (grid > hi)
    return mean, se, extrap
