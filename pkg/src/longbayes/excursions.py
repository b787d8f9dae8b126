"""Joint-posterior excursion sets above an effect size."""

from dataclasses import dataclass, field
import json

import numpy as np

from . import formats

BATCH = 1000


@dataclass(frozen=True)
class ExcursionResult:
    gamma: float
    alpha: float
    active: np.ndarray
    joint_prob: float
    mc_se: float
    n_samples: int
    seed: int
    visit: str = ""
    task: int = 0
    warnings: tuple = ()

    @property
    def n_active(self):
        return int(self.active.sum())

    def write(self, stem):
        """``<stem>.bin`` vertex map plus ``<stem>.json`` sidecar."""
        formats.write_vertex_map(stem + ".bin", self.active.astype(bool))
        side = {"gamma": self.gamma, "alpha": self.alpha, "n_samples": self.n_samples,
                "seed": self.seed, "joint_prob": self.joint_prob, "mc_se": self.mc_se,
                "visit": self.visit, "task": self.task, "n_active": self.n_active,
                "warnings": list(self.warnings)}
        with open(stem + ".json", "w") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)


def sample_posterior(fit, visit, M, seed, task=None):
    """M draws from N(mu_j, Qpost_j^{-1}) as an (M, K*V) array.

    Draws are produced in batches of 1000 with seeds spawned from ``seed``,
    so results do not depend on memory layout. ``task`` restricts the
    returned columns to one field.
    """
    chol = fit.factor(visit)
    mu = fit.mu[visit]
    sl = slice(None) if task is None else slice(task * fit.V, (task + 1) * fit.V)
    n_batches = -(-M // BATCH)
    out = np.empty((M, len(mu[sl])))
    for b, ss in enumerate(np.random.SeedSequence(seed).spawn(n_batches)):
        m = min(BATCH, M - b * BATCH)
        x = chol.sample(m, np.random.default_rng(ss))
        out[b * BATCH:b * BATCH + m] = (x[sl] + mu[sl, None]).T
    return out


def _prefix_search(z, samples, gamma, alpha, first=None):
    """Largest prefix (in decreasing z order) jointly exceeding gamma w.p. >= 1-alpha."""
    V = len(z)
    order = np.argsort(-z, kind="stable")
    if first is not None and np.any(first):
        head = order[first[order]]
        order = np.r_[head, order[~first[order]]]
    exceed = samples[:, order] > gamma
    joint = np.logical_and.accumulate(exceed, axis=1).mean(axis=0)
    fail = np.flatnonzero(joint < 1 - alpha)
    k = V if fail.size == 0 else int(fail[0])
    active = np.zeros(V, bool)
    active[order[:k]] = True
    jp = 1.0 if k == 0 else float(joint[k - 1])
    return active, jp


def excursion_set(fit, visit, gamma, alpha=0.05, M=5000, seed=0, task=0,
                  samples=None, contains=None):
    """Excursion set of one field for one visit.

    Vertices are ordered by decreasing marginal probability of exceeding
    ``gamma`` (ties by index) and the set grows along that order while the
    Monte Carlo joint probability stays >= 1 - alpha. ``contains`` (a boolean
    map) puts those vertices first, which is how nested sets across effect
    sizes are built.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    if M < 1000:
        raise ValueError("use at least 1000 Monte Carlo samples")
    warn = []
    if np.sqrt(alpha * (1 - alpha) / M) > alpha / 4:
        warn.append(f"Monte Carlo error too large for alpha={alpha} with M={M}")
    if samples is None:
        samples = sample_posterior(fit, visit, M, seed, task)
    mean = fit.field_mean(visit, task)
    sd = fit.marginal_sd(visit, task)
    z = (mean - gamma) / sd
    active, jp = _prefix_search(z, samples, gamma, alpha, contains)
    se = float(np.sqrt(jp * (1 - jp) / samples.shape[0]))
    return ExcursionResult(float(gamma), float(alpha), active, jp, se, samples.shape[0],
                           int(seed), str(visit), int(task), tuple(warn))


def excursion_sets(fit, visit, gammas=(0.0, 1.0, 2.0), alpha=0.05, M=5000, seed=0, task=0):
    """Nested excursion sets for several effect sizes from one sample set.

    Levels are processed from the largest down; each lower-level search
    starts from the set found at the level above, so the sets are nested
    exactly while every set keeps its own joint-probability certificate.
    """
    samples = sample_posterior(fit, visit, M, seed, task)
    out, prev = {}, None
    for g in sorted(gammas, reverse=True):
        r = excursion_set(fit, visit, g, alpha, M, seed, task, samples=samples, contains=prev)
        out[g] = r
        prev = r.active
    return {g: out[g] for g in gammas}


def joint_probability(fit, visit, active, gamma, M=5000, seed=1, task=0):
    """Monte Carlo P(all active vertices exceed gamma) and its standard error."""
    if not np.any(active):
        return 1.0, 0.0
    s = sample_posterior(fit, visit, M, seed, task)
    p = float(np.mean(np.all(s[:, np.asarray(active, bool)] > gamma, axis=1)))
    return p, float(np.sqrt(p * (1 - p) / M))


def classical_equivalent_contract(fit, visit, classical_fit, vertex_areas, alpha=0.05,
                                  M=5000, seed=0):
    """Paired areas: Bayesian gamma=0 set vs Bonferroni and BH-FDR maps.

    The gamma=0 Bayesian set and the FWER-corrected classical map both bound
    the chance of any false positive at alpha, so their areas are directly
    comparable.
    """
    from .classical import bonferroni, bh_fdr
    from .summary import activation_area

    ex = excursion_set(fit, visit, 0.0, alpha, M, seed)
    p = classical_fit.pvals
    if classical_fit.alternative == "two-sided":
        # one-sided positive activation, matching the excursion direction
        pos = classical_fit.tstat > 0
        p = np.where(pos, p, 1.0)
    return {"visit": str(visit),
            "bayes_gamma0_area": activation_area(ex.active, vertex_areas),
            "bonferroni_area": activation_area(bonferroni(p, alpha), vertex_areas),
            "fdr_area": activation_area(bh_fdr(p, alpha), vertex_areas),
            "joint_prob": ex.joint_prob}
