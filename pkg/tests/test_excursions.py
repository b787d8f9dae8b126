import json

import numpy as np
import pytest
import scipy.sparse as sp
from scipy import stats

from longbayes.bayes import HyperPriors, Hyperparameters, PosteriorFit, fit_bayes_longitudinal
from longbayes.classical import fit_classical
from longbayes.excursions import (classical_equivalent_contract, excursion_set, excursion_sets,
                                  joint_probability, sample_posterior)
from longbayes.formats import read_vertex_map
from longbayes.surface import assemble_fem, spde_precision
from longbayes.synth import SynthStudyConfig, study_sessions


def make_fit(mu, Q, K=1):
    V = len(mu) // K
    theta = Hyperparameters((1.0,) * K, (1.0,) * K, 1.0)
    return PosteriorFit(theta, HyperPriors(), ["1"], {"1": np.asarray(mu, float)},
                        {"1": sp.csc_matrix(Q)}, 0.0, {}, V, K)


@pytest.fixture
def gmrf_fit(small_fem):
    Q = spde_precision(small_fem, 0.5, 2.0).Q + sp.identity(small_fem.n)
    mu = np.linspace(-1, 2, small_fem.n)
    return make_fit(mu, Q)


def test_sample_mean_clt_envelope():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(20, 20))
    Q = A @ A.T + 20 * np.eye(20)
    fit = make_fit(rng.normal(size=20), Q)
    M = 20000
    s = sample_posterior(fit, "1", M, seed=4)
    sd = np.sqrt(np.diag(np.linalg.inv(Q)))
    outside = np.abs(s.mean(0) - fit.mu["1"]) > 4 * sd / np.sqrt(M)
    assert outside.mean() < 0.01


def test_sample_covariance_matches_dense_inverse():
    Q = np.array([[2.0, -0.6, 0, 0, 0], [-0.6, 2.0, -0.6, 0, 0], [0, -0.6, 2.0, -0.6, 0],
                  [0, 0, -0.6, 2.0, -0.6], [0, 0, 0, -0.6, 2.0]])
    fit = make_fit(np.zeros(5), Q)
    s = sample_posterior(fit, "1", 50000, seed=9)
    cov = np.linalg.inv(Q)
    emp = np.cov(s.T)
    big = np.abs(cov) > 0.05  # relative error is meaningful on non-negligible entries
    assert np.max(np.abs(emp - cov)[big] / np.abs(cov[big])) < 0.05


def test_samples_deterministic(gmrf_fit):
    a = sample_posterior(gmrf_fit, "1", 2500, seed=11)
    b = sample_posterior(gmrf_fit, "1", 2500, seed=11)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, sample_posterior(gmrf_fit, "1", 2500, seed=12))


def test_hopeless_threshold_gives_empty_set(gmrf_fit):
    sd = gmrf_fit.marginal_sd("1")
    gamma = float(np.max(gmrf_fit.mu["1"] + 7 * sd))
    r = excursion_set(gmrf_fit, "1", gamma, M=2000, seed=1)
    assert r.n_active == 0 and r.joint_prob == 1.0


def test_independent_vertices_match_product_of_marginals():
    z = np.array([5.0] * 5 + [2.6] * 3 + [1.9] + [1.5] + [0.5] * 4 + [-2.0] * 2)
    perm = np.random.default_rng(0).permutation(len(z))
    z = z[perm]
    sd = np.full(len(z), 0.5)
    gamma = 1.0
    fit = make_fit(gamma + z * sd, sp.diags(1 / sd ** 2))
    order = np.argsort(-z, kind="stable")
    prod = np.cumprod(stats.norm.cdf(z[order]))
    k = int(np.sum(prod >= 0.95))
    expected = np.zeros(len(z), bool)
    expected[order[:k]] = True
    r = excursion_set(fit, "1", gamma, alpha=0.05, M=20000, seed=3)
    np.testing.assert_array_equal(r.active, expected)
    assert abs(r.joint_prob - prod[k - 1]) < 4 * r.mc_se


def test_ties_broken_by_index():
    fit = make_fit(np.full(6, 3.0), sp.identity(6))
    r = excursion_set(fit, "1", 0.0, alpha=0.05, M=5000, seed=0)
    # P(one vertex > 0) = 0.99865; the joint prob of 6 is 0.9919, all included
    assert r.n_active == 6
    r = excursion_set(fit, "1", 1.2, alpha=0.05, M=5000, seed=0)
    # P(> 1.2) = 0.964 each and 0.964^2 = 0.93: only the lowest index fits
    assert r.active.tolist() == [True, False, False, False, False, False]


def test_nesting_and_certificates(gmrf_fit):
    sets = excursion_sets(gmrf_fit, "1", [0.0, 0.5, 1.0], alpha=0.05, M=3000, seed=5)
    assert np.all(sets[1.0].active <= sets[0.5].active)
    assert np.all(sets[0.5].active <= sets[0.0].active)
    for r in sets.values():
        assert r.joint_prob >= 0.95


def test_joint_probability_reproduces_with_new_seed(gmrf_fit):
    r = excursion_set(gmrf_fit, "1", 0.5, M=5000, seed=21)
    p, se = joint_probability(gmrf_fit, "1", r.active, 0.5, M=5000, seed=99)
    assert abs(p - r.joint_prob) <= 3 * np.hypot(se, r.mc_se)


def test_validation_and_warning(gmrf_fit):
    with pytest.raises(ValueError, match="1000"):
        excursion_set(gmrf_fit, "1", 0.0, M=500)
    with pytest.raises(ValueError):
        excursion_set(gmrf_fit, "1", -1.0)
    r = excursion_set(gmrf_fit, "1", 0.0, alpha=0.01, M=1000, seed=0)
    assert r.warnings and "Monte Carlo" in r.warnings[0]


def test_result_written(tmp_path, gmrf_fit):
    r = excursion_set(gmrf_fit, "1", 0.0, M=1000, seed=2)
    r.write(str(tmp_path / "ex"))
    np.testing.assert_array_equal(read_vertex_map(tmp_path / "ex.bin"), r.active)
    side = json.loads((tmp_path / "ex.json").read_text())
    assert side["seed"] == 2 and side["n_samples"] == 1000
    assert side["joint_prob"] == r.joint_prob


def test_bayes_vs_classical_table_on_activation_study():
    cfg = SynthStudyConfig(mesh="grid", n_vertices=144, n_subjects=1, n_visits=1, n_volumes=120,
                           field_source="activation", amplitude=1.5, width=5.0, seed=4)
    study, (sess,) = study_sessions(cfg)
    fit = fit_bayes_longitudinal([sess], study.fem)
    table = classical_equivalent_contract(fit, "1", fit_classical(sess), study.fem.vertex_areas,
                                          M=2000, seed=1)
    again = classical_equivalent_contract(fit, "1", fit_classical(sess), study.fem.vertex_areas,
                                          M=2000, seed=1)
    assert table == again
    assert table["bayes_gamma0_area"] >= table["bonferroni_area"] > 0
