#!/usr/bin/env python3
"""
Likelihood Test
Noise densities, change-of-variables likelihoods, Monte-Carlo marginals
and membership scores against closed forms and quadrature.
"""

import math

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.stats import multivariate_normal, norm

import ccsl_likelihood
from ccsl_core import (CausalParams, ClusterState, GroupModel, NoiseModel, SingularSystemError,
                       SubjectSeries)
from ccsl_crp import NEW_CLUSTER
from ccsl_likelihood import (LogDensity, build_design, mc_marginal_loglik, membership_logposterior,
                             membership_probabilities, noise_logpdf, subject_loglik)
from ccsl_synthgen import gen_dag, sample_group_model, sample_subject_params, simulate_subject


def gaussian_noise(variances):
    variances = np.atleast_1d(np.asarray(variances, dtype=float))
    return NoiseModel(weights=[1.0], means=np.zeros((1, variances.size)), variances=variances[None, :])


def scalar_group(nu, omega, variance):
    return GroupModel(mu_B=[[0.0]], sigma_B=[[1.0]], nu_A=[[[nu]]], omega_A=[[[omega]]],
                      noise=gaussian_noise([variance]))


class TestNoiseLogpdf:
    def test_standard_normal_at_zero(self):
        assert noise_logpdf([0.0], gaussian_noise([1.0])) == pytest.approx(-0.9189385, abs=1e-7)

    def test_symmetric_mixture_at_zero(self):
        noise = NoiseModel(weights=[0.5, 0.5], means=[[0.5], [-0.5]], variances=[[0.25], [0.25]])
        assert noise_logpdf([0.0], noise) == pytest.approx(math.log(0.48394), abs=1e-4)

    def test_bounded_by_best_component(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            noise = NoiseModel(weights=rng.uniform(0.1, 1.0, 3), means=rng.normal(size=(3, 2)),
                               variances=rng.uniform(0.1, 2.0, (3, 2)))
            e = rng.normal(size=2)
            best = max(multivariate_normal.logpdf(e, noise.means[k], np.diag(noise.variances[k]))
                       for k in range(3))
            assert noise_logpdf(e, noise) <= best + 1e-12


class TestSubjectLoglik:
    def test_identity_system_is_pure_noise(self):
        rng = np.random.default_rng(1)
        x = SubjectSeries(id="a", data=rng.normal(size=(10, 2)))
        noise = NoiseModel(weights=[0.4, 0.6], means=[[0.5, -0.5], [-0.3, 0.3]], variances=[[0.3, 0.4], [0.5, 0.2]])
        params = CausalParams(B=np.zeros((2, 2)), A=np.zeros((1, 2, 2)))
        density = subject_loglik(x, params, noise)
        assert density.value == pytest.approx(sum(noise_logpdf(row, noise) for row in x.data), abs=1e-10)
        assert len(density.breakdown) == 10

    def test_matches_gaussian_sem_density(self):
        rng = np.random.default_rng(2)
        m = 4
        for _ in range(100):
            B = np.where(gen_dag(m, 0.5, rng), rng.uniform(-0.8, 0.8, (m, m)), 0.0)
            variances = rng.uniform(0.2, 2.0, m)
            x = rng.normal(size=(5, m))
            density = subject_loglik(SubjectSeries(id="s", data=x), CausalParams(B=B, A=np.zeros((0, m, m))),
                                     gaussian_noise(variances))
            inverse = np.linalg.inv(np.eye(m) - B)
            covariance = inverse @ np.diag(variances) @ inverse.T
            expected = multivariate_normal.logpdf(x, np.zeros(m), covariance).sum()
            assert density.value == pytest.approx(expected, abs=1e-7)

    def test_early_steps_use_available_lags(self):
        A = np.array([[[0.5]], [[0.2]]])
        x = np.array([[1.0], [2.0], [3.0]])
        density = subject_loglik(SubjectSeries(id="s", data=x), CausalParams(B=[[0.0]], A=A), gaussian_noise([1.0]))
        residuals = [1.0, 2.0 - 0.5 * 1.0, 3.0 - 0.5 * 2.0 - 0.2 * 1.0]
        np.testing.assert_allclose(density.breakdown, norm.logpdf(residuals), atol=1e-12)

    def test_normalises_over_the_line(self):
        noise = NoiseModel(weights=[0.3, 0.7], means=[[1.0], [-0.5]], variances=[[0.5], [0.2]])
        params = CausalParams(B=[[0.0]], A=np.zeros((0, 1, 1)))
        grid = np.linspace(-10.0, 10.0, 20001)
        values = [math.exp(subject_loglik(SubjectSeries(id="g", data=[[v]]), params, noise).value) for v in grid]
        assert trapezoid(values, grid) == pytest.approx(1.0, abs=1e-3)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        m = 4
        B = np.where(gen_dag(m, 0.5, rng), rng.uniform(-0.5, 0.5, (m, m)), 0.0)
        A = rng.uniform(-0.3, 0.3, (2, m, m))
        noise = NoiseModel(weights=[0.5, 0.5], means=rng.normal(size=(2, m)), variances=rng.uniform(0.2, 1.0, (2, m)))
        x = rng.normal(size=(20, m))
        perm = rng.permutation(m)
        base = subject_loglik(SubjectSeries(id="s", data=x), CausalParams(B=B, A=A), noise).value
        permuted = subject_loglik(
            SubjectSeries(id="s", data=x[:, perm]),
            CausalParams(B=B[np.ix_(perm, perm)], A=A[:, perm][:, :, perm]),
            NoiseModel(weights=noise.weights, means=noise.means[:, perm], variances=noise.variances[:, perm]),
        ).value
        assert permuted == pytest.approx(base, abs=1e-9)

    def test_singular_system(self):
        params = CausalParams(B=[[0.0, 1.0], [1.0, 0.0]], A=np.zeros((1, 2, 2)))
        with pytest.raises(SingularSystemError):
            subject_loglik(SubjectSeries(id="s", data=np.ones((3, 2))), params, gaussian_noise([1.0, 1.0]))

    def test_too_short(self):
        params = CausalParams(B=np.zeros((1, 1)), A=np.zeros((3, 1, 1)))
        with pytest.raises(ValueError):
            subject_loglik(SubjectSeries(id="s", data=np.ones((2, 1))), params, gaussian_noise([1.0]))

    def test_log_density_checks_breakdown(self):
        with pytest.raises(ValueError):
            LogDensity(value=1.0, breakdown=(0.25, 0.25))


class TestDesign:
    def test_lags_do_not_cross_subjects(self):
        a = SubjectSeries(id="a", data=[[1.0], [2.0]])
        b = SubjectSeries(id="b", data=[[10.0], [20.0]])
        design = build_design([a, b], p_l=1)
        np.testing.assert_array_equal(design.current[:, 0], [1.0, 2.0, 10.0, 20.0])
        np.testing.assert_array_equal(design.lags[0, :, 0], [0.0, 1.0, 0.0, 10.0])
        assert design.rows == 4


class TestMarginalLikelihood:
    def test_pinned_group_equals_point_likelihood(self):
        rng = np.random.default_rng(4)
        dag = gen_dag(3, 0.6, rng)
        truth = sample_group_model(dag, 1, 2, rng)
        x = simulate_subject(sample_subject_params(truth, None, rng), truth.noise, 30, rng)
        pinned = GroupModel(mu_B=truth.mu_B, sigma_B=np.full((3, 3), 1e-12), nu_A=truth.nu_A,
                            omega_A=np.full((1, 3, 3), 1e-12), noise=truth.noise)
        expected = subject_loglik(x, pinned.mean_params(), truth.noise).value
        for M in (1, 7, 300):
            assert mc_marginal_loglik(x, pinned, M, rng) == pytest.approx(expected, abs=1e-4)

    def test_matches_quadrature(self):
        nu, omega, variance = 0.4, 0.3, 0.5
        x = SubjectSeries(id="q", data=[[1.2], [0.9]])
        grid = np.linspace(nu - 8 * omega, nu + 8 * omega, 10001)
        sd = math.sqrt(variance)
        integrand = norm.pdf(1.2, 0.0, sd) * norm.pdf(0.9, grid * 1.2, sd) * norm.pdf(grid, nu, omega)
        expected = math.log(trapezoid(integrand, grid))
        estimate = mc_marginal_loglik(x, scalar_group(nu, omega, variance), 100_000, np.random.default_rng(5))
        assert estimate == pytest.approx(expected, abs=0.02)

    def test_seed_invariance(self):
        x = SubjectSeries(id="q", data=[[1.2], [0.9], [-0.4]])
        group = scalar_group(0.2, 0.5, 0.4)
        a = mc_marginal_loglik(x, group, 10_000, np.random.default_rng(6))
        b = mc_marginal_loglik(x, group, 10_000, np.random.default_rng(7))
        assert a == pytest.approx(b, abs=0.05)

    def test_quadruple_sample_count_agrees(self):
        rng = np.random.default_rng(9)
        x = SubjectSeries(id="q", data=rng.standard_normal((30, 1)))
        group = scalar_group(0.3, 0.1, 0.8)
        small = np.array([mc_marginal_loglik(x, group, 50, rng) for _ in range(100)])
        large = np.array([mc_marginal_loglik(x, group, 200, rng) for _ in range(100)])
        standard_error = math.sqrt(small.var(ddof=1) / 100 + large.var(ddof=1) / 100)
        assert abs(small.mean() - large.mean()) <= 4 * standard_error
        assert np.mean(np.abs(small - large.mean()) <= 4 * small.std(ddof=1)) >= 0.99

    def test_many_chunks(self, monkeypatch):
        monkeypatch.setattr(ccsl_likelihood, "SAMPLE_CHUNK", 64)
        x = SubjectSeries(id="q", data=[[1.2], [0.9], [-0.4]])
        pinned = scalar_group(0.2, 1e-12, 0.4)
        expected = subject_loglik(x, pinned.mean_params(), pinned.noise).value
        assert mc_marginal_loglik(x, pinned, 1000, np.random.default_rng(8)) == pytest.approx(expected, abs=1e-9)

    def test_invalid_sample_count(self):
        with pytest.raises(ValueError):
            mc_marginal_loglik(SubjectSeries(id="q", data=[[1.0], [2.0]]), scalar_group(0.0, 1.0, 1.0), 0,
                               np.random.default_rng(0))


class TestMembership:
    def make_state(self, sizes):
        group = scalar_group(0.0, 1.0, 1.0)
        assignments = [k for k, size in sizes.items() for _ in range(size)]
        return ClusterState(assignments=tuple(assignments), clusters={k: group for k in sizes},
                            sizes=dict(sizes), alpha=1.0)

    def test_prior_gaps(self, monkeypatch):
        monkeypatch.setattr(ccsl_likelihood, "mc_marginal_loglik", lambda x, group, M, rng: -12.5)
        x = SubjectSeries(id="s", data=[[0.0], [0.0]])
        scores = dict(membership_logposterior(x, self.make_state({1: 2, 2: 1}), scalar_group(0.0, 1.0, 1.0), 8,
                                              np.random.default_rng(0)))
        assert list(scores) == [1, 2, NEW_CLUSTER]
        assert scores[1] - scores[2] == pytest.approx(math.log(2))
        assert scores[2] == pytest.approx(scores[NEW_CLUSTER])

    def test_empty_state_only_new(self):
        x = SubjectSeries(id="s", data=[[0.3], [0.1]])
        scores = membership_logposterior(x, ClusterState.empty(1, 1.0), scalar_group(0.0, 1.0, 1.0), 16,
                                         np.random.default_rng(0))
        assert [k for k, _ in scores] == [NEW_CLUSTER]

    def test_probabilities_normalised(self):
        probabilities = membership_probabilities([(0, -3.0), (1, -4.0), (NEW_CLUSTER, -1000.0)])
        assert sum(p for _, p in probabilities) == pytest.approx(1.0)
        assert dict(probabilities)[0] == pytest.approx(1.0 / (1.0 + math.exp(-1.0)))

    def test_true_cluster_wins(self):
        rng = np.random.default_rng(9)
        groups = {}
        for k in (0, 1):
            groups[k] = sample_group_model(gen_dag(4, 0.5, rng), 1, 2, rng)
        state = ClusterState(assignments=(0, 1), clusters=groups, sizes={0: 1, 1: 1}, alpha=1.0)
        prior = GroupModel.base_prior(4, 1, 2)
        wins = 0
        for trial in range(20):
            k = trial % 2
            x = simulate_subject(sample_subject_params(groups[k], None, rng), groups[k].noise, 200, rng)
            scores = membership_logposterior(x, state, prior, 128, rng)
            wins += max(scores, key=lambda item: item[1])[0] == k
        assert wins >= 18


@pytest.mark.slow
def test_ground_truth_models_classify_subjects():
    rng = np.random.default_rng(10)
    groups = {k: sample_group_model(gen_dag(6, 0.3, rng), 1, 2, rng) for k in (0, 1)}
    state = ClusterState(assignments=(0, 1), clusters=groups, sizes={0: 1, 1: 1}, alpha=1.0)
    prior = GroupModel.base_prior(6, 1, 2)
    correct = 0
    for trial in range(100):
        k = trial % 2
        x = simulate_subject(sample_subject_params(groups[k], None, rng), groups[k].noise, 200, rng)
        scores = membership_logposterior(x, state, prior, 128, rng)
        correct += max(scores, key=lambda item: item[1])[0] == k
    assert correct >= 95
