#!/usr/bin/env python3
"""
Metrics Test
ARI, AUC, cluster matching, graph extraction and the evaluation report.
"""

import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from ccsl_core import ClusterState, DegenerateTruthError, FitResult, GroupModel
from ccsl_metrics import (EvalReport, ari, auc, contingency_table, evaluate, extract_graph, match_clusters,
                          structure_scores, summary_graph)
from ccsl_synthgen import gen_dataset

labels = st.lists(st.integers(min_value=0, max_value=4), min_size=2, max_size=25)


def brute_force_ari(a, b):
    same_both = same_a = same_b = total = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        total += 1
        same_a += a[i] == a[j]
        same_b += b[i] == b[j]
        same_both += a[i] == a[j] and b[i] == b[j]
    expected = same_a * same_b / total
    maximum = (same_a + same_b) / 2
    return 1.0 if maximum == expected else (same_both - expected) / (maximum - expected)


def brute_force_auc(scores, truth):
    positives = [s for s, t in zip(scores, truth) if t == 1]
    negatives = [s for s, t in zip(scores, truth) if t == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in positives for n in negatives)
    return wins / (len(positives) * len(negatives))


class TestAri:
    def test_identical_partitions(self):
        assert ari([0, 0, 1, 1], [5, 5, 2, 2]) == 1.0

    def test_single_cluster_against_split(self):
        assert ari([0, 0, 0, 0], [0, 0, 1, 1]) == pytest.approx(0.0)

    def test_crossed_partitions(self):
        assert ari([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(-0.5)

    def test_both_trivial(self):
        assert ari([0, 0, 0], [1, 1, 1]) == 1.0
        assert ari([0, 1, 2], [2, 0, 1]) == 1.0

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            ari([0, 1], [0])
        with pytest.raises(ValueError):
            ari([0], [0])

    @given(labels, st.data())
    @settings(max_examples=80, deadline=None)
    def test_matches_pair_counting(self, a, data):
        b = data.draw(st.lists(st.integers(min_value=0, max_value=4), min_size=len(a), max_size=len(a)))
        assert ari(a, b) == pytest.approx(brute_force_ari(a, b), abs=1e-12)
        assert ari(a, b) == pytest.approx(ari(b, a), abs=1e-12)

    @given(labels, st.permutations(range(5)))
    @settings(max_examples=50, deadline=None)
    def test_relabel_invariant(self, a, permutation):
        renamed = [permutation[c] for c in a]
        assert ari(a, renamed) == 1.0

    def test_contingency_table(self):
        table = contingency_table([0, 0, 7, 7], [1, 2, 2, 2])
        np.testing.assert_array_equal(table, [[1, 1], [0, 2]])


class TestAuc:
    def test_perfect(self):
        assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_tied(self):
        assert auc([0.3, 0.3, 0.3, 0.3], [1, 0, 1, 0]) == 0.5

    def test_three_quarters(self):
        assert auc([0.9, 0.3, 0.5, 0.1], [1, 1, 0, 0]) == pytest.approx(0.75)

    def test_single_class_is_degenerate(self):
        with pytest.raises(DegenerateTruthError):
            auc([0.1, 0.2], [1, 1])

    def test_non_binary_truth(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [0, 2])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2, 0.3], [0, 1])

    @given(st.lists(st.tuples(st.sampled_from([0.0, 0.25, 0.5, 1.0, 2.0]), st.integers(0, 1)),
                    min_size=2, max_size=30))
    @settings(max_examples=80, deadline=None)
    def test_matches_pairwise_count(self, pairs):
        scores, truth = zip(*pairs)
        if len(set(truth)) < 2:
            return
        value = auc(scores, truth)
        assert value == pytest.approx(brute_force_auc(scores, truth), abs=1e-12)
        assert auc(np.negative(scores), truth) == pytest.approx(1.0 - value, abs=1e-12)
        assert auc(np.exp(scores), truth) == pytest.approx(value, abs=1e-12)


class TestMatchClusters:
    def test_identity(self):
        match = match_clusters([0, 0, 1, 1], [1, 1, 0, 0])
        assert match.mapping == {0: 1, 1: 0}
        assert match.flagged == ()

    def test_extra_cluster_flagged(self):
        match = match_clusters([0, 0, 1, 1, 2, 2], [0, 0, 0, 1, 1, 1])
        assert match.mapping == {0: 0, 1: 0, 2: 1}
        assert match.flagged == (1,)

    def test_fewer_clusters_than_groups(self):
        match = match_clusters([0, 0, 0, 0], [0, 0, 1, 2])
        assert match.mapping == {0: 0}

    def test_maximises_overlap(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            est = rng.integers(0, 3, 20)
            true = rng.integers(0, 3, 20)
            if len(set(est)) < 3 or len(set(true)) < 3:
                continue
            mapping = match_clusters(est, true).mapping
            overlap = lambda k, g: int(np.sum((est == k) & (true == g)))
            achieved = sum(overlap(k, g) for k, g in mapping.items())
            best = max(sum(overlap(k, g) for k, g in zip(range(3), perm))
                       for perm in itertools.permutations(range(3)))
            assert achieved == best


class TestGraphs:
    def group(self):
        return GroupModel(mu_B=[[0.0, 0.05], [-0.3, 0.0]], sigma_B=np.ones((2, 2)),
                          nu_A=[[[0.2, -0.1], [0.0, 0.15]]], omega_A=np.ones((1, 2, 2)),
                          noise=GroupModel.base_prior(2, 1, 1).noise)

    def test_threshold(self):
        inst, lag = extract_graph(self.group())
        np.testing.assert_array_equal(inst, [[False, False], [True, False]])
        np.testing.assert_array_equal(lag, [[[True, False], [False, True]]])

    def test_threshold_is_strict(self):
        inst, _ = extract_graph(self.group(), tau_B=0.3)
        assert not inst.any()

    def test_nonpositive_threshold(self):
        with pytest.raises(ValueError):
            extract_graph(self.group(), tau_B=0.0)

    def test_summary_graph(self):
        inst, lag = extract_graph(self.group())
        np.testing.assert_array_equal(summary_graph(inst, lag), [[True, False], [True, True]])

    def test_structure_scores_skip_self_loops(self):
        dag = np.array([[False, False], [True, False]])
        scores = structure_scores(self.group(), dag, np.zeros((2, 2, 2), dtype=bool))
        inst_scores, inst_truth = scores["instantaneous"]
        np.testing.assert_allclose(inst_scores, [0.05, 0.3])
        np.testing.assert_array_equal(inst_truth, [0, 1])
        assert scores["lagged"][0].shape == (8,)
        assert scores["combined"][0].shape == (10,)


class TestEvaluate:
    def truth(self):
        _, truth = gen_dataset(2, 6, 6, 10, 1, 2, np.random.default_rng(4), edge_prob=0.5)
        return truth

    def fit_from(self, assignments, clusters):
        sizes = {k: assignments.count(k) for k in clusters}
        state = ClusterState(assignments=tuple(assignments), clusters=clusters, sizes=sizes, alpha=1.0)
        graphs = {k: extract_graph(g) for k, g in clusters.items()}
        return FitResult(state=state, graphs=graphs, elbo_trace=(), sweeps_run=0, converged=False)

    def test_oracle_fit(self):
        truth = self.truth()
        fit = self.fit_from(list(truth.subject_labels), dict(enumerate(truth.group_models)))
        report = evaluate(fit, truth)
        assert report.ari == 1.0
        assert report.q_estimated == report.q_true == 2
        assert report.cluster_match == {0: 0, 1: 1}
        for score in report.clusters:
            for value in (score.auc_instantaneous, score.auc_lagged, score.auc_combined):
                assert value is None or value == 1.0
        assert report.mean_auc_combined == 1.0

    def test_split_cluster_flagged(self):
        truth = self.truth()
        groups = truth.group_models
        fit = self.fit_from([0, 0, 1, 1, 2, 2], {0: groups[0], 1: groups[0], 2: groups[1]})
        report = evaluate(fit, truth)
        assert report.q_estimated == 3
        assert report.flagged == [1]
        assert report.cluster_match == {0: 0, 1: 0, 2: 1}
        assert report.ari < 1.0

    def test_degenerate_truth_noted(self):
        truth = self.truth()
        empty = truth.dags[0] & False
        truth = replace(truth, dags=(empty, truth.dags[1]))
        fit = self.fit_from(list(truth.subject_labels), dict(enumerate(truth.group_models)))
        report = evaluate(fit, truth)
        assert report.clusters[0].auc_instantaneous is None
        assert any("cluster 0 instantaneous" in note for note in report.notes)

    def test_single_subject(self):
        _, truth = gen_dataset(1, 1, 4, 10, 1, 2, np.random.default_rng(5), edge_prob=0.5)
        fit = self.fit_from([0], {0: truth.group_models[0]})
        report = evaluate(fit, truth)
        assert report.ari == 1.0
        assert report.q_estimated == report.q_true == 1
        assert any("single-subject" in note for note in report.notes)

    def test_length_mismatch(self):
        truth = self.truth()
        fit = self.fit_from([0, 0], {0: truth.group_models[0]})
        with pytest.raises(ValueError):
            evaluate(fit, truth)

    def test_report_rejects_non_injective_match(self):
        with pytest.raises(ValidationError):
            EvalReport(ari=0.5, q_estimated=2, q_true=2, cluster_match={0: 0, 1: 0})

    def test_report_json_round_trip(self):
        truth = self.truth()
        fit = self.fit_from(list(truth.subject_labels), dict(enumerate(truth.group_models)))
        report = evaluate(fit, truth)
        assert EvalReport.model_validate_json(report.model_dump_json()) == report
