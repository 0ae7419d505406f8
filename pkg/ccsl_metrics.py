#!/usr/bin/env python3
"""
CCSL Metrics
Graph extraction from learned group models, Adjusted Rand Index,
Mann-Whitney AUC and cluster-to-truth matching.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from ccsl_core import FORMAT_VERSION, DegenerateTruthError, FitResult, GroupModel
from ccsl_synthgen import GroundTruth

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.1
# Keeps optimal assignments stable: equal overlaps prefer the lowest true index.
TIE_BIAS = 1e-9


def extract_graph(group: GroupModel, tau_B: float = DEFAULT_TAU,
                  tau_A: float = DEFAULT_TAU) -> Tuple[np.ndarray, np.ndarray]:
    """Threshold the learned means: edge j -> i iff |mu_ij| > tau_B, lagged iff |nu_ij,p| > tau_A."""
    if not (tau_B > 0 and tau_A > 0):
        raise ValueError(f"Thresholds must be positive, got tau_B={tau_B}, tau_A={tau_A}")
    return np.abs(group.mu_B) > tau_B, np.abs(group.nu_A) > tau_A


def summary_graph(instantaneous: np.ndarray, lagged: np.ndarray) -> np.ndarray:
    """j -> i at any delay, instantaneous or lagged."""
    combined = np.asarray(instantaneous, dtype=bool).copy()
    if lagged.shape[0]:
        combined |= np.asarray(lagged, dtype=bool).any(axis=0)
    return combined


def _pairs(counts: np.ndarray) -> int:
    counts = np.asarray(counts, dtype=np.int64)
    return int((counts * (counts - 1) // 2).sum())


def contingency_table(labels_a: Sequence[int], labels_b: Sequence[int]) -> np.ndarray:
    _, index_a = np.unique(np.asarray(labels_a), return_inverse=True)
    _, index_b = np.unique(np.asarray(labels_b), return_inverse=True)
    table = np.zeros((index_a.max() + 1, index_b.max() + 1), dtype=np.int64)
    np.add.at(table, (index_a, index_b), 1)
    return table


def ari(labels_a: Sequence[int], labels_b: Sequence[int]) -> float:
    """Adjusted Rand Index from pair counts of the contingency table."""
    if len(labels_a) != len(labels_b):
        raise ValueError(f"Label sequences differ in length: {len(labels_a)} vs {len(labels_b)}")
    n = len(labels_a)
    if n < 2:
        raise ValueError(f"ARI needs at least 2 labels, got {n}")

    table = contingency_table(labels_a, labels_b)
    index = _pairs(table)
    rows = _pairs(table.sum(axis=1))
    columns = _pairs(table.sum(axis=0))
    expected = rows * columns / _pairs(np.array([n]))
    maximum = (rows + columns) / 2.0
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


def auc(scores: Sequence[float], truth: Sequence[int]) -> float:
    """P(random positive outranks random negative), ties counted as one half."""
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth)
    if scores.shape != truth.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and truth {truth.shape} must be equal-length vectors")
    if not np.all((truth == 0) | (truth == 1)):
        raise ValueError("truth must be binary")
    positive = truth == 1
    n_pos = int(positive.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateTruthError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")

    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class ClusterMatch:
    """Estimated cluster -> true group. Flagged clusters were matched by overlap only."""

    mapping: Dict[int, int]
    flagged: Tuple[int, ...] = ()


def match_clusters(est_labels: Sequence[int], true_labels: Sequence[int]) -> ClusterMatch:
    """Maximum-overlap assignment of estimated clusters to true groups."""
    if len(est_labels) != len(true_labels):
        raise ValueError(f"Label sequences differ in length: {len(est_labels)} vs {len(true_labels)}")
    if not len(est_labels):
        return ClusterMatch(mapping={})

    est_ids, est_index = np.unique(np.asarray(est_labels), return_inverse=True)
    true_ids, true_index = np.unique(np.asarray(true_labels), return_inverse=True)
    overlap = np.zeros((est_ids.size, true_ids.size))
    np.add.at(overlap, (est_index, true_index), 1)

    rows, columns = linear_sum_assignment(overlap - TIE_BIAS * np.arange(true_ids.size), maximize=True)
    mapping = {int(est_ids[r]): int(true_ids[c]) for r, c in zip(rows, columns)}

    flagged = []
    for r, k in enumerate(est_ids):
        if int(k) not in mapping:
            mapping[int(k)] = int(true_ids[np.argmax(overlap[r])])
            flagged.append(int(k))
    if flagged:
        logger.warning(f"Clusters {flagged} have no one-to-one partner and were matched by overlap")
    return ClusterMatch(mapping=dict(sorted(mapping.items())), flagged=tuple(flagged))


def _pad_lags(stack: np.ndarray, p: int) -> np.ndarray:
    padded = np.zeros((p,) + stack.shape[1:], dtype=stack.dtype)
    padded[:stack.shape[0]] = stack
    return padded


def structure_scores(group: GroupModel, dag: np.ndarray,
                     lag_support: np.ndarray) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """(scores, truth) vectors for instantaneous, lagged and combined AUC.

    Scores are |mu| and |nu|; self-loops are left out of the instantaneous
    part. Lag stacks of different depth are zero-padded.
    """
    off_diagonal = ~np.eye(group.m, dtype=bool)
    inst = (np.abs(group.mu_B)[off_diagonal], np.asarray(dag, dtype=int)[off_diagonal])
    p = max(group.p_l, lag_support.shape[0])
    lag = (_pad_lags(np.abs(group.nu_A), p).ravel(), _pad_lags(np.asarray(lag_support, dtype=int), p).ravel())
    combined = (np.concatenate([inst[0], lag[0]]), np.concatenate([inst[1], lag[1]]))
    return {"instantaneous": inst, "lagged": lag, "combined": combined}


class ClusterScore(BaseModel):
    cluster: int
    true_group: int
    flagged: bool = False
    auc_instantaneous: Optional[float] = Field(None, ge=0, le=1)
    auc_lagged: Optional[float] = Field(None, ge=0, le=1)
    auc_combined: Optional[float] = Field(None, ge=0, le=1)


class EvalReport(BaseModel):
    """Clustering and structure recovery of one fit against its ground truth."""

    format_version: int = FORMAT_VERSION
    ari: float = Field(..., ge=-1, le=1)
    q_estimated: int = Field(..., ge=0)
    q_true: int = Field(..., ge=0)
    cluster_match: Dict[int, int]
    clusters: List[ClusterScore] = []
    flagged: List[int] = []
    notes: List[str] = []

    @model_validator(mode="after")
    def matched_pairs_are_injective(self) -> "EvalReport":
        matched = [g for k, g in self.cluster_match.items() if k not in self.flagged]
        if len(matched) != len(set(matched)):
            raise ValueError(f"cluster_match is not injective on matched clusters: {self.cluster_match}")
        return self

    def _mean(self, attribute: str) -> Optional[float]:
        values = [getattr(c, attribute) for c in self.clusters
                  if not c.flagged and getattr(c, attribute) is not None]
        return float(np.mean(values)) if values else None

    @property
    def mean_auc_instantaneous(self) -> Optional[float]:
        return self._mean("auc_instantaneous")

    @property
    def mean_auc_lagged(self) -> Optional[float]:
        return self._mean("auc_lagged")

    @property
    def mean_auc_combined(self) -> Optional[float]:
        return self._mean("auc_combined")


def evaluate(fit: FitResult, truth: GroundTruth) -> EvalReport:
    """ARI of the partition plus per-cluster structure AUC against the matched true group."""
    assignments = fit.state.assignments
    if len(assignments) != len(truth.subject_labels):
        raise ValueError(f"Fit covers {len(assignments)} subjects, ground truth {len(truth.subject_labels)}")

    match = match_clusters(assignments, truth.subject_labels)
    notes: List[str] = []
    clusters: List[ClusterScore] = []
    for k, group in fit.state.clusters.items():
        g = match.mapping[k]
        values: Dict[str, Optional[float]] = {}
        for kind, (scores, labels) in structure_scores(group, truth.dags[g], truth.lag_supports[g]).items():
            try:
                values[kind] = auc(scores, labels)
            except DegenerateTruthError as e:
                values[kind] = None
                notes.append(f"cluster {k} {kind} AUC skipped: {e}")
                logger.warning(f"Cluster {k}: {kind} AUC skipped ({e})")
        clusters.append(ClusterScore(cluster=k, true_group=g, flagged=k in match.flagged,
                                     auc_instantaneous=values["instantaneous"],
                                     auc_lagged=values["lagged"],
                                     auc_combined=values["combined"]))

    if len(assignments) < 2:
        # one subject can only be in one cluster
        score = 1.0
        notes.append("ARI set to 1.0 for a single-subject panel")
    else:
        score = ari(assignments, truth.subject_labels)

    return EvalReport(ari=score, q_estimated=fit.q, q_true=truth.q,
                      cluster_match=match.mapping, clusters=clusters, flagged=list(match.flagged),
                      notes=notes)
