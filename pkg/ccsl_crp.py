#!/usr/bin/env python3
"""
Chinese Restaurant Process
CRP prior weights, partition sampling and the immutable ClusterState
updates used by the reassignment sweep.
"""

import logging
import math
from typing import Dict, List, Mapping, Optional

import numpy as np

from ccsl_core import UNASSIGNED, ClusterState, GroupModel

logger = logging.getLogger(__name__)

# Key used for the "open a new table" option wherever clusters are scored.
NEW_CLUSTER = None


def crp_log_prior(sizes: Mapping[int, int], alpha: float,
                  normalize: bool = False) -> Dict[Optional[int], float]:
    """Log CRP weights: log n_k per live cluster and log alpha for NEW_CLUSTER.

    With ``normalize`` the weights are the predictive probabilities
    n_k / (N + alpha), N being the number of seated subjects.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if any(size < 1 for size in sizes.values()):
        raise ValueError(f"Cluster sizes must be >= 1, got {dict(sizes)}")

    weights: Dict[Optional[int], float] = {k: math.log(size) for k, size in sorted(sizes.items())}
    weights[NEW_CLUSTER] = math.log(alpha)
    if normalize:
        log_total = math.log(sum(sizes.values()) + alpha)
        weights = {k: w - log_total for k, w in weights.items()}
    return weights


def sample_crp_partition(n: int, alpha: float, rng: np.random.Generator) -> List[int]:
    """Seat n customers one by one; labels are numbered by first appearance."""
    if n < 0:
        raise ValueError(f"n must be nonnegative, got {n}")
    labels: List[int] = []
    counts: List[int] = []
    for _ in range(n):
        weights = np.array(counts + [alpha], dtype=float)
        table = int(rng.choice(weights.size, p=weights / weights.sum()))
        if table == len(counts):
            counts.append(0)
        counts[table] += 1
        labels.append(table)
    return labels


def remove_subject(state: ClusterState, s: int) -> ClusterState:
    """Unseat subject s; a cluster left empty is deleted."""
    k = state.assignments[s]
    if k == UNASSIGNED:
        return state

    assignments = list(state.assignments)
    assignments[s] = UNASSIGNED
    sizes = dict(state.sizes)
    clusters = dict(state.clusters)
    sizes[k] -= 1
    if sizes[k] == 0:
        del sizes[k]
        del clusters[k]
        logger.debug(f"Cluster {k} emptied by subject {s} and deleted ({len(clusters)} left)")
    return ClusterState(assignments=tuple(assignments), clusters=clusters, sizes=sizes, alpha=state.alpha)


def add_subject(state: ClusterState, s: int, k: int, group: Optional[GroupModel] = None) -> ClusterState:
    """Seat an unassigned subject s at cluster k, opening k when a model is given."""
    if state.assignments[s] != UNASSIGNED:
        raise ValueError(f"Subject {s} is already assigned to cluster {state.assignments[s]}")

    clusters = dict(state.clusters)
    sizes = dict(state.sizes)
    if k not in clusters:
        if group is None:
            raise ValueError(f"Opening cluster {k} requires a group model")
        clusters[k] = group
        sizes[k] = 0
    elif group is not None:
        clusters[k] = group
    sizes[k] += 1
    assignments = list(state.assignments)
    assignments[s] = k
    return ClusterState(assignments=tuple(assignments), clusters=clusters, sizes=sizes, alpha=state.alpha)


def replace_group(state: ClusterState, k: int, group: GroupModel) -> ClusterState:
    if k not in state.clusters:
        raise KeyError(f"Cluster {k} is not live")
    clusters = dict(state.clusters)
    clusters[k] = group
    return ClusterState(assignments=state.assignments, clusters=clusters, sizes=state.sizes, alpha=state.alpha)


def relabel(state: ClusterState) -> ClusterState:
    """Renumber clusters 0..q-1 by first appearance in the assignment vector."""
    mapping: Dict[int, int] = {}
    for c in state.assignments:
        if c != UNASSIGNED and c not in mapping:
            mapping[c] = len(mapping)
    for k in state.clusters:
        if k not in mapping:
            mapping[k] = len(mapping)

    assignments = tuple(mapping[c] if c != UNASSIGNED else UNASSIGNED for c in state.assignments)
    clusters = {mapping[k]: g for k, g in state.clusters.items()}
    sizes = {mapping[k]: v for k, v in state.sizes.items()}
    return ClusterState(assignments=assignments, clusters=clusters, sizes=sizes, alpha=state.alpha)
