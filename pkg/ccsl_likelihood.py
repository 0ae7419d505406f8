#!/usr/bin/env python3
"""
CCSL Likelihoods
Mixture noise densities, change-of-variables subject likelihoods,
Monte-Carlo marginal likelihoods and cluster-membership scores.

All arithmetic goes through autograd.numpy so the same kernels are
differentiated by the variational optimiser.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import autograd.numpy as np
import numpy
from autograd.scipy.special import logsumexp

from ccsl_core import (CausalParams, ClusterState, GroupModel, NoiseModel,
                       SingularSystemError, SubjectSeries)
from ccsl_crp import NEW_CLUSTER, crp_log_prior

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
# Parameter samples evaluated per vectorised batch.
SAMPLE_CHUNK = 2048


@dataclass(frozen=True)
class LogDensity:
    """Natural-log density with an optional per-time-step breakdown."""

    value: float
    breakdown: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.breakdown is not None and abs(math.fsum(self.breakdown) - self.value) > 1e-9 * max(1.0, abs(self.value)):
            raise ValueError("LogDensity value disagrees with its breakdown")


@dataclass(frozen=True)
class StackedDesign:
    """Current rows and zero-padded lagged rows of one or more subjects.

    ``lags[p - 1, t]`` holds x(t - p) of the same subject, or zeros when
    that step precedes the subject's first observation.
    """

    current: numpy.ndarray
    lags: numpy.ndarray

    @property
    def rows(self) -> int:
        return self.current.shape[0]


def lagged_rows(data: numpy.ndarray, p_l: int) -> numpy.ndarray:
    T, m = data.shape
    lags = numpy.zeros((p_l, T, m))
    for p in range(1, p_l + 1):
        lags[p - 1, p:] = data[:T - p]
    return lags


def build_design(series: Sequence[SubjectSeries], p_l: int) -> StackedDesign:
    """Stack subjects along time; lags never cross subject boundaries."""
    current = numpy.concatenate([s.data for s in series], axis=0)
    lags = numpy.concatenate([lagged_rows(s.data, p_l) for s in series], axis=1)
    return StackedDesign(current=current, lags=lags)


def mixture_logpdf(e, log_weights, means, log_variances):
    """log sum_k w_k N(e | mu_k, diag(exp(log_var_k))) over the last axis of e."""
    diff = e[..., None, :] - means
    component = log_weights - 0.5 * np.sum(LOG_2PI + log_variances + diff ** 2 / np.exp(log_variances), axis=-1)
    return logsumexp(component, axis=-1)


def noise_arrays(noise: NoiseModel):
    return numpy.log(noise.weights), noise.means, numpy.log(noise.variances)


def noise_logpdf(e, noise: NoiseModel) -> float:
    """Log density of one noise vector under the mixture."""
    return float(mixture_logpdf(numpy.asarray(e, dtype=float), *noise_arrays(noise)))


def batched_loglik(design: StackedDesign, B, A, log_weights, means, log_variances):
    """Log-likelihood of the stacked design under each of S parameter samples.

    B has shape (S, m, m), A (S, p_l, m, m); the result has shape (S,).
    Each row contributes log|det(I - B)| once.
    """
    m = design.current.shape[1]
    system = np.eye(m) - B
    residual = np.einsum("tj,sij->sti", design.current, system)
    if design.lags.shape[0]:
        residual = residual - np.einsum("ptj,spij->sti", design.lags, A)
    _, logdet = np.linalg.slogdet(system)
    noise_terms = mixture_logpdf(residual, log_weights, means, log_variances)
    return np.sum(noise_terms, axis=-1) + design.rows * logdet


def subject_loglik(x: SubjectSeries, params: CausalParams, noise: NoiseModel) -> LogDensity:
    """Change-of-variables log-likelihood of one subject under fixed coefficients.

    Steps before p_l use only the lags that exist; every step carries the
    Jacobian log|det(I - B)| exactly once.
    """
    if x.m != params.m or noise.m != params.m:
        raise ValueError(f"Dimension mismatch: data has {x.m} variables, parameters {params.m}, noise {noise.m}")
    if x.T < params.p_l + 1:
        raise ValueError(f"Subject {x.id} has {x.T} steps, lag order {params.p_l} needs {params.p_l + 1}")

    system = numpy.eye(params.m) - params.B
    sign, logdet = numpy.linalg.slogdet(system)
    if sign == 0 or not numpy.isfinite(logdet):
        raise SingularSystemError(f"(I - B) is singular while scoring subject {x.id}")

    residual = x.data @ system.T
    lags = lagged_rows(x.data, params.p_l)
    for p in range(params.p_l):
        residual = residual - lags[p] @ params.A[p].T
    steps = numpy.asarray(mixture_logpdf(residual, *noise_arrays(noise))) + logdet
    breakdown = tuple(float(v) for v in steps)
    return LogDensity(value=math.fsum(breakdown), breakdown=breakdown)


def draw_coefficients(group: GroupModel, count: int, rng: numpy.random.Generator):
    """Sample B and A from the group's Gaussians; self-loops stay exactly zero."""
    m, p_l = group.m, group.p_l
    off_diagonal = 1.0 - numpy.eye(m)
    B = (group.mu_B + group.sigma_B * rng.standard_normal((count, m, m))) * off_diagonal
    A = group.nu_A + group.omega_A * rng.standard_normal((count, p_l, m, m))
    return B, A


def mc_marginal_loglik(x: SubjectSeries, group: GroupModel, M: int, rng: numpy.random.Generator) -> float:
    """log of the Monte-Carlo estimate (1/M) sum_i p(x | B_i, A_i), via log-mean-exp."""
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if x.m != group.m:
        raise ValueError(f"Subject {x.id} has {x.m} variables, group model has {group.m}")

    design = build_design([x], group.p_l)
    noise = noise_arrays(group.noise)
    values = []
    remaining = M
    while remaining:
        count = min(remaining, SAMPLE_CHUNK)
        B, A = draw_coefficients(group, count, rng)
        values.append(numpy.asarray(batched_loglik(design, B, A, *noise)))
        remaining -= count
    values = numpy.concatenate(values)
    values[numpy.isnan(values)] = -numpy.inf

    if not numpy.any(numpy.isfinite(values)):
        raise SingularSystemError(f"All {M} coefficient samples gave a singular (I - B) for subject {x.id}")
    return float(logsumexp(values) - math.log(M))


def membership_logposterior(x: SubjectSeries, state: ClusterState, ref_prior: GroupModel, M: int,
                            rng: numpy.random.Generator) -> List[Tuple[Optional[int], float]]:
    """Unnormalised log P(c_s = k | X^s) for every live cluster, then NEW_CLUSTER.

    The caller removes the scored subject from ``state`` first, so sizes
    exclude it.
    """
    prior = crp_log_prior(state.sizes, state.alpha)
    scores: List[Tuple[Optional[int], float]] = []
    for k, group in state.clusters.items():
        scores.append((k, prior[k] + mc_marginal_loglik(x, group, M, rng)))
    scores.append((NEW_CLUSTER, prior[NEW_CLUSTER] + mc_marginal_loglik(x, ref_prior, M, rng)))
    logger.debug(f"Subject {x.id} scores: " + ", ".join(f"{k}={v:.2f}" for k, v in scores))
    return scores


def membership_probabilities(scores: Sequence[Tuple[Optional[int], float]]) -> List[Tuple[Optional[int], float]]:
    """Normalise membership log-scores into posterior probabilities."""
    values = numpy.array([v for _, v in scores])
    probabilities = numpy.exp(values - logsumexp(values))
    return [(k, float(p)) for (k, _), p in zip(scores, probabilities)]
