#!/usr/bin/env python3
"""
CCSL Inference
Variational learning of each cluster's coefficient distributions and noise
model, interleaved with Chinese-restaurant reassignment sweeps.

The variational family is a product of Gaussians over every entry of B and
A_p, sampled with the reparameterisation b = mu + sigma * eps. Standard
deviations and noise variances are optimised in log space, noise weights
through softmax logits. Gradients come from autograd.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import autograd.numpy as np
import numpy
from autograd import grad
from autograd.scipy.special import logsumexp

from ccsl_core import (FitConfig, FitResult, GroupModel, NoiseModel, Panel,
                       SubjectSeries, ClusterState, VARIANCE_FLOOR, validate_panel)
from ccsl_crp import NEW_CLUSTER, add_subject, relabel, remove_subject, replace_group
from ccsl_likelihood import StackedDesign, batched_loglik, build_design, membership_logposterior
from ccsl_metrics import extract_graph

logger = logging.getLogger(__name__)

PARAM_KEYS = ("mu_B", "log_sigma_B", "nu_A", "log_omega_A",
              "noise_logits", "noise_means", "noise_log_vars")

LOG_STD_FLOOR = 0.5 * numpy.log(VARIANCE_FLOOR)
LOG_VAR_FLOOR = numpy.log(VARIANCE_FLOOR)

ParamTree = Dict[str, numpy.ndarray]


def pack_group(group: GroupModel) -> ParamTree:
    """GroupModel -> unconstrained parameter tree."""
    return {
        "mu_B": numpy.array(group.mu_B),
        "log_sigma_B": numpy.log(group.sigma_B),
        "nu_A": numpy.array(group.nu_A),
        "log_omega_A": numpy.log(group.omega_A),
        "noise_logits": numpy.log(group.noise.weights),
        "noise_means": numpy.array(group.noise.means),
        "noise_log_vars": numpy.log(group.noise.variances),
    }


def unpack_group(params: ParamTree) -> GroupModel:
    logits = numpy.asarray(params["noise_logits"], dtype=float)
    weights = numpy.exp(logits - logsumexp(logits))
    noise = NoiseModel(weights=weights, means=params["noise_means"],
                       variances=numpy.exp(params["noise_log_vars"]))
    return GroupModel(mu_B=params["mu_B"], sigma_B=numpy.exp(params["log_sigma_B"]),
                      nu_A=params["nu_A"], omega_A=numpy.exp(params["log_omega_A"]), noise=noise)


def gaussian_kl(mu, log_sigma, prior_mu, prior_sigma):
    """Elementwise KL(N(mu, sigma^2) || N(prior_mu, prior_sigma^2))."""
    variance_ratio = np.exp(2.0 * log_sigma) / prior_sigma ** 2
    return 0.5 * (variance_ratio + (mu - prior_mu) ** 2 / prior_sigma ** 2 - 1.0 - np.log(variance_ratio))


def draw_standard_normals(m: int, p_l: int, M: int, rng: numpy.random.Generator):
    """Reparameterisation noise: eps_B first, then eps_A, from the same stream."""
    eps_B = rng.standard_normal((M, m, m))
    eps_A = rng.standard_normal((M, p_l, m, m))
    return eps_B, eps_A


def _objective(params, design: StackedDesign, prior: GroupModel, eps_B, eps_A):
    m = design.current.shape[1]
    off_diagonal = 1.0 - numpy.eye(m)

    B = (params["mu_B"] + np.exp(params["log_sigma_B"]) * eps_B) * off_diagonal
    A = params["nu_A"] + np.exp(params["log_omega_A"]) * eps_A
    log_weights = params["noise_logits"] - logsumexp(params["noise_logits"])
    expected_loglik = np.mean(batched_loglik(design, B, A, log_weights,
                                             params["noise_means"], params["noise_log_vars"]))

    # self-loops are not coefficients of the model
    kl_B = np.sum(gaussian_kl(params["mu_B"], params["log_sigma_B"], prior.mu_B, prior.sigma_B) * off_diagonal)
    kl_A = np.sum(gaussian_kl(params["nu_A"], params["log_omega_A"], prior.nu_A, prior.omega_A))
    return expected_loglik - kl_B - kl_A


_objective_gradient = grad(_objective)


def elbo_objective(params: ParamTree, cluster_data: Sequence[SubjectSeries], prior: GroupModel,
                   M: int, rng: numpy.random.Generator) -> float:
    """ELBO as a function of the parameter tree; draws its samples from ``rng``."""
    if not cluster_data:
        raise ValueError("cluster_data must hold at least one subject")
    m, p_l = params["mu_B"].shape[0], params["nu_A"].shape[0]
    design = build_design(cluster_data, p_l)
    return float(_objective(params, design, prior, *draw_standard_normals(m, p_l, M, rng)))


def elbo_estimate(cluster_data: Sequence[SubjectSeries], group: GroupModel, prior: GroupModel,
                  M: int, rng: numpy.random.Generator) -> float:
    return elbo_objective(pack_group(group), cluster_data, prior, M, rng)


def elbo_gradient(cluster_data: Sequence[SubjectSeries], group: GroupModel, prior: GroupModel,
                  M: int, rng: numpy.random.Generator) -> ParamTree:
    """Gradient of elbo_estimate with respect to the parameter tree.

    Uses the same draws elbo_estimate would take from an identically
    seeded ``rng``.
    """
    if not cluster_data:
        raise ValueError("cluster_data must hold at least one subject")
    design = build_design(cluster_data, group.p_l)
    eps = draw_standard_normals(group.m, group.p_l, M, rng)
    return _objective_gradient(pack_group(group), design, prior, *eps)


@dataclass
class OptimState:
    """Adam moment accumulators shaped like the parameter tree."""

    first_moment: ParamTree
    second_moment: ParamTree
    step: int = 0
    step_size: float = 0.01

    @classmethod
    def for_group(cls, group: GroupModel, step_size: float) -> "OptimState":
        tree = pack_group(group)
        return cls(first_moment={k: numpy.zeros_like(v) for k, v in tree.items()},
                   second_moment={k: numpy.zeros_like(v) for k, v in tree.items()},
                   step=0, step_size=step_size)

    def matches(self, group: GroupModel) -> bool:
        tree = pack_group(group)
        return all(self.first_moment[k].shape == v.shape and self.second_moment[k].shape == v.shape
                   for k, v in tree.items())


def _enforce_invariants(params: ParamTree) -> ParamTree:
    params = dict(params)
    params["log_sigma_B"] = numpy.maximum(params["log_sigma_B"], LOG_STD_FLOOR)
    params["log_omega_A"] = numpy.maximum(params["log_omega_A"], LOG_STD_FLOOR)
    params["noise_log_vars"] = numpy.maximum(params["noise_log_vars"], LOG_VAR_FLOOR)
    params["noise_logits"] = params["noise_logits"] - logsumexp(params["noise_logits"])
    params["mu_B"] = params["mu_B"] * (1.0 - numpy.eye(params["mu_B"].shape[0]))
    return params


def optimize_group(cluster_data: Sequence[SubjectSeries], group: GroupModel, prior: GroupModel,
                   config: FitConfig, opt: OptimState, rng: numpy.random.Generator,
                   iterations: Optional[int] = None) -> Tuple[GroupModel, OptimState]:
    """Run Adam ascent on the ELBO for ``iterations`` steps (default: inner_iterations)."""
    iterations = config.inner_iterations if iterations is None else iterations
    if iterations == 0:
        return group, opt
    if not cluster_data:
        raise ValueError("cluster_data must hold at least one subject")
    if not opt.matches(group):
        raise ValueError("OptimState shapes do not match the group parameters")

    design = build_design(cluster_data, group.p_l)
    params = pack_group(group)
    first = {k: v.copy() for k, v in opt.first_moment.items()}
    second = {k: v.copy() for k, v in opt.second_moment.items()}
    step = opt.step

    for _ in range(iterations):
        eps = draw_standard_normals(group.m, group.p_l, config.mc_samples_fit, rng)
        gradient = _objective_gradient(params, design, prior, *eps)
        if not all(numpy.all(numpy.isfinite(g)) for g in gradient.values()):
            logger.warning(f"Skipping optimizer step {step + 1}: non-finite gradient")
            continue

        step += 1
        updated = {}
        for key in PARAM_KEYS:
            g = gradient[key]
            first[key] = config.beta1 * first[key] + (1.0 - config.beta1) * g
            second[key] = config.beta2 * second[key] + (1.0 - config.beta2) * g ** 2
            first_hat = first[key] / (1.0 - config.beta1 ** step)
            second_hat = second[key] / (1.0 - config.beta2 ** step)
            updated[key] = params[key] + opt.step_size * first_hat / (numpy.sqrt(second_hat) + config.adam_epsilon)
        params = _enforce_invariants(updated)

    logger.debug(f"Optimized group over {len(cluster_data)} subjects for {iterations} steps (Adam step {step})")
    return unpack_group(params), OptimState(first_moment=first, second_moment=second,
                                            step=step, step_size=opt.step_size)


def initial_group(prior: GroupModel, config: FitConfig, rng: numpy.random.Generator) -> GroupModel:
    """Random starting point for a new cluster: prior means, narrow spread, jittered noise means."""
    m, p_l, components = prior.m, prior.p_l, prior.noise.components
    noise = NoiseModel(weights=numpy.full(components, 1.0 / components),
                       means=config.init_noise_jitter * rng.standard_normal((components, m)),
                       variances=numpy.ones((components, m)))
    return GroupModel(mu_B=prior.mu_B, sigma_B=numpy.full((m, m), config.init_scale),
                      nu_A=prior.nu_A, omega_A=numpy.full((p_l, m, m), config.init_scale), noise=noise)


def open_cluster(x: SubjectSeries, prior: GroupModel, config: FitConfig,
                 rng: numpy.random.Generator) -> Tuple[GroupModel, OptimState]:
    """Initialise a singleton cluster and warm-start it on its only subject."""
    group = initial_group(prior, config, rng)
    opt = OptimState.for_group(group, config.step_size)
    return optimize_group([x], group, prior, config, opt, rng, iterations=config.warm_start_iterations)


def choose_cluster(scores: Sequence[Tuple[Optional[int], float]]) -> Optional[int]:
    """Argmax of the membership scores; ties go to the earliest entry."""
    if not scores:
        raise ValueError("No membership scores to choose from")
    best = max(range(len(scores)), key=lambda i: scores[i][1])
    return scores[best][0]


def _refit_cluster(panel: Panel, state: ClusterState, k: int, prior: GroupModel, config: FitConfig,
                   rng: numpy.random.Generator, optim_states: Dict[int, OptimState],
                   iterations: int) -> ClusterState:
    group = state.clusters[k]
    opt = optim_states.get(k)
    if opt is None or not opt.matches(group):
        opt = OptimState.for_group(group, config.step_size)
    members = [panel.subjects[s] for s in state.members(k)]
    group, optim_states[k] = optimize_group(members, group, prior, config, opt, rng, iterations=iterations)
    return replace_group(state, k, group)


def crp_sweep(panel: Panel, state: ClusterState, config: FitConfig, rng: numpy.random.Generator,
              optim_states: Optional[Dict[int, OptimState]] = None,
              prior: Optional[GroupModel] = None) -> ClusterState:
    """One pass of hard-assignment reassignment over every subject in order.

    ``optim_states`` is updated in place so Adam moments persist across
    sweeps; entries of deleted clusters are dropped.
    """
    if optim_states is None:
        optim_states = {}
    if prior is None:
        prior = GroupModel.base_prior(panel.m, config.p_l, config.noise_components)

    moves = 0
    for s, x in enumerate(panel.subjects):
        origin = state.assignments[s]
        state = remove_subject(state, s)
        if origin not in state.clusters:
            optim_states.pop(origin, None)

        scores = membership_logposterior(x, state, prior, config.mc_samples_score, rng)
        target = choose_cluster(scores)
        opened = target is NEW_CLUSTER
        if opened:
            target = state.next_index()
            group, optim_states[target] = open_cluster(x, prior, config, rng)
            state = add_subject(state, s, target, group)
            logger.debug(f"Subject {x.id} opened cluster {target}")
        else:
            state = add_subject(state, s, target)

        # a reopened singleton can reuse its old index
        if opened or target != origin:
            moves += 1
            logger.debug(f"Subject {x.id} moved from cluster {origin} to {target}")
            for k in sorted({origin, target}):
                if k in state.clusters and not (k == target and len(state.members(k)) == 1):
                    state = _refit_cluster(panel, state, k, prior, config, rng, optim_states,
                                           config.inner_iterations)

    for k in state.live_clusters:
        state = _refit_cluster(panel, state, k, prior, config, rng, optim_states, config.refresh_iterations)

    state.check_invariants()
    logger.debug(f"Sweep moved {moves} subjects; {state.q} clusters live")
    return state


def total_objective(panel: Panel, state: ClusterState, prior: GroupModel, config: FitConfig,
                    objective_seed: int) -> float:
    """Sum of every cluster's ELBO, each estimated from the same fixed stream."""
    total = 0.0
    for k, group in state.clusters.items():
        members = [panel.subjects[s] for s in state.members(k)]
        total += elbo_estimate(members, group, prior, config.mc_samples_fit,
                               numpy.random.default_rng(objective_seed))
    return total


def partition_key(assignments: Sequence[int]) -> Tuple[int, ...]:
    """Assignment vector with labels renumbered by first appearance."""
    mapping: Dict[int, int] = {}
    return tuple(mapping.setdefault(c, len(mapping)) for c in assignments)


def fit(panel: Panel, config: FitConfig, rng: numpy.random.Generator) -> FitResult:
    """Cluster the panel and learn one causal model per cluster.

    Starts from one cluster per subject and sweeps until the partition is
    unchanged for a whole sweep and the total objective moved by less than
    ``config.tolerance``, or max_sweeps is reached.
    """
    validate_panel(panel, config.p_l)
    prior = GroupModel.base_prior(panel.m, config.p_l, config.noise_components)
    objective_seed = int(rng.integers(2 ** 63))

    state = ClusterState.empty(panel.n, config.alpha)
    optim_states: Dict[int, OptimState] = {}
    for s, x in enumerate(panel.subjects):
        group, optim_states[s] = open_cluster(x, prior, config, rng)
        state = add_subject(state, s, s, group)
    logger.info(f"Initialized {state.q} singleton clusters over {panel.n} subjects")

    elbo_trace: List[float] = []
    cluster_counts: List[int] = []
    previous = total_objective(panel, state, prior, config, objective_seed)
    converged = False
    sweeps_run = 0

    for sweep in range(1, config.max_sweeps + 1):
        before = partition_key(state.assignments)
        state = crp_sweep(panel, state, config, rng, optim_states, prior)
        sweeps_run = sweep

        objective = total_objective(panel, state, prior, config, objective_seed)
        elbo_trace.append(objective)
        cluster_counts.append(state.q)
        change = abs(objective - previous)
        stable = partition_key(state.assignments) == before
        logger.info(f"Sweep {sweep}: {state.q} clusters, objective {objective:.3f}, "
                    f"change {change:.3g}, partition {'stable' if stable else 'changed'}")
        previous = objective

        if stable and change < config.tolerance:
            converged = True
            break

    if not converged:
        logger.warning(f"Stopped after {sweeps_run} sweeps without converging")

    state = relabel(state)
    graphs = {k: extract_graph(group, config.tau_B, config.tau_A) for k, group in state.clusters.items()}
    return FitResult(state=state, graphs=graphs, elbo_trace=tuple(elbo_trace), sweeps_run=sweeps_run,
                     converged=converged, cluster_count_trace=tuple(cluster_counts))
