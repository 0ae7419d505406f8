#!/usr/bin/env python3
"""
Synthetic Panel Generator
Random DAGs, group models, per-subject coefficients and SVAR simulation
following the Erdos-Renyi synthetic protocol used to benchmark CCSL.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import networkx as nx
import numpy as np

from ccsl_core import (PINNED_STD, CausalParams, GroupModel, NoiseModel, Panel,
                       SingularSystemError, SubjectSeries, UnstableDynamicsError, _ValueObject)
from ccsl_crp import sample_crp_partition

logger = logging.getLogger(__name__)

COEFFICIENT_MEAN_RANGE = (0.1, 0.4)
COEFFICIENT_VARIANCE_RANGE = (0.01, 0.1)
NOISE_MEAN_MAGNITUDE = (0.4, 0.6)
NOISE_VARIANCE_RANGE = (0.2, 0.5)
NOISE_WEIGHT_RANGE = (0.3, 0.6)

STABILITY_THRESHOLD = 0.95
STABILITY_TARGET = 0.9
MAX_RESCALES = 10
MAX_RESAMPLES = 100

NOISE_FAMILIES = ("mixture", "gaussian")
LABEL_MODES = ("balanced", "crp")


@dataclass(frozen=True, eq=False)
class GroundTruth(_ValueObject):
    """Everything used to simulate a panel, for scoring a fit against it."""

    q: int
    dags: Tuple[np.ndarray, ...]
    lag_supports: Tuple[np.ndarray, ...]
    group_models: Tuple[GroupModel, ...]
    subject_labels: Tuple[int, ...]
    subject_params: Tuple[CausalParams, ...]
    subject_ids: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "dags", tuple(np.asarray(d, dtype=bool) for d in self.dags))
        object.__setattr__(self, "lag_supports", tuple(np.asarray(s, dtype=bool) for s in self.lag_supports))
        object.__setattr__(self, "group_models", tuple(self.group_models))
        object.__setattr__(self, "subject_labels", tuple(int(v) for v in self.subject_labels))
        object.__setattr__(self, "subject_params", tuple(self.subject_params))
        object.__setattr__(self, "subject_ids", tuple(str(v) for v in self.subject_ids))

    @property
    def group_params(self) -> List[Tuple[np.ndarray, GroupModel]]:
        return list(zip(self.dags, self.group_models))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "q": self.q,
            "subject_ids": list(self.subject_ids),
            "labels": list(self.subject_labels),
            "groups": [{"dag": dag.astype(int).tolist(), "lag_support": support.astype(int).tolist(),
                        "model": model.to_dict()}
                       for dag, support, model in zip(self.dags, self.lag_supports, self.group_models)],
            "subject_params": [params.to_dict() for params in self.subject_params],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "GroundTruth":
        models = [GroupModel.from_dict(g["model"]) for g in payload["groups"]]
        supports = [np.array(g["lag_support"], dtype=bool).reshape(model.p_l, model.m, model.m)
                    for g, model in zip(payload["groups"], models)]
        return cls(q=payload["q"],
                   dags=tuple(np.array(g["dag"], dtype=bool) for g in payload["groups"]),
                   lag_supports=tuple(supports),
                   group_models=tuple(models),
                   subject_labels=tuple(payload["labels"]),
                   subject_params=tuple(CausalParams.from_dict(p) for p in payload["subject_params"]),
                   subject_ids=tuple(payload["subject_ids"]))


def is_acyclic(adjacency: np.ndarray) -> bool:
    """adjacency[i, j] != 0 means an edge j -> i."""
    graph = nx.from_numpy_array(np.asarray(adjacency, dtype=int).T, create_using=nx.DiGraph)
    return nx.is_directed_acyclic_graph(graph)


def gen_dag(m: int, edge_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Erdos-Renyi DAG over a uniformly random causal order.

    Returns a boolean m x m adjacency with adj[i, j] meaning j -> i.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not 0.0 <= edge_prob <= 1.0:
        raise ValueError(f"edge_prob must lie in [0, 1], got {edge_prob}")

    order = rng.permutation(m)
    # position a precedes position b in the order: edge order[a] -> order[b]
    allowed = np.triu(rng.random((m, m)) < edge_prob, k=1)
    adjacency = np.zeros((m, m), dtype=bool)
    adjacency[np.ix_(order, order)] = allowed.T
    return adjacency


def gen_lag_support(m: int, p_l: int, edge_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Independent Erdos-Renyi draw per lag; self-lags allowed."""
    return rng.random((p_l, m, m)) < edge_prob


def support_of(group: GroupModel) -> Tuple[np.ndarray, np.ndarray]:
    """Instantaneous and lagged support of a generated group model (nonzero means)."""
    return group.mu_B != 0.0, group.nu_A != 0.0


def _sample_noise_model(m: int, noise_components: int, rng: np.random.Generator,
                        noise_family: str) -> NoiseModel:
    if noise_family == "gaussian":
        return NoiseModel(weights=[1.0], means=np.zeros((1, m)),
                          variances=rng.uniform(*NOISE_VARIANCE_RANGE, size=(1, m)))
    signs = np.where(rng.random((noise_components, m)) < 0.5, -1.0, 1.0)
    means = signs * rng.uniform(*NOISE_MEAN_MAGNITUDE, size=(noise_components, m))
    variances = rng.uniform(*NOISE_VARIANCE_RANGE, size=(noise_components, m))
    weights = rng.uniform(*NOISE_WEIGHT_RANGE, size=noise_components)
    return NoiseModel(weights=weights / weights.sum(), means=means, variances=variances)


def sample_group_model(dag: np.ndarray, p_l: int, noise_components: int, rng: np.random.Generator,
                       lag_support: Optional[np.ndarray] = None, edge_prob: float = 0.3,
                       noise_family: str = "mixture") -> GroupModel:
    """Draw one group's coefficient Gaussians and its noise mixture.

    Edges get means from U(0.1, 0.4) and variances from U(0.01, 0.1);
    non-edges keep mean 0 and PINNED_STD. When ``lag_support`` is omitted
    it is drawn with gen_lag_support at ``edge_prob``.
    """
    dag = np.asarray(dag, dtype=bool)
    if not is_acyclic(dag):
        raise ValueError("sample_group_model requires an acyclic instantaneous graph")
    if noise_family not in NOISE_FAMILIES:
        raise ValueError(f"Unknown noise family: {noise_family}. Choose from {NOISE_FAMILIES}")
    m = dag.shape[0]
    if lag_support is None:
        lag_support = gen_lag_support(m, p_l, edge_prob, rng)
    lag_support = np.asarray(lag_support, dtype=bool)

    mu_B = np.where(dag, rng.uniform(*COEFFICIENT_MEAN_RANGE, size=(m, m)), 0.0)
    sigma_B = np.where(dag, np.sqrt(rng.uniform(*COEFFICIENT_VARIANCE_RANGE, size=(m, m))), PINNED_STD)
    nu_A = np.where(lag_support, rng.uniform(*COEFFICIENT_MEAN_RANGE, size=lag_support.shape), 0.0)
    omega_A = np.where(lag_support, np.sqrt(rng.uniform(*COEFFICIENT_VARIANCE_RANGE, size=lag_support.shape)),
                       PINNED_STD)
    noise = _sample_noise_model(m, noise_components, rng, noise_family)
    return GroupModel(mu_B=mu_B, sigma_B=sigma_B, nu_A=nu_A, omega_A=omega_A, noise=noise)


def sample_subject_params(group: GroupModel, lag_support: Optional[Tuple[np.ndarray, np.ndarray]],
                          rng: np.random.Generator) -> CausalParams:
    """Fixed coefficients of one subject: Gaussian draws on the support, zeros elsewhere.

    ``lag_support`` is the (dag, lagged support) pair; None reads it off the
    group's unpinned entries.
    """
    inst_support, lag = support_of(group) if lag_support is None else lag_support
    B = group.mu_B + group.sigma_B * rng.standard_normal(group.mu_B.shape)
    A = group.nu_A + group.omega_A * rng.standard_normal(group.nu_A.shape)
    B = np.where(inst_support, B, 0.0)
    np.fill_diagonal(B, 0.0)
    return CausalParams(B=B, A=np.where(lag, A, 0.0))


def _reduced_form(params: CausalParams) -> Tuple[np.ndarray, np.ndarray]:
    """(I - B)^-1 and the reduced lag matrices (I - B)^-1 A_p."""
    system = np.eye(params.m) - params.B
    sign, _ = np.linalg.slogdet(system)
    if sign == 0 or np.linalg.cond(system) > 1e12:
        raise SingularSystemError("(I - B) is singular; the instantaneous system cannot be solved")
    inverse = np.linalg.inv(system)
    return inverse, np.einsum("ij,pjk->pik", inverse, params.A)


def spectral_radius(params: CausalParams) -> float:
    """Spectral radius of the companion matrix of the reduced lag dynamics."""
    if params.p_l == 0:
        return 0.0
    _, reduced = _reduced_form(params)
    m, p_l = params.m, params.p_l
    companion = np.zeros((m * p_l, m * p_l))
    companion[:m, :] = np.concatenate(list(reduced), axis=1)
    if p_l > 1:
        companion[m:, :-m] = np.eye(m * (p_l - 1))
    return float(np.max(np.abs(np.linalg.eigvals(companion))))


def stabilize_params(params: CausalParams, threshold: float = STABILITY_THRESHOLD,
                     target: float = STABILITY_TARGET, max_rescales: int = MAX_RESCALES) -> CausalParams:
    """Shrink all A_p by target/rho until the companion radius drops below threshold."""
    A = np.array(params.A)
    for attempt in range(max_rescales + 1):
        candidate = CausalParams(B=params.B, A=A)
        rho = spectral_radius(candidate)
        if rho < threshold:
            if attempt:
                logger.debug(f"Lag dynamics rescaled {attempt} time(s), radius now {rho:.3f}")
            return candidate
        A = A * (target / rho)
    raise UnstableDynamicsError(f"Spectral radius still {rho:.3f} after {max_rescales} rescales")


def sample_noise(noise: NoiseModel, T: int, rng: np.random.Generator) -> np.ndarray:
    """T independent draws from the noise mixture, shape (T, m)."""
    component = rng.choice(noise.components, size=T, p=noise.weights)
    standard = rng.standard_normal((T, noise.m))
    return noise.means[component] + np.sqrt(noise.variances[component]) * standard


def simulate_subject(params: CausalParams, noise: NoiseModel, T: int, rng: np.random.Generator,
                     burn_in: int = 100, subject_id: str = "0") -> SubjectSeries:
    """Run X(t) = (I-B)^-1 (sum_p A_p X(t-p) + E(t)) from zero history, drop the burn-in."""
    if T < 1 or burn_in < 0:
        raise ValueError(f"T must be >= 1 and burn_in >= 0, got T={T}, burn_in={burn_in}")
    if noise.m != params.m:
        raise ValueError(f"Noise model has {noise.m} variables, parameters have {params.m}")

    inverse, reduced = _reduced_form(params)
    rho = spectral_radius(params)
    if rho >= 1.0:
        raise UnstableDynamicsError(f"Lag dynamics are explosive (spectral radius {rho:.3f})")

    total = burn_in + T
    shocks = sample_noise(noise, total, rng) @ inverse.T
    X = np.zeros((total, params.m))
    for t in range(total):
        value = shocks[t].copy()
        for p in range(1, min(params.p_l, t) + 1):
            value += reduced[p - 1] @ X[t - p]
        X[t] = value
    return SubjectSeries(id=subject_id, data=X[burn_in:])


def _balanced_labels(q: int, n: int) -> List[int]:
    base, remainder = divmod(n, q)
    labels: List[int] = []
    for group in range(q):
        labels.extend([group] * (base + (1 if group < remainder else 0)))
    return labels


def gen_dataset(q: int, n: int, m: int, T: int, p_l: int, noise_components: int, rng: np.random.Generator,
                edge_prob: float = 0.3, burn_in: int = 100, label_mode: str = "balanced",
                crp_alpha: float = 1.0, noise_family: str = "mixture") -> Tuple[Panel, GroundTruth]:
    """Draw q group models, assign n subjects, simulate every subject.

    Subject s simulates from the s-th stream of ``rng.spawn(n)``, taken after
    all group-level draws.
    """
    if not 1 <= q <= n:
        raise ValueError(f"Need 1 <= q <= n, got q={q}, n={n}")
    if label_mode not in LABEL_MODES:
        raise ValueError(f"Unknown label mode: {label_mode}. Choose from {LABEL_MODES}")

    dags, supports, models = [], [], []
    for _ in range(q):
        dag = gen_dag(m, edge_prob, rng)
        support = gen_lag_support(m, p_l, edge_prob, rng)
        dags.append(dag)
        supports.append(support)
        models.append(sample_group_model(dag, p_l, noise_components, rng, lag_support=support,
                                         noise_family=noise_family))

    if label_mode == "balanced":
        labels = _balanced_labels(q, n)
    else:
        labels = sample_crp_partition(n, crp_alpha, rng)
        extra = max(labels) + 1 - q
        for _ in range(max(extra, 0)):
            dag = gen_dag(m, edge_prob, rng)
            support = gen_lag_support(m, p_l, edge_prob, rng)
            dags.append(dag)
            supports.append(support)
            models.append(sample_group_model(dag, p_l, noise_components, rng, lag_support=support,
                                             noise_family=noise_family))

    subjects, subject_params, ids = [], [], []
    for s, stream in enumerate(rng.spawn(n)):
        model, dag, support = models[labels[s]], dags[labels[s]], supports[labels[s]]
        for attempt in range(MAX_RESAMPLES):
            try:
                params = stabilize_params(sample_subject_params(model, (dag, support), stream))
                break
            except UnstableDynamicsError as e:
                logger.warning(f"Subject {s}: resampling coefficients ({e})")
        else:
            raise UnstableDynamicsError(f"Subject {s}: no stable coefficients after {MAX_RESAMPLES} draws")

        subject_id = f"{s:03d}"
        subjects.append(simulate_subject(params, model.noise, T, stream, burn_in=burn_in, subject_id=subject_id))
        subject_params.append(params)
        ids.append(subject_id)

    truth = GroundTruth(q=len(models), dags=tuple(dags), lag_supports=tuple(supports), group_models=tuple(models),
                        subject_labels=tuple(labels), subject_params=tuple(subject_params), subject_ids=tuple(ids))
    logger.info(f"Generated {n} subjects over {truth.q} groups (m={m}, T={T}, p_l={p_l})")
    return Panel.from_subjects(subjects), truth
