#!/usr/bin/env python3
"""
CCSL Core Types
Value objects shared by every module: subject series, panels, causal
parameters, group models, cluster state, fit configuration and results.
"""

from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field


FORMAT_VERSION = 1

# Standard deviation of structurally excluded coefficients (self-loops b_ii).
PINNED_STD = 1e-6
# Lower bound on every learned variance.
VARIANCE_FLOOR = 1e-6
WEIGHT_TOLERANCE = 1e-9

UNASSIGNED = -1


class CCSLError(Exception):
    """Base class for all errors raised by this package."""


class PanelValidationError(CCSLError, ValueError):
    """A panel violates a structural invariant."""

    def __init__(self, message: str, kind: str, subject_id: Optional[str] = None,
                 row: Optional[int] = None, column: Optional[int] = None):
        super().__init__(message)
        self.kind = kind
        self.subject_id = subject_id
        self.row = row
        self.column = column


class SingularSystemError(CCSLError, RuntimeError):
    """(I - B) is not invertible."""


class UnstableDynamicsError(CCSLError, RuntimeError):
    """Lagged dynamics could not be brought below the stability bound."""


class IngestionError(CCSLError, ValueError):
    """A panel file could not be read."""

    def __init__(self, message: str, path: Optional[str] = None,
                 line: Optional[int] = None, column: Optional[int] = None):
        super().__init__(message)
        self.path = path
        self.line = line
        self.column = column


class ConfigError(CCSLError, ValueError):
    """A configuration file or field is invalid."""


class DegenerateTruthError(CCSLError, ValueError):
    """AUC requested against a truth vector holding a single class."""


def _frozen_array(values: Any, ndim: int, name: str) -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {array.shape}")
    array.setflags(write=False)
    return array


def _values_equal(a: Any, b: Any) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        a, b = np.asarray(a), np.asarray(b)
        return a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_values_equal(a[k], b[k]) for k in a)
    if isinstance(a, (tuple, list)) and isinstance(b, (tuple, list)):
        return len(a) == len(b) and all(_values_equal(x, y) for x, y in zip(a, b))
    return a == b


class _ValueObject:
    """Field-by-field equality for frozen dataclasses holding arrays."""

    def __eq__(self, other: object) -> bool:
        if type(self) is not type(other):
            return NotImplemented
        return all(_values_equal(getattr(self, f.name), getattr(other, f.name))
                   for f in fields(self))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SubjectSeries(_ValueObject):
    """One subject's multivariate time series, rows are time steps."""

    id: str
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "data", _frozen_array(self.data, 2, f"subject {self.id} data"))

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def m(self) -> int:
        return self.data.shape[1]

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.id, "data": self.data.tolist()}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "SubjectSeries":
        return cls(id=payload["id"], data=payload["data"])


@dataclass(frozen=True, eq=False)
class Panel(_ValueObject):
    """All subjects of a study. Invariants are checked by validate_panel."""

    subjects: Tuple[SubjectSeries, ...]
    m: int

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "m", int(self.m))

    @classmethod
    def from_subjects(cls, subjects: List[SubjectSeries]) -> "Panel":
        subjects = tuple(subjects)
        return cls(subjects=subjects, m=subjects[0].m if subjects else 0)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def ids(self) -> List[str]:
        return [subject.id for subject in self.subjects]

    def to_dict(self) -> Dict[str, Any]:
        return {"m": self.m, "subjects": [s.to_dict() for s in self.subjects]}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "Panel":
        return cls(subjects=tuple(SubjectSeries.from_dict(s) for s in payload["subjects"]),
                   m=payload["m"])


def validate_panel(panel: Panel, p_l: Optional[int] = None) -> None:
    """Raise PanelValidationError unless every panel invariant holds.

    With ``p_l`` given, every subject must also have at least p_l + 1 rows.
    """
    if panel.n == 0:
        raise PanelValidationError("Panel is empty: at least one subject is required", kind="empty")

    for index, subject in enumerate(panel.subjects):
        if subject.m != panel.m:
            raise PanelValidationError(
                f"Dimension mismatch: subject {index} ({subject.id}) has {subject.m} variables, "
                f"panel expects {panel.m}",
                kind="dimension_mismatch", subject_id=subject.id)
        if subject.T < 1:
            raise PanelValidationError(f"Subject {subject.id} has no time steps",
                                       kind="too_short", subject_id=subject.id)
        bad = np.argwhere(~np.isfinite(subject.data))
        if bad.size:
            row, column = (int(v) for v in bad[0])
            raise PanelValidationError(
                f"Non-finite value in subject {subject.id} at row {row}, column {column}",
                kind="non_finite", subject_id=subject.id, row=row, column=column)
        if p_l is not None and subject.T < p_l + 1:
            raise PanelValidationError(
                f"Subject {subject.id} has {subject.T} time steps, lag order {p_l} needs at least {p_l + 1}",
                kind="too_short", subject_id=subject.id)


@dataclass(frozen=True, eq=False)
class CausalParams(_ValueObject):
    """One concrete draw of B (m x m) and the lag stack A (p_l x m x m).

    b_ij is the effect of variable j on variable i. p_l may be 0 for a pure
    instantaneous model.
    """

    B: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        B = _frozen_array(self.B, 2, "B")
        m = B.shape[0]
        if B.shape != (m, m):
            raise ValueError(f"B must be square, got shape {B.shape}")
        if np.any(np.diag(B) != 0.0):
            raise ValueError("B must have an exactly zero diagonal")
        A = np.array(self.A, dtype=float)
        if A.size == 0:
            A = np.zeros((0, m, m))
        A = _frozen_array(A, 3, "A")
        if A.shape[1:] != (m, m):
            raise ValueError(f"A must have shape (p_l, {m}, {m}), got {A.shape}")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "A", A)

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def p_l(self) -> int:
        return self.A.shape[0]

    def to_dict(self) -> Dict[str, Any]:
        return {"B": self.B.tolist(), "A": self.A.tolist(), "m": self.m, "p_l": self.p_l}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "CausalParams":
        m, p_l = payload["m"], payload["p_l"]
        A = np.array(payload["A"], dtype=float).reshape(p_l, m, m)
        return cls(B=payload["B"], A=A)


@dataclass(frozen=True, eq=False)
class NoiseModel(_ValueObject):
    """Gaussian mixture over noise vectors with diagonal covariances.

    Weights that are nonnegative with a positive sum are renormalised to
    sum to one; negative or all-zero weights are rejected.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float)
        if weights.ndim != 1 or weights.size == 0:
            raise ValueError("Noise weights must be a non-empty vector")
        if np.any(~np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError(f"Noise weights must be finite and nonnegative, got {weights.tolist()}")
        total = weights.sum()
        if total <= 0:
            raise ValueError("Noise weights must have a positive sum")
        if abs(total - 1.0) > WEIGHT_TOLERANCE:
            weights = weights / total
        means = _frozen_array(self.means, 2, "noise means")
        variances = _frozen_array(self.variances, 2, "noise variances")
        if means.shape[0] != weights.size or variances.shape != means.shape:
            raise ValueError(
                f"Noise shapes disagree: {weights.size} weights, means {means.shape}, variances {variances.shape}")
        if np.any(~(variances > 0)):
            raise ValueError("Noise variances must be strictly positive")
        object.__setattr__(self, "weights", _frozen_array(weights, 1, "noise weights"))
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)

    @property
    def components(self) -> int:
        return self.weights.size

    @property
    def m(self) -> int:
        return self.means.shape[1]

    def mean_vector(self) -> np.ndarray:
        return self.weights @ self.means

    def to_dict(self) -> Dict[str, Any]:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "NoiseModel":
        return cls(weights=payload["weights"], means=payload["means"], variances=payload["variances"])


@dataclass(frozen=True, eq=False)
class GroupModel(_ValueObject):
    """Per-cluster Gaussians over every entry of B and A, plus the noise model.

    mu_B/sigma_B hold means and standard deviations of b_ij, nu_A/omega_A
    those of a_ij,p. The diagonal of mu_B is forced to 0 and the diagonal
    of sigma_B to PINNED_STD.
    """

    mu_B: np.ndarray
    sigma_B: np.ndarray
    nu_A: np.ndarray
    omega_A: np.ndarray
    noise: NoiseModel

    def __post_init__(self):
        mu_B = np.array(self.mu_B, dtype=float)
        sigma_B = np.array(self.sigma_B, dtype=float)
        m = mu_B.shape[0]
        if mu_B.shape != (m, m) or sigma_B.shape != (m, m):
            raise ValueError(f"mu_B and sigma_B must be square {m}x{m} matrices")
        np.fill_diagonal(mu_B, 0.0)
        np.fill_diagonal(sigma_B, PINNED_STD)
        nu_A = np.array(self.nu_A, dtype=float).reshape(-1, m, m)
        omega_A = np.array(self.omega_A, dtype=float).reshape(-1, m, m)
        if nu_A.shape != omega_A.shape:
            raise ValueError(f"nu_A {nu_A.shape} and omega_A {omega_A.shape} disagree")
        if np.any(~(sigma_B > 0)) or np.any(~(omega_A > 0)):
            raise ValueError("All coefficient standard deviations must be strictly positive")
        if self.noise.m != m:
            raise ValueError(f"Noise model has {self.noise.m} variables, coefficients have {m}")
        object.__setattr__(self, "mu_B", _frozen_array(mu_B, 2, "mu_B"))
        object.__setattr__(self, "sigma_B", _frozen_array(sigma_B, 2, "sigma_B"))
        object.__setattr__(self, "nu_A", _frozen_array(nu_A, 3, "nu_A"))
        object.__setattr__(self, "omega_A", _frozen_array(omega_A, 3, "omega_A"))

    @property
    def m(self) -> int:
        return self.mu_B.shape[0]

    @property
    def p_l(self) -> int:
        return self.nu_A.shape[0]

    @classmethod
    def base_prior(cls, m: int, p_l: int, noise_components: int) -> "GroupModel":
        """Broad base prior: N(0, 1) on every coefficient, standard noise components."""
        noise = NoiseModel(weights=np.full(noise_components, 1.0 / noise_components),
                           means=np.zeros((noise_components, m)),
                           variances=np.ones((noise_components, m)))
        return cls(mu_B=np.zeros((m, m)), sigma_B=np.ones((m, m)),
                   nu_A=np.zeros((p_l, m, m)), omega_A=np.ones((p_l, m, m)), noise=noise)

    def mean_params(self) -> CausalParams:
        return CausalParams(B=self.mu_B, A=self.nu_A)

    def to_dict(self) -> Dict[str, Any]:
        return {"m": self.m, "p_l": self.p_l,
                "mu_B": self.mu_B.tolist(), "sigma_B": self.sigma_B.tolist(),
                "nu_A": self.nu_A.tolist(), "omega_A": self.omega_A.tolist(),
                "noise": self.noise.to_dict()}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "GroupModel":
        m, p_l = payload["m"], payload["p_l"]
        return cls(mu_B=payload["mu_B"], sigma_B=payload["sigma_B"],
                   nu_A=np.array(payload["nu_A"], dtype=float).reshape(p_l, m, m),
                   omega_A=np.array(payload["omega_A"], dtype=float).reshape(p_l, m, m),
                   noise=NoiseModel.from_dict(payload["noise"]))


@dataclass(frozen=True, eq=False)
class ClusterState(_ValueObject):
    """Current partition of the panel and the model of every live cluster.

    ``assignments[s]`` is UNASSIGNED only transiently, while subject s is
    being re-scored.
    """

    assignments: Tuple[int, ...]
    clusters: Dict[int, GroupModel]
    sizes: Dict[int, int]
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "assignments", tuple(int(c) for c in self.assignments))
        object.__setattr__(self, "clusters", {int(k): g for k, g in sorted(self.clusters.items())})
        object.__setattr__(self, "sizes", {int(k): int(v) for k, v in sorted(self.sizes.items())})
        if not self.alpha > 0:
            raise ValueError(f"CRP concentration must be positive, got {self.alpha}")
        object.__setattr__(self, "alpha", float(self.alpha))

    @classmethod
    def empty(cls, n: int, alpha: float) -> "ClusterState":
        return cls(assignments=(UNASSIGNED,) * n, clusters={}, sizes={}, alpha=alpha)

    @property
    def n(self) -> int:
        return len(self.assignments)

    @property
    def q(self) -> int:
        return len(self.clusters)

    @property
    def live_clusters(self) -> List[int]:
        return list(self.clusters)

    def next_index(self) -> int:
        return max(self.clusters, default=-1) + 1

    def members(self, k: int) -> List[int]:
        return [s for s, c in enumerate(self.assignments) if c == k]

    def check_invariants(self, allow_unassigned: bool = False) -> None:
        """Raise AssertionError describing the first violated invariant."""
        counts: Dict[int, int] = {}
        for s, c in enumerate(self.assignments):
            if c == UNASSIGNED:
                if not allow_unassigned:
                    raise AssertionError(f"Subject {s} is unassigned")
                continue
            counts[c] = counts.get(c, 0) + 1
        if counts != self.sizes:
            raise AssertionError(f"Sizes {self.sizes} disagree with assignments {counts}")
        if set(self.clusters) != set(self.sizes):
            raise AssertionError(f"Clusters {sorted(self.clusters)} disagree with sizes {sorted(self.sizes)}")
        if any(size < 1 for size in self.sizes.values()):
            raise AssertionError("Empty cluster kept alive")

    def to_dict(self) -> Dict[str, Any]:
        return {"assignments": list(self.assignments), "alpha": self.alpha,
                "clusters": [{"index": k, "size": self.sizes[k], "model": g.to_dict()}
                             for k, g in self.clusters.items()]}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ClusterState":
        clusters = {c["index"]: GroupModel.from_dict(c["model"]) for c in payload["clusters"]}
        sizes = {c["index"]: c["size"] for c in payload["clusters"]}
        return cls(assignments=tuple(payload["assignments"]), clusters=clusters, sizes=sizes,
                   alpha=payload["alpha"])


class FitConfig(BaseModel):
    """Every knob of the clustering / structure-learning loop."""

    alpha: float = Field(1.0, gt=0, description="CRP concentration")
    p_l: int = Field(1, ge=1, description="Maximum lag")
    noise_components: int = Field(2, ge=1, description="Mixture components q' per noise model")
    mc_samples_fit: int = Field(32, ge=1, description="Monte-Carlo samples per ELBO gradient")
    mc_samples_score: int = Field(128, ge=1, description="Monte-Carlo samples per membership score")
    step_size: float = Field(0.01, gt=0, description="Adam step size")
    beta1: float = Field(0.9, ge=0, lt=1, description="First moment decay")
    beta2: float = Field(0.999, ge=0, lt=1, description="Second moment decay")
    adam_epsilon: float = Field(1e-8, gt=0)
    inner_iterations: int = Field(50, ge=0, description="Optimizer steps per affected cluster")
    warm_start_iterations: int = Field(20, ge=0, description="Optimizer steps for a new singleton cluster")
    refresh_iterations: int = Field(50, ge=0, description="Optimizer steps for every cluster after a sweep")
    max_sweeps: int = Field(50, ge=1)
    tolerance: float = Field(1.0, gt=0, description="Absolute change of the total objective between sweeps")
    tau_B: float = Field(0.1, gt=0, description="Instantaneous edge threshold")
    tau_A: float = Field(0.1, gt=0, description="Lagged edge threshold")
    init_scale: float = Field(0.1, gt=0, description="Starting std of a new cluster's coefficients")
    init_noise_jitter: float = Field(0.5, ge=0, description="Spread of a new cluster's starting noise means")
    seed: Optional[int] = Field(None, ge=0, description="Master random seed")


@dataclass(frozen=True, eq=False)
class FitResult(_ValueObject):
    """Final partition, per-cluster models, extracted graphs and diagnostics."""

    state: ClusterState
    graphs: Dict[int, Tuple[np.ndarray, np.ndarray]]
    elbo_trace: Tuple[float, ...]
    sweeps_run: int
    converged: bool
    cluster_count_trace: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        if set(self.graphs) != set(self.state.clusters):
            raise ValueError(f"Graph keys {sorted(self.graphs)} disagree with clusters {sorted(self.state.clusters)}")
        object.__setattr__(self, "elbo_trace", tuple(float(v) for v in self.elbo_trace))
        object.__setattr__(self, "cluster_count_trace", tuple(int(v) for v in self.cluster_count_trace))

    @property
    def q(self) -> int:
        return self.state.q

    def to_dict(self) -> Dict[str, Any]:
        return {
            "state": self.state.to_dict(),
            "graphs": [{"index": k, "instantaneous": inst.astype(int).tolist(), "lagged": lag.astype(int).tolist()}
                       for k, (inst, lag) in sorted(self.graphs.items())],
            "elbo_trace": list(self.elbo_trace),
            "cluster_count_trace": list(self.cluster_count_trace),
            "sweeps_run": self.sweeps_run,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "FitResult":
        state = ClusterState.from_dict(payload["state"])
        graphs = {}
        for entry in payload["graphs"]:
            group = state.clusters[entry["index"]]
            lag = np.array(entry["lagged"], dtype=bool).reshape(group.p_l, group.m, group.m)
            graphs[entry["index"]] = (np.array(entry["instantaneous"], dtype=bool), lag)
        return cls(state=state, graphs=graphs, elbo_trace=tuple(payload["elbo_trace"]),
                   sweeps_run=payload["sweeps_run"], converged=payload["converged"],
                   cluster_count_trace=tuple(payload.get("cluster_count_trace", ())))

