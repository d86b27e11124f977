"""Domain types for clustered data and the two-component linear mixed model.

The model is ``y_j = X_j beta + Z_j u_j + e_j`` with ``var(e_j) = sigma_e2 I``
and ``var(u_j) = sigma_u2 I``, so that ``V_j = sigma_e2 I + sigma_u2 Z_j Z_j'``
is linear in the variance parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Hashable, Iterable, Sequence

import numpy as np

RANK_RTOL = 1e-10


class DataValidationError(ValueError):
    """Input data violate a structural requirement of the model."""


class RankDeficiencyError(DataValidationError):
    """A design or information matrix is (numerically) rank deficient."""


class ConvergenceError(RuntimeError):
    """Variance-component optimisation did not converge.

    The last iterate is kept on ``last_iterate`` as ``(sigma_e2, sigma_u2)``.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


def _frozen(a, ndim):
    arr = np.array(a, dtype=np.float64, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != ndim:
        raise DataValidationError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ClusterBlock:
    """One cluster: response, fixed-effect design and random-effect design."""

    cluster_id: Hashable
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen(self.y, 1))
        object.__setattr__(self, "X", _frozen(self.X, 2))
        object.__setattr__(self, "Z", _frozen(self.Z, 2))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """Ordered collection of cluster blocks.

    Stacked views (``y``, ``X``, ``cluster_index``) are built lazily and are
    read-only, so a dataset can be shared between workers.
    """

    clusters: tuple[ClusterBlock, ...]

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))

    @classmethod
    def from_arrays(cls, cluster_ids, y, X, Z=None) -> "ClusteredDataset":
        """Build from stacked arrays; rows are grouped by first appearance of the id."""
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        Z = np.ones((y.shape[0], 1)) if Z is None else np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z.reshape(-1, 1)
        order: dict[Any, list[int]] = {}
        for i, cid in enumerate(cluster_ids):
            order.setdefault(cid, []).append(i)
        blocks = [ClusterBlock(cid, y[idx], X[idx], Z[idx]) for cid, idx in order.items()]
        return cls(tuple(blocks))

    @property
    def m(self) -> int:
        return len(self.clusters)

    @cached_property
    def n_j(self) -> np.ndarray:
        out = np.array([c.n for c in self.clusters], dtype=np.int64)
        out.setflags(write=False)
        return out

    @property
    def n(self) -> int:
        return int(self.n_j.sum())

    @property
    def p(self) -> int:
        """Number of fixed-effect columns (intercept included)."""
        return self.clusters[0].X.shape[1] if self.clusters else 0

    @cached_property
    def q_j(self) -> np.ndarray:
        out = np.array([c.q for c in self.clusters], dtype=np.int64)
        out.setflags(write=False)
        return out

    @property
    def cluster_ids(self) -> list:
        return [c.cluster_id for c in self.clusters]

    @property
    def single_column(self) -> bool:
        """True when every cluster has exactly one random-effect column."""
        return bool(np.all(self.q_j == 1))

    @cached_property
    def y(self) -> np.ndarray:
        out = np.concatenate([c.y for c in self.clusters])
        out.setflags(write=False)
        return out

    @cached_property
    def X(self) -> np.ndarray:
        out = np.ascontiguousarray(np.vstack([c.X for c in self.clusters]))
        out.setflags(write=False)
        return out

    @cached_property
    def cluster_index(self) -> np.ndarray:
        out = np.repeat(np.arange(self.m, dtype=np.int64), self.n_j)
        out.setflags(write=False)
        return out

    @cached_property
    def offsets(self) -> np.ndarray:
        out = np.concatenate([[0], np.cumsum(self.n_j)]).astype(np.int64)
        out.setflags(write=False)
        return out

    def with_response(self, y) -> "ClusteredDataset":
        """Same designs, new stacked response."""
        y = np.asarray(y, dtype=float)
        off = self.offsets
        blocks = [ClusterBlock(c.cluster_id, y[off[j]:off[j + 1]], c.X, c.Z)
                  for j, c in enumerate(self.clusters)]
        return ClusteredDataset(tuple(blocks))


@dataclass(frozen=True)
class VarianceParams:
    """Variance components delta = (sigma_e2, sigma_u2)."""

    sigma_e2: float
    sigma_u2: float

    def __post_init__(self):
        se2, su2 = float(self.sigma_e2), float(self.sigma_u2)
        if not (np.isfinite(se2) and np.isfinite(su2)):
            raise ValueError("variance parameters must be finite")
        if se2 <= 0:
            raise ValueError(f"sigma_e2 must be positive, got {se2}")
        if su2 < 0:
            raise ValueError(f"sigma_u2 must be non-negative, got {su2}")
        object.__setattr__(self, "sigma_e2", se2)
        object.__setattr__(self, "sigma_u2", su2)

    def R(self, n_j: int) -> np.ndarray:
        return self.sigma_e2 * np.eye(n_j)

    def G(self, q_j: int) -> np.ndarray:
        return self.sigma_u2 * np.eye(q_j)

    def V(self, Z: np.ndarray) -> np.ndarray:
        """Marginal covariance of one cluster, sigma_e2 I + sigma_u2 Z Z'."""
        Z = np.asarray(Z, dtype=float)
        return self.sigma_e2 * np.eye(Z.shape[0]) + self.sigma_u2 * (Z @ Z.T)

    def as_tuple(self) -> tuple[float, float]:
        return (self.sigma_e2, self.sigma_u2)


@dataclass(frozen=True, eq=False)
class MixedEffectTarget:
    """Coefficients of the mixed effects theta_j = k_j' beta + l_j' u_j."""

    k: np.ndarray
    l: tuple[np.ndarray, ...]

    def __post_init__(self):
        k = _frozen(self.k, 2)
        l = tuple(_frozen(np.atleast_1d(v), 1) for v in self.l)
        if k.shape[0] != len(l):
            raise ValueError("k and l must have one entry per cluster")
        if not np.all(np.isfinite(k)) or not all(np.all(np.isfinite(v)) for v in l):
            raise ValueError("target coefficients must be finite")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "l", l)

    @classmethod
    def random_intercept(cls, k) -> "MixedEffectTarget":
        """Target with l_j = 1 for single-column random effects."""
        k = np.atleast_2d(np.asarray(k, dtype=float))
        return cls(k, tuple(np.ones(1) for _ in range(k.shape[0])))

    @classmethod
    def cluster_means(cls, data: ClusteredDataset) -> "MixedEffectTarget":
        """k_j = column means of X_j, l_j = column means of Z_j."""
        k = np.vstack([c.X.mean(axis=0) for c in data.clusters])
        return cls(k, tuple(c.Z.mean(axis=0) for c in data.clusters))

    @cached_property
    def l_flat(self) -> np.ndarray:
        return np.concatenate(self.l)

    @property
    def m(self) -> int:
        return self.k.shape[0]

    def check(self, data: ClusteredDataset) -> None:
        if self.k.shape != (data.m, data.p):
            raise ValueError(f"k has shape {self.k.shape}, expected {(data.m, data.p)}")
        for j, (v, q) in enumerate(zip(self.l, data.q_j)):
            if v.shape[0] != q:
                raise ValueError(f"l_{j} has length {v.shape[0]}, expected {q}")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Fitted two-component mixed model."""

    beta_hat: np.ndarray
    delta_hat: VarianceParams
    u_hat: tuple[np.ndarray, ...]
    gls_information: np.ndarray
    reml_loglik: float
    boundary_flag: bool
    iterations: int
    likelihood: str = "reml"
    converged: bool = True

    @cached_property
    def u_flat(self) -> np.ndarray:
        return np.concatenate(self.u_hat)

    @property
    def m(self) -> int:
        return len(self.u_hat)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def numerical_rank(A: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Rank from singular values above ``rtol`` times the largest one."""
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        return 0
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.sum(sv > rtol * sv[0]))


def validate_dataset(data: ClusteredDataset) -> ValidationReport:
    """Collect every structural problem instead of stopping at the first."""
    report = ValidationReport()
    v = report.violations
    if data.m < 2:
        v.append(f"fewer than two clusters (m={data.m})")
    if data.m == 0:
        return report
    ncols = {c.X.shape[1] for c in data.clusters}
    if len(ncols) > 1:
        v.append(f"inconsistent fixed-effect column counts {sorted(ncols)}")
    if min(ncols) < 1:
        v.append("fixed-effect design has no columns")
    for j, c in enumerate(data.clusters):
        if c.n == 0:
            v.append(f"empty cluster {c.cluster_id!r}")
            continue
        if c.X.shape[0] != c.n or c.Z.shape[0] != c.n:
            v.append(f"cluster {c.cluster_id!r}: row counts of y, X, Z differ")
            continue
        if not (np.all(np.isfinite(c.y)) and np.all(np.isfinite(c.X)) and np.all(np.isfinite(c.Z))):
            v.append(f"cluster {c.cluster_id!r}: non-finite values")
        elif c.q < 1 or numerical_rank(c.Z) < c.q:
            v.append(f"cluster {c.cluster_id!r}: random-effect design rank deficient")
    if v:
        return report
    X = data.X
    if numerical_rank(X) < X.shape[1]:
        v.append(f"fixed-effect design rank deficient (rank {numerical_rank(X)} < {X.shape[1]})")
    return report


def check_fit_ready(data: ClusteredDataset) -> None:
    """Raise if ``data`` cannot be fitted."""
    report = validate_dataset(data)
    if report.ok:
        return
    rank_issues = [s for s in report.violations if "rank deficient" in s]
    if rank_issues and len(rank_issues) == len(report.violations):
        raise RankDeficiencyError("; ".join(report.violations))
    raise DataValidationError("; ".join(report.violations))


def build_random_intercept(rows: Iterable[tuple[Hashable, float, Sequence[float]]]) -> ClusteredDataset:
    """Assemble a random-intercept dataset from ``(cluster_id, y, covariates)`` rows.

    ``X_j = [1 | covariates]`` and ``Z_j`` is a column of ones.  Clusters are
    ordered by first appearance; rows keep their input order within a cluster.
    """
    groups: dict[Hashable, list[tuple[float, Sequence[float]]]] = {}
    arity = None
    for cid, y, cov in rows:
        cov = tuple(float(c) for c in np.atleast_1d(cov)) if cov is not None else ()
        if arity is None:
            arity = len(cov)
        elif len(cov) != arity:
            raise DataValidationError(
                f"inconsistent covariate arity: expected {arity}, got {len(cov)} for cluster {cid!r}")
        groups.setdefault(cid, []).append((float(y), cov))
    if arity is None:
        raise DataValidationError("no rows")
    blocks = []
    for cid, recs in groups.items():
        y = np.array([r[0] for r in recs])
        X = np.column_stack([np.ones(len(recs))] + [np.array([r[1][k] for r in recs]) for k in range(arity)])
        blocks.append(ClusterBlock(cid, y, X, np.ones((len(recs), 1))))
    return ClusteredDataset(tuple(blocks))
