"""Individual and simultaneous intervals and bootstrap tests for mixed effects."""
from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .bootstrap import BootstrapDistribution, quantile_columns, quantile_order_stat
from .estimation import predict_theta
from .model import DataValidationError, FitResult, MixedEffectTarget, numerical_rank

INTERVAL_KINDS = ("individual", "simultaneous")
INTERVAL_METHODS = ("semiparametric_boot", "parametric_boot", "asymptotic_normal", "bonferroni")


@dataclass(frozen=True, eq=False)
class IntervalSet:
    """Intervals ``center_j +/- critical_j * sigma_j`` for every cluster."""

    center: np.ndarray
    sigma: np.ndarray
    critical: np.ndarray
    kind: str
    method: str
    alpha: float

    @property
    def half_width(self) -> np.ndarray:
        return self.critical * self.sigma

    @property
    def lower(self) -> np.ndarray:
        return self.center - self.half_width

    @property
    def upper(self) -> np.ndarray:
        return self.center + self.half_width

    @property
    def width(self) -> np.ndarray:
        return 2.0 * self.half_width

    def contains(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return (self.lower <= theta) & (theta <= self.upper)


@dataclass(frozen=True, eq=False)
class TestResult:
    """Bootstrap test of ``A theta = c``, per contrast and globally (two-sided)."""

    A: np.ndarray
    c: np.ndarray
    statistic: np.ndarray
    max_statistic: float
    critical: np.ndarray
    critical_global: float
    reject: np.ndarray
    reject_global: bool
    sigma: np.ndarray
    plug_in_sigma: bool = False


def normal_quantile(p: float) -> float:
    """Standard normal quantile.

    >>> round(normal_quantile(0.975), 6)
    1.959964
    """
    return NormalDist().inv_cdf(p)


def _check_sigma(sigma, m):
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (m,):
        raise ValueError(f"sigma has shape {sigma.shape}, expected ({m},)")
    if not np.all(sigma > 0):
        raise DataValidationError("sigma must be strictly positive for every cluster")
    return sigma


def _center(fit, target):
    if isinstance(fit, FitResult):
        return predict_theta(fit, target)
    return np.asarray(fit, dtype=float)


def individual_intervals(fit, target: MixedEffectTarget, sigma, critical,
                         method: str = "semiparametric_boot", alpha: float = 0.05) -> IntervalSet:
    """theta_hat_j +/- q_j sigma_j with a per-cluster critical value.

    ``fit`` may be a :class:`FitResult` or the vector of predictions itself.
    """
    center = _center(fit, target)
    sigma = _check_sigma(sigma, center.size)
    crit = np.broadcast_to(np.asarray(critical, dtype=float), center.shape).copy()
    if np.any(crit < 0):
        raise ValueError("critical values must be non-negative")
    return IntervalSet(center, sigma, crit, "individual", method, alpha)


def simultaneous_intervals(fit, target: MixedEffectTarget, sigma, q_alpha: float,
                           method: str = "semiparametric_boot", alpha: float = 0.05) -> IntervalSet:
    """theta_hat_j +/- q sigma_j with one critical value shared by all clusters."""
    if q_alpha < 0:
        raise ValueError("q_alpha must be non-negative")
    center = _center(fit, target)
    sigma = _check_sigma(sigma, center.size)
    return IntervalSet(center, sigma, np.full(center.size, float(q_alpha)), "simultaneous", method, alpha)


def asymptotic_intervals(fit, target, sigma, alpha: float = 0.05) -> tuple[IntervalSet, IntervalSet]:
    """Normal individual intervals and Bonferroni simultaneous intervals."""
    center = _center(fit, target)
    m = center.size
    ind = individual_intervals(center, target, sigma, normal_quantile(1 - alpha / 2),
                               "asymptotic_normal", alpha)
    sim = simultaneous_intervals(center, target, sigma, normal_quantile(1 - alpha / (2 * m)),
                                 "bonferroni", alpha)
    return ind, sim


def bootstrap_intervals(fit, target, boot: BootstrapDistribution,
                        alpha: float | None = None) -> tuple[IntervalSet, IntervalSet]:
    """Individual and simultaneous intervals from a bootstrap distribution."""
    alpha = boot.alpha if alpha is None else alpha
    q_j, q = boot.critical_values(alpha)
    method = "semiparametric_boot" if boot.scheme == "semiparametric" else "parametric_boot"
    return (individual_intervals(fit, target, boot.sigma_hat, q_j, method, alpha),
            simultaneous_intervals(fit, target, boot.sigma_hat, q, method, alpha))


def reference_statistics(fit, target, sigma, theta_true) -> tuple[np.ndarray, float]:
    """t_j = (theta_hat_j - theta_j) / sigma_j and M = max_j |t_j|.

    >>> t, M = reference_statistics(np.array([1.0, -3.0, 2.0]), None, np.ones(3), np.zeros(3))
    >>> M
    3.0
    """
    center = _center(fit, target)
    sigma = _check_sigma(sigma, center.size)
    t = (center - np.asarray(theta_true, dtype=float)) / sigma
    return t, float(np.max(np.abs(t)))


def _contrast(A, c, m):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if A.shape[1] != m:
        raise DataValidationError(f"contrast matrix has {A.shape[1]} columns, expected {m}")
    if c.shape != (A.shape[0],):
        raise DataValidationError(f"c has length {c.size}, expected {A.shape[0]}")
    if A.shape[0] > m or numerical_rank(A) < A.shape[0]:
        raise DataValidationError("contrast matrix must have full row rank")
    return A, c


def hypothesis_test(fit, target, boot: BootstrapDistribution, A, c, alpha: float | None = None) -> TestResult:
    """Two-sided bootstrap tests of ``(A theta)_j = c_j`` and of all of them jointly.

    The contrast scale is ``sigma_H_j^2 = sum_k A_jk^2 sigma_k^2``, exact for
    contrasts selecting single clusters; the same plug-in is applied to the
    replicates.
    """
    alpha = boot.alpha if alpha is None else alpha
    center = _center(fit, target)
    A, c = _contrast(A, c, center.size)
    A2 = A * A
    sigma_h = np.sqrt(A2 @ boot.sigma_hat ** 2)
    t = (A @ center - c) / sigma_h
    M = float(np.max(np.abs(t)))
    sigma_star = np.sqrt(boot.sigma_star ** 2 @ A2.T)
    t_star = (boot.theta_hat_star - boot.theta_star) @ A.T / sigma_star
    abs_t = np.abs(t_star)
    q_j = quantile_columns(abs_t, alpha)
    q = quantile_order_stat(abs_t.max(axis=1), alpha)
    selection = bool(np.all(np.count_nonzero(A, axis=1) == 1))
    return TestResult(A, c, t, M, q_j, q, np.abs(t) >= q_j, bool(M >= q), sigma_h,
                      plug_in_sigma=not selection)
