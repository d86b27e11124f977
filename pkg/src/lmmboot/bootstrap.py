"""Random-effects bootstrap: residual pools, resampling, refitting.

The semiparametric scheme resamples rescaled, centred predicted random
effects and conditional residuals, regenerates ``y* = X beta_hat + Z u* + e*``
and refits; the parametric scheme draws ``u*`` and ``e*`` from normal laws
with the fitted variances.  Replicate ``b`` always uses the random stream
``(seed, scheme, b, 0, attempt)``, so a distribution does not depend on how
replicates are spread over workers.
"""
from __future__ import annotations

import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from multiprocessing import get_context
from typing import NamedTuple

import numpy as np

from . import rng as rngmod
from .estimation import (
    Design,
    RemlConfig,
    design_of,
    fit_response,
    floors,
)
from .model import (
    ClusteredDataset,
    ConvergenceError,
    DataValidationError,
    FitResult,
    MixedEffectTarget,
    VarianceParams,
)
from .variability import (
    ANALYTIC_CHOICES,
    SIGMA_CHOICES,
    fisher_information_reml,
    g1_design,
    g2_design,
    g3_design,
    mse_3t,
    mse_b1,
    mse_bc,
    mse_spa,
)

SCHEMES = ("semiparametric", "parametric")
SCALING_MODES = ("scalar_moment_match", "matrix_symmetrized")
DUMP_VERSION = 1


class BootstrapFailure(RuntimeError):
    """Too many bootstrap refits failed."""


@dataclass(frozen=True)
class BootstrapConfig:
    """Settings of a bootstrap run.

    ``studentize_at`` selects where analytic sigma choices are evaluated for
    the bootstrap statistics: at each replicate's own estimate
    (``"delta_star"``) or at the original estimate (``"delta_hat"``).
    """

    b_outer: int = 1000
    c_inner: int = 1
    alpha: float = 0.05
    scheme: str = "semiparametric"
    sigma_choice: str = "g1"
    seed: int = 0
    scaling_mode: str = "scalar_moment_match"
    studentize_at: str = "delta_star"
    max_attempts: int = 10
    failure_budget: float = 0.05
    workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.b_outer < 1:
            raise ValueError("b_outer must be >= 1")
        if self.c_inner < 1:
            raise ValueError("c_inner must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.sigma_choice not in SIGMA_CHOICES:
            raise ValueError(f"sigma_choice must be one of {SIGMA_CHOICES}")
        if self.scaling_mode not in SCALING_MODES:
            raise ValueError(f"scaling_mode must be one of {SCALING_MODES}")
        if self.studentize_at not in ("delta_star", "delta_hat"):
            raise ValueError("studentize_at must be 'delta_star' or 'delta_hat'")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True, eq=False)
class ResidualPools:
    """Rescaled and centred residual pools.

    ``u_*`` arrays have shape (m, q); ``e_*`` arrays are stacked over
    clusters.
    """

    e_raw: np.ndarray
    u_raw: np.ndarray
    e_scaled: np.ndarray
    u_scaled: np.ndarray
    e_scaled_centered: np.ndarray
    u_scaled_centered: np.ndarray
    scaling_mode: str = "scalar_moment_match"
    degenerate_u: bool = False


class BootstrapSample(NamedTuple):
    y: np.ndarray
    u: np.ndarray  # (m, q)
    e: np.ndarray
    theta: np.ndarray | None


@dataclass(frozen=True, eq=False)
class InnerReplicates:
    """Second-level records of a double bootstrap, shape (B, C, m)."""

    theta_2: np.ndarray
    theta_hat_2: np.ndarray
    n_failed: int = 0


@dataclass(frozen=True, eq=False)
class Studentized:
    """Reference and bootstrap studentization for one sigma choice."""

    choice: str
    sigma_hat: np.ndarray
    sigma_star: np.ndarray
    t_star: np.ndarray
    m_star: np.ndarray
    floored: int = 0

    def critical_values(self, alpha: float) -> tuple[np.ndarray, float]:
        """Per-cluster q*_j from |t*_j| and the simultaneous q* from M*."""
        return quantile_columns(np.abs(self.t_star), alpha), quantile_order_stat(self.m_star, alpha)


@dataclass(frozen=True, eq=False)
class BootstrapDistribution:
    """Replicate store of a bootstrap run.

    Per-cluster arrays have shape (B, m), one column per cluster.
    ``sigma_star``, ``t_star`` and ``m_star`` hold the studentization for
    ``sigma_choice``; :func:`studentize` gives any other choice from the same
    replicates.
    """

    scheme: str
    alpha: float
    seed: int
    sigma_choice: str
    delta_star: np.ndarray
    beta_star: np.ndarray
    theta_star: np.ndarray
    theta_tilde_star: np.ndarray
    theta_hat_star: np.ndarray
    g1_star: np.ndarray
    g12_star: np.ndarray
    mse_l_star: np.ndarray | None
    sigma_hat: np.ndarray
    sigma_star: np.ndarray
    t_star: np.ndarray
    m_star: np.ndarray
    n_failed: int = 0
    n_redrawn: int = 0
    inner: InnerReplicates | None = None
    floored: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def B(self) -> int:
        return int(self.theta_star.shape[0])

    @property
    def m(self) -> int:
        return int(self.theta_star.shape[1])

    def critical_values(self, alpha: float | None = None) -> tuple[np.ndarray, float]:
        alpha = self.alpha if alpha is None else alpha
        return quantile_columns(np.abs(self.t_star), alpha), quantile_order_stat(self.m_star, alpha)


# -- quantiles --------------------------------------------------------------------

def order_index(B: int, alpha: float) -> int:
    """1-based index floor((1 - alpha) B) + 1, capped at B.

    >>> order_index(1000, 0.05)
    951
    >>> order_index(19, 0.05)
    19
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    # round first so 0.95 * 1000 = 949.999... counts as 950
    k = math.floor(round((1.0 - alpha) * B, 9)) + 1
    return min(k, B)


def quantile_order_stat(values, alpha: float) -> float:
    """Order statistic of ``values`` at :func:`order_index`."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("quantile of an empty sample")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    k = order_index(v.size, alpha)
    return float(np.partition(v, k - 1)[k - 1])


def quantile_columns(values: np.ndarray, alpha: float) -> np.ndarray:
    """Column-wise :func:`quantile_order_stat` of a (B, m) array."""
    v = np.asarray(values, dtype=float)
    if v.shape[0] == 0:
        raise ValueError("quantile of an empty sample")
    k = order_index(v.shape[0], alpha)
    return np.partition(v, k - 1, axis=0)[k - 1].copy()


# -- residual pools ---------------------------------------------------------------

def _inv_sqrt_psd(C: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    C = 0.5 * (C + C.T)
    w, Q = np.linalg.eigh(C)
    keep = w > rtol * max(w.max(), 0.0)
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / np.sqrt(w[keep])
    return (Q * inv) @ Q.T


def _projection_p(data: ClusteredDataset, se2: float, su2: float) -> np.ndarray:
    """Dense P = V^-1 (I - H) = V^-1 - V^-1 X (X'V^-1X)^-1 X'V^-1."""
    n = data.n
    Vi = np.zeros((n, n))
    off = data.offsets
    for j, c in enumerate(data.clusters):
        Kt = np.linalg.inv(se2 * np.eye(c.q) + su2 * c.Z.T @ c.Z)
        Vi[off[j]:off[j + 1], off[j]:off[j + 1]] = (np.eye(c.n) - su2 * c.Z @ Kt @ c.Z.T) / se2
    ViX = Vi @ data.X
    return Vi - ViX @ np.linalg.solve(data.X.T @ ViX, ViX.T)


def _block_z(data: ClusteredDataset) -> np.ndarray:
    Zb = np.zeros((data.n, int(sum(data.q_j))))
    off = data.offsets
    col = 0
    for j, c in enumerate(data.clusters):
        Zb[off[j]:off[j + 1], col:col + c.q] = c.Z
        col += c.q
    return Zb


def _scale_pools(e, U, se2, su2, mode, boundary, data=None):
    """Scale and centre (e, U); returns a ResidualPools."""
    n = e.size
    m, q = U.shape
    degenerate = bool(boundary) or not np.any(U)
    if mode == "scalar_moment_match":
        ss = float(e @ e)
        e_s = e * math.sqrt(n * se2 / ss) if ss > 0 else np.zeros_like(e)
        if degenerate:
            u_s = np.zeros_like(U)
        else:
            col = np.einsum("jk,jk->k", U, U)
            scale = np.where(col > 0, np.sqrt(m * su2 / np.where(col > 0, col, 1.0)), 0.0)
            u_s = U * scale
    else:
        P = _projection_p(data, se2, su2)
        e_s = math.sqrt(se2) * (_inv_sqrt_psd(se2 * se2 * P) @ e)
        if degenerate:
            u_s = np.zeros_like(U)
        else:
            Zb = _block_z(data)
            Cu = su2 * su2 * (Zb.T @ P @ Zb)
            u_s = (math.sqrt(su2) * (_inv_sqrt_psd(Cu) @ U.ravel())).reshape(m, q)
    return ResidualPools(
        e_raw=e, u_raw=U, e_scaled=e_s, u_scaled=u_s,
        e_scaled_centered=e_s - e_s.mean(),
        u_scaled_centered=u_s - u_s.mean(axis=0),
        scaling_mode=mode, degenerate_u=degenerate)


def _u_matrix(u_hat) -> np.ndarray:
    qs = {len(u) for u in u_hat}
    if len(qs) != 1:
        raise DataValidationError("semiparametric resampling needs the same number of random effects in every cluster")
    return np.array([np.asarray(u, dtype=float) for u in u_hat]).reshape(len(u_hat), qs.pop())


def scale_center_residuals(data: ClusteredDataset, fit: FitResult,
                           mode: str = "scalar_moment_match") -> ResidualPools:
    """Residual pools from a fit: rescale to the fitted variances, then centre.

    Scalar mode multiplies e_hat by sqrt(n sigma_e2 / sum e_hat^2) and each
    random-effect coordinate by sqrt(m sigma_u2 / sum_j u_hat_jk^2).  Matrix
    mode applies symmetric inverse square roots of the covariance matrices of
    the predictors.  A boundary fit gives an all-zero random-effect pool.

    Examples
    --------
    >>> from lmmboot.model import build_random_intercept, VarianceParams, FitResult
    >>> d = build_random_intercept([("a", 1.0, []), ("a", 3.0, []), ("b", -1.0, []), ("b", -3.0, [])])
    >>> fit = FitResult(np.zeros(1), VarianceParams(1.0, 1.0), (np.array([1.0]), np.array([-1.0])),
    ...                 np.eye(1), 0.0, False, 0)
    >>> scale_center_residuals(d, fit).u_scaled_centered.ravel().tolist()
    [1.0, -1.0]
    """
    if mode not in SCALING_MODES:
        raise ValueError(f"mode must be one of {SCALING_MODES}")
    parts = [c.y - c.X @ fit.beta_hat - c.Z @ u for c, u in zip(data.clusters, fit.u_hat)]
    e = np.concatenate(parts)
    U = _u_matrix(fit.u_hat)
    se2, su2 = fit.delta_hat.as_tuple()
    pools = _scale_pools(e, U, se2, su2, mode, fit.boundary_flag, data)
    if pools.degenerate_u:
        warnings.warn("random-effect pool is degenerate (boundary fit); resampled u* are zero",
                      RuntimeWarning, stacklevel=2)
    return pools


# -- sample generation ------------------------------------------------------------

class _Layout:
    """Row layout used to assemble X beta + Z u + e quickly."""

    def __init__(self, data: ClusteredDataset, target: MixedEffectTarget | None):
        self.n = data.n
        self.m = data.m
        self.X = np.ascontiguousarray(data.X)
        self.cluster = np.asarray(data.cluster_index)
        self.q_j = np.asarray(data.q_j)
        self.qmax = int(self.q_j.max())
        self.equal_q = bool(np.all(self.q_j == self.qmax))
        Zpad = np.zeros((self.n, self.qmax))
        off = data.offsets
        for j, c in enumerate(data.clusters):
            Zpad[off[j]:off[j + 1], :c.q] = c.Z
        self.Zpad = Zpad
        self.single = self.qmax == 1
        self.z = Zpad[:, 0].copy()
        self.mask = (np.arange(self.qmax)[None, :] < self.q_j[:, None]).astype(float)
        self.u_offsets = np.concatenate([[0], np.cumsum(self.q_j)]).astype(np.int64)
        if target is not None:
            lpad = np.zeros((self.m, self.qmax))
            for j, l in enumerate(target.l):
                lpad[j, :l.size] = l
            self.lpad = lpad
            self.k = target.k

    def zu(self, U):
        if self.single:
            return self.z * U[self.cluster, 0]
        return np.einsum("nq,nq->n", self.Zpad, U[self.cluster])

    def pad(self, u_flat):
        if self.equal_q:
            return u_flat.reshape(self.m, self.qmax)
        U = np.zeros((self.m, self.qmax))
        for j in range(self.m):
            U[j, :self.q_j[j]] = u_flat[self.u_offsets[j]:self.u_offsets[j + 1]]
        return U

    def theta(self, beta, U):
        return self.k @ beta + np.einsum("jq,jq->j", self.lpad, U)


def _draw_semi(layout: _Layout, xb, u_pool, e_pool, rng):
    m, q = u_pool.shape
    idx = rng.integers(0, m, size=(layout.m, q))
    U = u_pool[idx, np.arange(q)[None, :]]
    e = e_pool[rng.integers(0, e_pool.size, size=layout.n)]
    return xb + layout.zu(U) + e, U, e


def _draw_para(layout: _Layout, xb, se2, su2, rng):
    U = math.sqrt(max(su2, 0.0)) * rng.standard_normal((layout.m, layout.qmax)) * layout.mask
    e = math.sqrt(max(se2, 0.0)) * rng.standard_normal(layout.n)
    return xb + layout.zu(U) + e, U, e


def draw_semiparametric(pools: ResidualPools, fit: FitResult, data: ClusteredDataset,
                        rng: np.random.Generator, target: MixedEffectTarget | None = None) -> BootstrapSample:
    """One semiparametric sample ``y* = X beta_hat + Z u* + e*``.

    Random-effect coordinates and residuals are drawn independently with
    replacement from the centred pools (u first, then e).
    """
    layout = _Layout(data, target)
    xb = layout.X @ fit.beta_hat
    y, U, e = _draw_semi(layout, xb, pools.u_scaled_centered, pools.e_scaled_centered, rng)
    theta = layout.theta(fit.beta_hat, U) if target is not None else None
    return BootstrapSample(y, U, e, theta)


def draw_parametric(fit: FitResult, data: ClusteredDataset, rng: np.random.Generator,
                    target: MixedEffectTarget | None = None) -> BootstrapSample:
    """One parametric sample with u*_j ~ N(0, sigma_u2 I) and e* ~ N(0, sigma_e2)."""
    layout = _Layout(data, target)
    xb = layout.X @ fit.beta_hat
    y, U, e = _draw_para(layout, xb, *fit.delta_hat.as_tuple(), rng)
    theta = layout.theta(fit.beta_hat, U) if target is not None else None
    return BootstrapSample(y, U, e, theta)


# -- replicate engine ---------------------------------------------------------------

class _Engine:
    """Everything one replicate needs; shared read-only by workers."""

    def __init__(self, data, fit, target, config: BootstrapConfig, reml_config: RemlConfig,
                 double: bool, need_mse_l: bool):
        self.data = data
        self.design: Design = design_of(data)
        self.layout = _Layout(data, target)
        self.target = target
        self.config = config
        self.reml = reml_config
        self.double = double
        self.need_mse_l = need_mse_l
        self.beta = np.asarray(fit.beta_hat, dtype=float)
        self.se2, self.su2 = fit.delta_hat.as_tuple()
        self.xb = self.layout.X @ self.beta
        self.purpose = (rngmod.OUTER_SEMIPARAMETRIC if config.scheme == "semiparametric"
                        else rngmod.OUTER_PARAMETRIC)
        if config.scheme == "semiparametric":
            e = data.y - self.xb - self.layout.zu(self.layout.pad(fit.u_flat))
            pools = _scale_pools(e, _u_matrix(fit.u_hat), self.se2, self.su2, config.scaling_mode,
                                 fit.boundary_flag, data)
            self.u_pool = pools.u_scaled_centered
            self.e_pool = pools.e_scaled_centered
        else:
            self.u_pool = self.e_pool = None

    def _draw(self, rng, beta_xb, se2, su2, u_pool, e_pool):
        if self.config.scheme == "semiparametric":
            return _draw_semi(self.layout, beta_xb, u_pool, e_pool, rng)
        return _draw_para(self.layout, beta_xb, se2, su2, rng)

    def _fit(self, y):
        d = self.design
        resp = d.response(y)
        y_var = float(np.var(y, ddof=1))
        fe, fu = floors(y_var, self.reml)
        return resp, fit_response(d, resp, self.reml, fe, fu, y_var)

    def replicate(self, b: int):
        """Records of replicate ``b`` or None when every attempt failed."""
        cfg = self.config
        lay = self.layout
        for attempt in range(cfg.max_attempts):
            rng = rngmod.stream(cfg.seed, self.purpose, b, 0, attempt)
            y, U, _ = self._draw(rng, self.xb, self.se2, self.su2, self.u_pool, self.e_pool)
            try:
                resp, raw = self._fit(y)
                beta_t, u_t, _ = self.design.gls(resp, self.se2, self.su2)
                g1s = g1_design(self.design, self.target, raw.se2, raw.su2)
                g12 = g1s + g2_design(self.design, self.target, raw.se2, raw.su2, raw.info)
            except (ConvergenceError, np.linalg.LinAlgError, DataValidationError):
                continue
            if not np.all(g1s > 0) or not np.all(np.isfinite(g12)):
                continue
            theta = lay.theta(self.beta, U)
            theta_t = lay.theta(beta_t, lay.pad(u_t))
            theta_h = lay.theta(raw.beta, lay.pad(raw.u))
            msel = None
            if self.need_mse_l:
                msel = g12 + 2.0 * self._g3(raw.se2, raw.su2)
            inner = self._inner(b, y, raw) if self.double else None
            return (attempt, np.array([raw.se2, raw.su2]), raw.beta, theta, theta_t, theta_h,
                    g1s, g12, msel, inner)
        return None

    def _g3(self, se2, su2):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            info = fisher_information_reml(self.data, VarianceParams(se2, su2), self.reml.likelihood)
        if info.singular:
            return np.zeros(self.layout.m)
        return g3_design(self.design, self.target, se2, su2, info.v_a)

    def _inner(self, b, y, raw):
        cfg = self.config
        lay = self.layout
        xb = lay.X @ raw.beta
        Uh = lay.pad(raw.u)
        u_pool = e_pool = None
        if cfg.scheme == "semiparametric":
            e = y - xb - lay.zu(Uh)
            pools = _scale_pools(e, Uh, raw.se2, raw.su2, cfg.scaling_mode, raw.boundary, self.data)
            u_pool, e_pool = pools.u_scaled_centered, pools.e_scaled_centered
        C = cfg.c_inner
        th2 = np.full((C, lay.m), np.nan)
        hat2 = np.full((C, lay.m), np.nan)
        failed = 0
        for c in range(C):
            for attempt in range(cfg.max_attempts):
                rng = rngmod.stream(cfg.seed, rngmod.INNER + 16 * self.purpose, b, c + 1, attempt)
                y2, U2, _ = self._draw(rng, xb, raw.se2, raw.su2, u_pool, e_pool)
                try:
                    _, raw2 = self._fit(y2)
                except (ConvergenceError, np.linalg.LinAlgError, DataValidationError):
                    continue
                th2[c] = lay.theta(raw.beta, U2)
                hat2[c] = lay.theta(raw2.beta, lay.pad(raw2.u))
                break
            else:
                failed += 1
        return th2, hat2, failed


_WORKER_ENGINE: _Engine | None = None


def _init_worker(engine):
    global _WORKER_ENGINE
    _WORKER_ENGINE = engine


def _run_chunk(bounds):
    lo, hi = bounds
    return [_WORKER_ENGINE.replicate(b) for b in range(lo, hi)]


def _run_replicates(engine: _Engine, B: int, workers: int):
    if workers <= 1 or B < 2:
        return [engine.replicate(b) for b in range(B)]
    nchunks = min(B, workers * 4)
    edges = np.linspace(0, B, nchunks + 1).astype(int)
    chunks = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
    ctx = get_context("fork") if os.name == "posix" else None
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                             initializer=_init_worker, initargs=(engine,)) as pool:
        out = []
        for part in pool.map(_run_chunk, chunks):
            out.extend(part)
    return out


# -- studentization -------------------------------------------------------------------

def reference_sigma2(choice: str, boot: BootstrapDistribution | None, data: ClusteredDataset,
                     fit: FitResult, target: MixedEffectTarget, likelihood: str = "reml"):
    """sigma_hat_j^2 for ``choice`` on the original sample, and a floor count.

    SPA and BC values below g1(delta_hat) are replaced by g1(delta_hat); the
    second return value counts the replaced clusters.
    """
    design = design_of(data)
    se2, su2 = fit.delta_hat.as_tuple()
    if choice == "g1":
        return g1_design(design, target, se2, su2), 0
    if choice == "mse_l":
        info = fisher_information_reml(data, fit.delta_hat, likelihood)
        g12 = g1_design(design, target, se2, su2) + g2_design(design, target, se2, su2, fit.gls_information)
        g3v = np.zeros(data.m) if info.singular else g3_design(design, target, se2, su2, info.v_a)
        return g12 + 2.0 * g3v, 0
    if boot is None:
        raise ValueError(f"sigma choice {choice!r} needs bootstrap replicates")
    if choice == "mse_b1":
        return mse_b1(boot), 0
    if choice == "mse_3t":
        return mse_3t(boot), 0
    if choice == "mse_spa":
        value = mse_spa(boot, data, fit, target)
    elif choice == "mse_bc":
        value = mse_bc(boot, boot.inner)
    else:
        raise ValueError(f"unknown sigma choice {choice!r}")
    base = g1_design(design, target, se2, su2)
    low = ~(value >= base)
    return np.where(low, base, value), int(low.sum())


def studentize(boot: BootstrapDistribution, choice: str, data: ClusteredDataset, fit: FitResult,
               target: MixedEffectTarget, studentize_at: str = "delta_star",
               likelihood: str = "reml", sigma2_hat: np.ndarray | None = None) -> Studentized:
    """t*_j = (theta_hat*_j - theta*_j) / sigma*_j and M* = max_j |t*_j|.

    For analytic choices sigma*_j is recomputed at each replicate's delta_hat*
    (or kept at sigma_hat_j when ``studentize_at="delta_hat"``); bootstrap MSE
    choices use sigma_hat_j itself.
    """
    if sigma2_hat is None:
        sigma2_hat, floored = reference_sigma2(choice, boot, data, fit, target, likelihood)
    else:
        floored = 0
    sigma_hat = np.sqrt(sigma2_hat)
    if choice in ANALYTIC_CHOICES and studentize_at == "delta_star":
        if choice == "g1":
            s2 = boot.g1_star
        else:
            if boot.mse_l_star is None:
                raise ValueError("replicates were run without mse_l; rerun with sigma_choice='mse_l'")
            s2 = boot.mse_l_star
        sigma_star = np.sqrt(s2)
    else:
        sigma_star = np.broadcast_to(sigma_hat, boot.theta_star.shape)
    t = (boot.theta_hat_star - boot.theta_star) / sigma_star
    return Studentized(choice, sigma_hat, np.ascontiguousarray(sigma_star), t, np.abs(t).max(axis=1), floored)


# -- drivers ------------------------------------------------------------------------

def _assemble(records, config: BootstrapConfig, m: int, p: int, double: bool):
    ok = [r for r in records if r is not None]
    n_failed = len(records) - len(ok)
    if n_failed > config.failure_budget * len(records):
        raise BootstrapFailure(f"{n_failed} of {len(records)} bootstrap replicates failed "
                               f"(budget {config.failure_budget:.0%})")
    if not ok:
        raise BootstrapFailure("no bootstrap replicate succeeded")

    def stack(i, shape):
        return np.array([r[i] for r in ok]).reshape(len(ok), *shape)

    arrays = dict(
        n_redrawn=int(sum(r[0] for r in ok)),
        delta_star=stack(1, (2,)),
        beta_star=stack(2, (p,)),
        theta_star=stack(3, (m,)),
        theta_tilde_star=stack(4, (m,)),
        theta_hat_star=stack(5, (m,)),
        g1_star=stack(6, (m,)),
        g12_star=stack(7, (m,)),
        mse_l_star=stack(8, (m,)) if ok[0][8] is not None else None,
        n_failed=n_failed,
    )
    inner = None
    if double:
        inner = InnerReplicates(theta_2=np.array([r[9][0] for r in ok]),
                                theta_hat_2=np.array([r[9][1] for r in ok]),
                                n_failed=int(sum(r[9][2] for r in ok)))
    return arrays, inner


def _run(data, fit, target, config: BootstrapConfig, reml_config, double: bool,
         record_mse_l: bool = False) -> BootstrapDistribution:
    target.check(data)
    reml_config = reml_config or RemlConfig(likelihood=fit.likelihood)
    need_mse_l = record_mse_l or (config.sigma_choice == "mse_l" and config.studentize_at == "delta_star")
    engine = _Engine(data, fit, target, config, reml_config, double, need_mse_l)
    records = _run_replicates(engine, config.b_outer, config.workers)
    arrays, inner = _assemble(records, config, data.m, data.p, double)
    placeholder = np.zeros_like(arrays["theta_star"])
    boot = BootstrapDistribution(
        scheme=config.scheme, alpha=config.alpha, seed=config.seed, sigma_choice=config.sigma_choice,
        sigma_hat=np.zeros(data.m), sigma_star=placeholder, t_star=placeholder,
        m_star=np.zeros(placeholder.shape[0]), inner=inner, **arrays)
    st = studentize(boot, config.sigma_choice, data, fit, target, config.studentize_at, reml_config.likelihood)
    return _with_studentization(boot, st)


def _with_studentization(boot: BootstrapDistribution, st: Studentized) -> BootstrapDistribution:
    values = {f.name: getattr(boot, f.name) for f in fields(boot)}
    values.update(sigma_choice=st.choice, sigma_hat=st.sigma_hat, sigma_star=st.sigma_star,
                  t_star=st.t_star, m_star=st.m_star, floored=st.floored)
    return BootstrapDistribution(**values)


def run_bootstrap(data: ClusteredDataset, fit: FitResult, target: MixedEffectTarget,
                  config: BootstrapConfig | None = None, reml_config: RemlConfig | None = None,
                  double: bool | None = None, record_mse_l: bool = False) -> BootstrapDistribution:
    """Bootstrap distribution of the studentized mixed-effect statistics.

    Each replicate draws a sample and refits the variance components.  It
    records the true and predicted mixed effects (theta_tilde* uses the GLS/BLUP
    at delta_hat) along with g1 and g1 + g2 at delta_hat*.  A replicate whose refit fails is
    redrawn up to ``config.max_attempts`` times, then dropped.

    The double bootstrap runs when ``double`` is true, or by default when
    ``sigma_choice="mse_bc"``.  ``record_mse_l`` stores mse_l at every
    delta_hat* so that :func:`studentize` can use it later.

    Raises
    ------
    BootstrapFailure
        If more than ``config.failure_budget`` of the replicates fail.
    """
    config = config or BootstrapConfig()
    if double is None:
        double = config.sigma_choice == "mse_bc"
    return _run(data, fit, target, config, reml_config, double, record_mse_l)


def run_double_bootstrap(data: ClusteredDataset, fit: FitResult, target: MixedEffectTarget,
                         config: BootstrapConfig | None = None,
                         reml_config: RemlConfig | None = None) -> tuple[BootstrapDistribution, InnerReplicates]:
    """Outer distribution plus ``c_inner`` second-level samples per outer replicate.

    Inner samples use the same scheme as the outer ones, built from the
    outer replicate's own fit.
    """
    config = config or BootstrapConfig()
    boot = _run(data, fit, target, config, reml_config, double=True)
    return boot, boot.inner


# -- replicate dump ---------------------------------------------------------------

_ARRAY_FIELDS = ("delta_star", "beta_star", "theta_star", "theta_tilde_star", "theta_hat_star",
                 "g1_star", "g12_star", "mse_l_star", "sigma_hat", "sigma_star", "t_star", "m_star")


def save_distribution(path, boot: BootstrapDistribution) -> None:
    """Write ``boot`` as a versioned ``.npz`` archive."""
    header = dict(version=DUMP_VERSION, B=boot.B, m=boot.m, alpha=boot.alpha, scheme=boot.scheme,
                  seed=str(boot.seed), sigma_choice=boot.sigma_choice, n_failed=boot.n_failed,
                  n_redrawn=boot.n_redrawn, floored=boot.floored,
                  inner_failed=None if boot.inner is None else boot.inner.n_failed)
    arrays = {name: getattr(boot, name) for name in _ARRAY_FIELDS if getattr(boot, name) is not None}
    if boot.inner is not None:
        arrays["inner_theta_2"] = boot.inner.theta_2
        arrays["inner_theta_hat_2"] = boot.inner.theta_hat_2
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_distribution(path) -> BootstrapDistribution:
    """Read an archive written by :func:`save_distribution`."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != DUMP_VERSION:
            raise ValueError(f"unsupported dump version {header.get('version')!r}")
        arrays = {name: (z[name].copy() if name in z.files else None) for name in _ARRAY_FIELDS}
        inner = None
        if "inner_theta_2" in z.files:
            inner = InnerReplicates(z["inner_theta_2"].copy(), z["inner_theta_hat_2"].copy(),
                                    int(header["inner_failed"]))
    return BootstrapDistribution(
        scheme=header["scheme"], alpha=header["alpha"], seed=int(header["seed"]),
        sigma_choice=header["sigma_choice"], n_failed=header["n_failed"], n_redrawn=header["n_redrawn"],
        floored=header["floored"], inner=inner, **arrays)
