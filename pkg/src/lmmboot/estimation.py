"""GLS/BLUP estimation and REML (or ML) fitting of the variance components.

All per-cluster algebra goes through the Woodbury form
``sigma_e2 V_j^{-1} = I - Z_j W_j Z_j'`` with
``W_j = sigma_u2 (sigma_e2 I + sigma_u2 Z_j'Z_j)^{-1}``, so only q_j x q_j
systems are ever solved.  Datasets whose random part is a single column per
cluster run on the compiled kernels (see ``_backend``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _backend
from ._core_py import golden_section, nelder_mead
from .model import (
    ClusteredDataset,
    ConvergenceError,
    FitResult,
    MixedEffectTarget,
    RankDeficiencyError,
    VarianceParams,
    check_fit_ready,
)

OPTIMIZERS = ("nelder_mead_log_scale", "golden_section_on_ratio")
LIKELIHOODS = ("reml", "ml")


@dataclass(frozen=True)
class RemlConfig:
    """Settings for variance-component estimation.

    ``sigma_u2_floor=None`` means ``1e-10`` times the sample variance of y;
    the same floor keeps ``sigma_e2`` away from zero.
    """

    max_iterations: int = 200
    rel_tolerance: float = 1e-9
    sigma_u2_floor: float | None = None
    optimizer: str = "nelder_mead_log_scale"
    likelihood: str = "reml"
    f_tolerance: float = 1e-10
    initial_step: float = 0.25

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.rel_tolerance > 0 or not self.f_tolerance > 0:
            raise ValueError("tolerances must be positive")
        if self.sigma_u2_floor is not None and self.sigma_u2_floor < 0:
            raise ValueError("sigma_u2_floor must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}")


class _SingleResponse(NamedTuple):
    sy: np.ndarray
    xty: np.ndarray
    yty: float
    sxy_g: np.ndarray
    syy_g: np.ndarray


class _GeneralResponse(NamedTuple):
    zty: np.ndarray  # flat, length sum(q_j)
    xty: np.ndarray
    yty: float


class Design:
    """Response-independent sufficient statistics of a dataset.

    Built once per dataset and reused for every bootstrap response.
    """

    def __init__(self, data: ClusteredDataset):
        self.m = data.m
        self.p = data.p
        self.n_obs = float(data.n)
        self.single = data.single_column
        self.X = np.ascontiguousarray(data.X)
        self.cluster = np.ascontiguousarray(data.cluster_index)
        self.xtx = np.ascontiguousarray(self.X.T @ self.X)
        self.q_j = np.asarray(data.q_j)
        self.u_offsets = np.concatenate([[0], np.cumsum(self.q_j)]).astype(np.int64)
        if self.single:
            z = np.concatenate([c.Z[:, 0] for c in data.clusters])
            self.z = np.ascontiguousarray(z)
            self.s = np.bincount(self.cluster, weights=z * z, minlength=self.m)
            sx = np.zeros((self.m, self.p))
            np.add.at(sx, self.cluster, z[:, None] * self.X)
            self.sx = np.ascontiguousarray(sx)
            s_g, group = np.unique(self.s, return_inverse=True)
            self.group = np.ascontiguousarray(group.astype(np.int64))
            self.s_g = np.ascontiguousarray(s_g)
            self.cnt_g = np.bincount(self.group, minlength=s_g.size).astype(float)
            sxx = np.zeros((s_g.size, self.p, self.p))
            np.add.at(sxx, self.group, sx[:, :, None] * sx[:, None, :])
            self.sxx_g = np.ascontiguousarray(sxx)
        # q-groups: clusters sharing q, with stacked Z'Z and Z'X
        self.qgroups = []
        for q in np.unique(self.q_j):
            idx = np.flatnonzero(self.q_j == q)
            ztz = np.stack([data.clusters[j].Z.T @ data.clusters[j].Z for j in idx])
            ztx = np.stack([data.clusters[j].Z.T @ data.clusters[j].X for j in idx])
            uidx = np.concatenate([np.arange(self.u_offsets[j], self.u_offsets[j + 1]) for j in idx])
            self.qgroups.append((idx, int(q), ztz, ztx, uidx.reshape(idx.size, int(q))))
        self._Zs = [c.Z for c in data.clusters]
        self.offsets = np.asarray(data.offsets)

    # -- response statistics -------------------------------------------------
    def response(self, y):
        y = np.ascontiguousarray(y, dtype=np.float64)
        if self.single:
            return _SingleResponse(*_backend.kernels.response_stats(
                self.cluster, self.group, self.z, self.X, y, self.sx, self.s_g.size))
        off = self.offsets
        zty = np.concatenate([Z.T @ y[off[j]:off[j + 1]] for j, Z in enumerate(self._Zs)])
        return _GeneralResponse(zty, self.X.T @ y, float(y @ y))

    # -- Woodbury pieces ------------------------------------------------------
    def weights(self, se2, su2):
        """Per-q-group stacks of W_j = su2 (se2 I + su2 Z_j'Z_j)^{-1}."""
        out = []
        for idx, q, ztz, ztx, uidx in self.qgroups:
            M = se2 * np.eye(q) + su2 * ztz
            out.append(su2 * np.linalg.inv(M))
        return out

    def _pieces(self, resp, se2, su2):
        """(X'V^-1X, X'V^-1y, y'V^-1y, log|V|) for the general path."""
        A = self.xtx.copy()
        b = resp.xty.copy()
        c = resp.yty
        logdet = (self.n_obs - float(self.q_j.sum())) * math.log(se2)
        for (idx, q, ztz, ztx, uidx), W in zip(self.qgroups, self.weights(se2, su2)):
            zty = resp.zty[uidx]
            A -= np.einsum("gqp,gqr,grs->ps", ztx, W, ztx)
            b -= np.einsum("gqp,gqr,gr->p", ztx, W, zty)
            c -= float(np.einsum("gq,gqr,gr->", zty, W, zty))
            logdet += float(np.linalg.slogdet(se2 * np.eye(q) + su2 * ztz)[1].sum())
        return A / se2, b / se2, c / se2, logdet

    def neg_loglik(self, resp, se2, su2, reml=True):
        """Negative log-likelihood without the 2*pi constant."""
        if self.single:
            return _backend.kernels.neg_loglik(
                se2, su2, self.s_g, self.cnt_g, self.sxx_g, resp.sxy_g, resp.syy_g,
                self.xtx, resp.xty, resp.yty, self.n_obs, reml)
        A, b, c, logdet = self._pieces(resp, se2, su2)
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            return math.inf
        v = np.linalg.solve(L, b)
        if reml:
            logdet += 2.0 * float(np.log(np.diag(L)).sum())
        return 0.5 * (logdet + c - float(v @ v))

    def gls(self, resp, se2, su2):
        """(beta, flat u, information X'V^-1X) at the given variance components."""
        if self.single:
            return _backend.kernels.gls_solve(se2, su2, self.s, self.sx, resp.sy, self.xtx, resp.xty)
        A, b, _, _ = self._pieces(resp, se2, su2)
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("GLS information matrix is not positive definite") from None
        beta = np.linalg.solve(L.T, np.linalg.solve(L, b))
        return beta, self.blup(resp, se2, su2, beta), A

    def blup(self, resp, se2, su2, beta):
        """Flat u_j = W_j (Z_j'y_j - Z_j'X_j beta)."""
        if self.single:
            w = su2 / (se2 + su2 * self.s)
            return w * (resp.sy - self.sx @ beta)
        u = np.empty(int(self.u_offsets[-1]))
        for (idx, q, ztz, ztx, uidx), W in zip(self.qgroups, self.weights(se2, su2)):
            r = resp.zty[uidx] - ztx @ beta
            u[uidx] = np.einsum("gqr,gr->gq", W, r)
        return u

    def moment_start(self, resp):
        """ANOVA-type moment estimates used as an optimiser start."""
        try:
            b = np.linalg.solve(self.xtx, resp.xty)
        except np.linalg.LinAlgError:
            b = np.linalg.lstsq(self.xtx, resp.xty, rcond=None)[0]
        rss = max(resp.yty - 2.0 * b @ resp.xty + b @ self.xtx @ b, 0.0)
        if self.single:
            zr = resp.sy - self.sx @ b
            between = float(np.sum(zr * zr / self.s))
            trace_s = float(self.s.sum())
        else:
            between = 0.0
            trace_s = 0.0
            for idx, q, ztz, ztx, uidx in self.qgroups:
                zr = resp.zty[uidx] - ztx @ b
                between += float(np.einsum("gq,gq->", zr, np.linalg.solve(ztz, zr[:, :, None])[:, :, 0]))
                trace_s += float(np.trace(ztz, axis1=1, axis2=2).sum())
        qsum = float(self.q_j.sum())
        df_within = max(self.n_obs - qsum - self.p, 1.0)
        se2 = max(rss - between, 0.0) / df_within
        su2 = (between - qsum * se2) / trace_s
        total = rss / max(self.n_obs - self.p, 1.0)
        if not se2 > 0:
            se2 = max(total, 1e-12)
        if not su2 > 0:
            su2 = 1e-3 * se2
        return se2, su2

    def optimize(self, resp, starts, log_floor_e, log_floor_u, config: RemlConfig):
        reml = config.likelihood == "reml"
        if self.single:
            return _backend.kernels.reml_optimize(
                np.log(np.asarray(starts, dtype=float)), log_floor_e, log_floor_u,
                self.s_g, self.cnt_g, self.sxx_g, resp.sxy_g, resp.syy_g,
                self.xtx, resp.xty, resp.yty, self.n_obs, reml,
                config.rel_tolerance, config.f_tolerance, config.max_iterations,
                config.initial_step, config.optimizer)
        logs = np.log(np.asarray(starts, dtype=float))
        if config.optimizer == "golden_section_on_ratio":
            df = self.n_obs - (self.p if reml else 0)

            def profile_scale(lr):
                A, b, c, _ = self._pieces(resp, 1.0, math.exp(lr))
                try:
                    return (c - float(b @ np.linalg.solve(A, b))) / df
                except np.linalg.LinAlgError:
                    return -1.0

            def profiled(lr):
                se2 = profile_scale(lr)
                if se2 <= 0:
                    return math.inf
                return self.neg_loglik(resp, se2, se2 * math.exp(lr), reml)

            centre = logs[0, 1] - logs[0, 0]
            lr, f, it, conv = golden_section(profiled, centre - 30.0, centre + 30.0,
                                             config.rel_tolerance, config.max_iterations)
            se2 = profile_scale(lr)
            return math.log(se2), math.log(se2) + lr, f, it, conv

        def fun(x):
            le = max(x[0], log_floor_e)
            lu = max(x[1], log_floor_u)
            return self.neg_loglik(resp, math.exp(le), math.exp(lu), reml)

        best = None
        total = 0
        for x0 in logs:
            x, f, it, conv = nelder_mead(fun, x0, config.initial_step, config.rel_tolerance,
                                         config.f_tolerance, config.max_iterations)
            total += it
            if best is None or conv > best[3] or (conv == best[3] and f < best[2]):
                best = (x[0], x[1], f, conv)
        return best[0], best[1], best[2], total, best[3]


def design_of(data: ClusteredDataset) -> Design:
    """Cached :class:`Design` of ``data``."""
    d = data.__dict__.get("_lmm_design")
    if d is None:
        d = Design(data)
        object.__setattr__(data, "_lmm_design", d)
    return d


class RawFit(NamedTuple):
    """Lightweight fit used inside bootstrap loops."""

    se2: float
    su2: float
    beta: np.ndarray
    u: np.ndarray  # flat
    info: np.ndarray
    neg_loglik: float
    iterations: int
    boundary: bool


def floors(y_var: float, config: RemlConfig) -> tuple[float, float]:
    """Lower bounds (sigma_e2, sigma_u2) used by the optimiser."""
    scale = y_var if y_var > 0 else 1.0
    floor_u = 1e-10 * scale if config.sigma_u2_floor is None else config.sigma_u2_floor
    floor_e = 1e-10 * scale
    return floor_e, floor_u


def fit_response(design: Design, resp, config: RemlConfig, floor_e: float, floor_u: float,
                 y_var: float) -> RawFit:
    """Fit variance components for one response; raises ConvergenceError."""
    se0, su0 = design.moment_start(resp)
    scale = y_var if y_var > 0 else max(se0, 1e-12)
    starts = [(max(se0, floor_e), max(su0, floor_u, 1e-300)),
              (max(scale, floor_e), max(scale / 2.0, floor_u, 1e-300))]
    log_floor_u = math.log(floor_u) if floor_u > 0 else -math.inf
    le, lu, f, iters, conv = design.optimize(resp, starts, math.log(floor_e), log_floor_u, config)
    le = max(le, math.log(floor_e))
    se2 = math.exp(le)
    su2 = math.exp(lu)
    boundary = su2 <= floor_u * (1.0 + 1e-9)
    if boundary:
        su2 = floor_u
    if not conv or not math.isfinite(f):
        raise ConvergenceError(
            f"variance-component optimisation did not converge in {config.max_iterations} iterations",
            last_iterate=(se2, su2))
    beta, u, info = design.gls(resp, se2, su2)
    return RawFit(se2, su2, beta, u, info, f, iters, boundary)


def _y_var(y) -> float:
    return float(np.var(y, ddof=1)) if len(y) > 1 else 0.0


def _split(u_flat, offsets):
    return tuple(u_flat[offsets[j]:offsets[j + 1]].copy() for j in range(len(offsets) - 1))


def loglik_constant(n: float, p: int, likelihood: str) -> float:
    df = n - p if likelihood == "reml" else n
    return -0.5 * df * math.log(2.0 * math.pi)


def reml_fit(data: ClusteredDataset, config: RemlConfig | None = None) -> FitResult:
    """Fit the two-component model by REML (default) or ML.

    Raises
    ------
    DataValidationError, RankDeficiencyError
        If ``data`` fails validation (including m < 2).
    ConvergenceError
        If no optimiser start converges within ``config.max_iterations``.
    """
    config = config or RemlConfig()
    check_fit_ready(data)
    design = design_of(data)
    y_var = _y_var(data.y)
    floor_e, floor_u = floors(y_var, config)
    resp = design.response(data.y)
    raw = fit_response(design, resp, config, floor_e, floor_u, y_var)
    return to_fit_result(raw, design, config)


def to_fit_result(raw: RawFit, design: Design, config: RemlConfig) -> FitResult:
    loglik = -raw.neg_loglik + loglik_constant(design.n_obs, design.p, config.likelihood)
    return FitResult(
        beta_hat=raw.beta,
        delta_hat=VarianceParams(raw.se2, raw.su2),
        u_hat=_split(raw.u, design.u_offsets),
        gls_information=raw.info,
        reml_loglik=loglik,
        boundary_flag=bool(raw.boundary),
        iterations=int(raw.iterations),
        likelihood=config.likelihood,
    )


def reml_objective(data: ClusteredDataset, delta: VarianceParams, likelihood: str = "reml") -> float:
    """Log-likelihood (REML by default) at ``delta``, constants included."""
    design = design_of(data)
    resp = design.response(data.y)
    f = design.neg_loglik(resp, delta.sigma_e2, delta.sigma_u2, likelihood == "reml")
    return -f + loglik_constant(design.n_obs, design.p, likelihood)


def gls_beta(data: ClusteredDataset, delta: VarianceParams) -> tuple[np.ndarray, np.ndarray]:
    """GLS estimate of beta and the information matrix sum_j X_j'V_j^{-1}X_j.

    >>> from lmmboot.model import build_random_intercept
    >>> d = build_random_intercept([("a", 2.0, []), ("a", 4.0, []), ("b", 3.0, [])])
    >>> round(float(gls_beta(d, VarianceParams(1.0, 0.0))[0][0]), 12)
    3.0
    """
    design = design_of(data)
    resp = design.response(data.y)
    try:
        beta, _, info = design.gls(resp, delta.sigma_e2, delta.sigma_u2)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(str(exc)) from None
    return beta, info


def blup_u(data: ClusteredDataset, delta: VarianceParams, beta) -> tuple[np.ndarray, ...]:
    """BLUPs u_j = G_j Z_j' V_j^{-1} (y_j - X_j beta) for every cluster."""
    design = design_of(data)
    resp = design.response(data.y)
    u = design.blup(resp, delta.sigma_e2, delta.sigma_u2, np.asarray(beta, dtype=float))
    return _split(u, design.u_offsets)


def theta_from(target: MixedEffectTarget, beta, u_flat, u_offsets=None) -> np.ndarray:
    """k_j' beta + l_j' u_j from a flat random-effect vector."""
    lu = target.l_flat * u_flat
    if u_offsets is None or len(lu) == target.m:
        return target.k @ beta + lu
    return target.k @ beta + np.add.reduceat(lu, u_offsets[:-1])


def predict_theta(fit: FitResult, target: MixedEffectTarget) -> np.ndarray:
    """Mixed-effect predictions theta_j = k_j' beta_hat + l_j' u_hat_j."""
    if target.k.shape != (fit.m, fit.beta_hat.size):
        raise ValueError(f"target k has shape {target.k.shape}, fit expects {(fit.m, fit.beta_hat.size)}")
    for j, (l, u) in enumerate(zip(target.l, fit.u_hat)):
        if l.shape != u.shape:
            raise ValueError(f"l_{j} has length {l.size}, u_hat_{j} has {u.size}")
    return np.array([k @ fit.beta_hat + l @ u for k, l, u in zip(target.k, target.l, fit.u_hat)])


def conditional_residuals(data: ClusteredDataset, fit: FitResult) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
    """Stacked e_hat = y - X beta_hat - Z u_hat, and the per-cluster u_hat."""
    parts = [c.y - c.X @ fit.beta_hat - c.Z @ u for c, u in zip(data.clusters, fit.u_hat)]
    return np.concatenate(parts), fit.u_hat
