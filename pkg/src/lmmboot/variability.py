"""Estimators of the variability sigma_j^2 of the mixed-effect predictor.

Analytic pieces ``g1``, ``g2``, ``g3`` and ``mse_l = g1 + g2 + 2 g3`` work
on q_j x q_j blocks: with ``Kt_j = (sigma_e2 I + sigma_u2 Z_j'Z_j)^{-1}``,

* g1_j = sigma_e2 sigma_u2 l_j' Kt_j l_j
* b_j = k_j - sigma_u2 (Z_j'X_j)' Kt_j l_j,   g2_j = b_j' (X'V^{-1}X)^{-1} b_j
* d o_j / d sigma_e2 = -sigma_u2 Z_j Kt_j^2 l_j,  d o_j / d sigma_u2 = sigma_e2 Z_j Kt_j^2 l_j

The bootstrap estimators take any object exposing the replicate arrays of
:class:`lmmboot.bootstrap.BootstrapDistribution`.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .estimation import Design, design_of
from .model import ClusteredDataset, MixedEffectTarget, RankDeficiencyError, VarianceParams

SIGMA_CHOICES = ("g1", "mse_l", "mse_b1", "mse_3t", "mse_spa", "mse_bc")
ANALYTIC_CHOICES = ("g1", "mse_l")
BOOTSTRAP_CHOICES = ("mse_b1", "mse_3t", "mse_spa", "mse_bc")
FISHER_COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class FisherInformation:
    """2x2 information over (sigma_e2, sigma_u2) and its inverse ``v_a``.

    ``singular`` marks an information matrix that could not be inverted
    reliably; ``v_a`` is then all zeros.
    """

    matrix: np.ndarray
    v_a: np.ndarray
    singular: bool = False


@dataclass(frozen=True, eq=False)
class MseComponents:
    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    g3_flag: bool = False

    @property
    def mse_l(self) -> np.ndarray:
        return self.g1 + self.g2 + 2.0 * self.g3


def _group_targets(design: Design, target: MixedEffectTarget):
    for idx, q, ztz, ztx, uidx in design.qgroups:
        yield idx, q, ztz, ztx, target.l_flat[uidx]


def _kt(q, ztz, se2, su2):
    return np.linalg.inv(se2 * np.eye(q) + su2 * ztz)


def g1_design(design: Design, target: MixedEffectTarget, se2: float, su2: float) -> np.ndarray:
    if design.single:
        l = target.l_flat
        return se2 * su2 * l * l / (se2 + su2 * design.s)
    out = np.empty(design.m)
    for idx, q, ztz, ztx, l in _group_targets(design, target):
        Kt = _kt(q, ztz, se2, su2)
        out[idx] = se2 * su2 * np.einsum("gq,gqr,gr->g", l, Kt, l)
    return out


def _b_vectors(design: Design, target: MixedEffectTarget, se2: float, su2: float) -> np.ndarray:
    if design.single:
        w = su2 / (se2 + su2 * design.s)
        return target.k - (w * target.l_flat)[:, None] * design.sx
    b = np.array(target.k, dtype=float, copy=True)
    for idx, q, ztz, ztx, l in _group_targets(design, target):
        Kt = _kt(q, ztz, se2, su2)
        b[idx] -= su2 * np.einsum("gqp,gqr,gr->gp", ztx, Kt, l)
    return b


def g2_design(design: Design, target: MixedEffectTarget, se2: float, su2: float,
              info: np.ndarray) -> np.ndarray:
    b = _b_vectors(design, target, se2, su2)
    try:
        sol = np.linalg.solve(info, b.T)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError("GLS information matrix is singular") from None
    return np.einsum("jp,pj->j", b, sol)


def _information(design: Design, se2: float, su2: float) -> np.ndarray:
    A = design.xtx.copy()
    for (idx, q, ztz, ztx, uidx) in design.qgroups:
        W = su2 * _kt(q, ztz, se2, su2)
        A -= np.einsum("gqp,gqr,grs->ps", ztx, W, ztx)
    return A / se2


def g3_design(design: Design, target: MixedEffectTarget, se2: float, su2: float,
              v_a: np.ndarray) -> np.ndarray:
    coef = su2 * su2 * v_a[0, 0] - 2.0 * su2 * se2 * v_a[0, 1] + se2 * se2 * v_a[1, 1]
    out = np.empty(design.m)
    for idx, q, ztz, ztx, l in _group_targets(design, target):
        Kt = _kt(q, ztz, se2, su2)
        a = np.einsum("gqr,grs,gs->gq", Kt, Kt, l)
        zvz = se2 * ztz + su2 * np.einsum("gqr,grs->gqs", ztz, ztz)
        out[idx] = np.einsum("gq,gqr,gr->g", a, zvz, a) * coef
    return out


def g1(data: ClusteredDataset, delta: VarianceParams, target: MixedEffectTarget) -> np.ndarray:
    """Variability of theta_j for known beta and delta: l_j'(G_j - G_j Z_j'V_j^{-1}Z_j G_j) l_j."""
    target.check(data)
    return g1_design(design_of(data), target, delta.sigma_e2, delta.sigma_u2)


def g2(data: ClusteredDataset, delta: VarianceParams, target: MixedEffectTarget) -> np.ndarray:
    """Contribution of estimating beta: b_j'(sum X_j'V_j^{-1}X_j)^{-1} b_j."""
    target.check(data)
    design = design_of(data)
    info = _information(design, delta.sigma_e2, delta.sigma_u2)
    return g2_design(design, target, delta.sigma_e2, delta.sigma_u2, info)


def g3(data: ClusteredDataset, delta: VarianceParams, target: MixedEffectTarget,
       info: FisherInformation) -> np.ndarray:
    """Contribution of estimating delta: tr{(do_j/d delta) V_j (do_j/d delta)' V_A}.

    Returns zeros when ``info`` is flagged singular.
    """
    target.check(data)
    if info.singular:
        return np.zeros(data.m)
    return g3_design(design_of(data), target, delta.sigma_e2, delta.sigma_u2, info.v_a)


def o_vectors(data: ClusteredDataset, delta: VarianceParams, target: MixedEffectTarget):
    """Per-cluster o_j = V_j^{-1} Z_j G_j l_j (length n_j)."""
    se2, su2 = delta.as_tuple()
    out = []
    for c, l in zip(data.clusters, target.l):
        Kt = np.linalg.inv(se2 * np.eye(c.q) + su2 * c.Z.T @ c.Z)
        out.append(su2 * c.Z @ (Kt @ l))
    return out


def o_derivatives(data: ClusteredDataset, delta: VarianceParams, target: MixedEffectTarget):
    """Analytic (d o_j/d sigma_e2, d o_j/d sigma_u2) for every cluster."""
    se2, su2 = delta.as_tuple()
    out = []
    for c, l in zip(data.clusters, target.l):
        Kt = np.linalg.inv(se2 * np.eye(c.q) + su2 * c.Z.T @ c.Z)
        a = c.Z @ (Kt @ (Kt @ l))
        out.append((-su2 * a, se2 * a))
    return out


def fisher_information_reml(data: ClusteredDataset, delta: VarianceParams,
                            likelihood: str = "reml") -> FisherInformation:
    """Expected information for (sigma_e2, sigma_u2).

    REML: ``I_kl = tr(P D_k P D_l) / 2`` with ``D_e = I``, ``D_u = Z Z'``;
    ML replaces P by V^{-1}.  Clusters are processed in groups of equal
    shape with batched dense n_j x n_j blocks.
    """
    se2, su2 = delta.as_tuple()
    p = data.p
    tr_vv = np.zeros((2, 2))
    # F_k = sum_j B_j' D_k B_j, H_kl = sum_j B_j' D_k V^-1 D_l B_j, with B_j = V_j^-1 X_j
    F = np.zeros((2, p, p))
    Hk = np.zeros((2, 2, p, p))
    A = np.zeros((p, p))
    shapes: dict[tuple[int, int], list[int]] = {}
    for j, c in enumerate(data.clusters):
        shapes.setdefault((c.n, c.q), []).append(j)
    for (nj, q), idx in shapes.items():
        Z = np.stack([data.clusters[j].Z for j in idx])
        X = np.stack([data.clusters[j].X for j in idx])
        Kt = np.linalg.inv(se2 * np.eye(q) + su2 * np.einsum("gnq,gnr->gqr", Z, Z))
        Vi = (np.eye(nj) - su2 * np.einsum("gnq,gqr,gmr->gnm", Z, Kt, Z)) / se2
        ZZ = np.einsum("gnq,gmq->gnm", Z, Z)
        Ds = (np.broadcast_to(np.eye(nj), ZZ.shape), ZZ)
        ViD = [np.einsum("gnk,gkm->gnm", Vi, D) for D in Ds]
        for k in range(2):
            for l in range(2):
                tr_vv[k, l] += np.einsum("gnm,gmn->", ViD[k], ViD[l])
        B = np.einsum("gnm,gmp->gnp", Vi, X)
        A += np.einsum("gnp,gnr->pr", X, B)
        DB = [np.einsum("gnm,gmp->gnp", D, B) for D in Ds]
        for k in range(2):
            F[k] += np.einsum("gnp,gnr->pr", B, DB[k])
            for l in range(2):
                Hk[k, l] += np.einsum("gnp,gnm,gmr->pr", DB[k], Vi, DB[l])
    if likelihood == "reml":
        Ai = np.linalg.inv(A)
        T = np.empty((2, 2))
        for k in range(2):
            for l in range(2):
                T[k, l] = (tr_vv[k, l] - np.trace(Ai @ Hk[k, l]) - np.trace(Ai @ Hk[l, k])
                           + np.trace(Ai @ F[k] @ Ai @ F[l]))
    else:
        T = tr_vv
    info = 0.5 * (T + T.T) / 2.0
    singular = False
    try:
        if np.linalg.cond(info) > FISHER_COND_LIMIT:
            raise np.linalg.LinAlgError("ill-conditioned")
        v_a = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        warnings.warn("Fisher information is singular at delta; g3 set to 0", RuntimeWarning, stacklevel=2)
        v_a = np.zeros((2, 2))
        singular = True
    return FisherInformation(info, v_a, singular)


def mse_components(data: ClusteredDataset, delta: VarianceParams, target: MixedEffectTarget,
                   likelihood: str = "reml") -> MseComponents:
    """g1, g2, g3 and ``mse_l = g1 + g2 + 2 g3`` at ``delta``."""
    info = fisher_information_reml(data, delta, likelihood)
    return MseComponents(g1(data, delta, target), g2(data, delta, target),
                         g3(data, delta, target, info), info.singular)


def mse_l(data: ClusteredDataset, delta: VarianceParams, target: MixedEffectTarget,
          likelihood: str = "reml") -> np.ndarray:
    return mse_components(data, delta, target, likelihood).mse_l


# -- bootstrap estimators -------------------------------------------------------

def mse_b1(boot) -> np.ndarray:
    """Plain bootstrap MSE, mean over replicates of (theta_hat* - theta*)^2."""
    d = boot.theta_hat_star - boot.theta_star
    return np.mean(d * d, axis=0)


def mse_3t(boot, data=None, delta=None) -> np.ndarray:
    """Three-term bootstrap MSE: each term of the MSE decomposition averaged separately."""
    a = boot.theta_tilde_star - boot.theta_star
    c = boot.theta_hat_star - boot.theta_tilde_star
    return np.mean(a * a, axis=0) + np.mean(c * c, axis=0) + 2.0 * np.mean(a * c, axis=0)


def mse_spa(boot, data: ClusteredDataset, fit, target: MixedEffectTarget) -> np.ndarray:
    """Bias-corrected analytic-plus-bootstrap MSE.

    ``2 (g1 + g2)(delta_hat) - E*(g1 + g2)(delta_hat*) + E*(theta_hat* - theta_tilde*)^2
    + 2 E*{(theta_tilde* - theta*)(theta_hat* - theta_tilde*)}``.  May be negative.
    """
    design = design_of(data)
    se2, su2 = fit.delta_hat.as_tuple()
    base = g1_design(design, target, se2, su2) + g2_design(design, target, se2, su2, fit.gls_information)
    g12_star = getattr(boot, "g12_star", None)
    if g12_star is None:
        g12_star = np.array([g1_design(design, target, e, u)
                             + g2_design(design, target, e, u, _information(design, e, u))
                             for e, u in boot.delta_star])
    a = boot.theta_tilde_star - boot.theta_star
    c = boot.theta_hat_star - boot.theta_tilde_star
    return 2.0 * base - g12_star.mean(axis=0) + np.mean(c * c, axis=0) + 2.0 * np.mean(a * c, axis=0)


def mse_b2_inner(inner) -> np.ndarray:
    """Second-level bootstrap MSE averaged over all (outer, inner) pairs."""
    d = np.asarray(inner.theta_hat_2) - np.asarray(inner.theta_2)
    d = d.reshape(-1, d.shape[-1])
    d = d[np.all(np.isfinite(d), axis=1)]  # failed inner draws are NaN rows
    if d.shape[0] == 0:
        raise ValueError("no inner replicates")
    return np.mean(d * d, axis=0)


def mse_bc(outer, inner) -> np.ndarray:
    """Double-bootstrap bias-corrected MSE, 2 MSE*_B1 - MSE**_B2."""
    if inner is None:
        raise ValueError("double-bootstrap inner replicates are missing")
    return 2.0 * mse_b1(outer) - mse_b2_inner(inner)
