"""Pure-Python kernels, used when the compiled extension is unavailable.

Signatures and semantics mirror ``_core.pyx`` exactly; the Nelder-Mead
loop here is also what the general multi-column random-effect path uses.
"""
import math

import numpy as np

_INVPHI = 0.6180339887498949


def neg_loglik(se2, su2, s, cnt, sxx, sxy, syy, xtx, xty, yty, n_obs, reml):
    """Negative (restricted) log-likelihood without the 2*pi constant."""
    w = su2 / (se2 + su2 * s)
    m = cnt.sum()
    A = (xtx - np.tensordot(w, sxx, axes=1)) / se2
    b = (xty - w @ sxy) / se2
    c = (yty - w @ syy) / se2
    logdet = (n_obs - m) * math.log(se2) + float(cnt @ np.log(se2 + su2 * s))
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return math.inf
    v = np.linalg.solve(L, b)
    quad = float(v @ v)
    if reml:
        logdet += 2.0 * float(np.log(np.diag(L)).sum())
    return 0.5 * (logdet + c - quad)


def nelder_mead(fun, x0, step, xtol, ftol, maxiter):
    """Nelder-Mead simplex search (standard coefficients 1, 2, 1/2, 1/2).

    Returns ``(x, f, iterations, converged)``.
    """
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    sim = np.empty((d + 1, d))
    sim[0] = x0
    for k in range(d):
        sim[k + 1] = x0
        sim[k + 1, k] += step
    fs = np.array([fun(x) for x in sim])
    order = np.argsort(fs, kind="stable")
    sim, fs = sim[order], fs[order]
    it = 0
    converged = False
    while it < maxiter:
        if (np.max(np.abs(sim[1:] - sim[0])) <= xtol
                and np.max(np.abs(fs[1:] - fs[0])) <= ftol):
            converged = True
            break
        it += 1
        xbar = sim[:-1].mean(axis=0)
        xr = 2.0 * xbar - sim[-1]
        fr = fun(xr)
        shrink = False
        if fr < fs[0]:
            xe = 3.0 * xbar - 2.0 * sim[-1]
            fe = fun(xe)
            if fe < fr:
                sim[-1], fs[-1] = xe, fe
            else:
                sim[-1], fs[-1] = xr, fr
        elif fr < fs[-2]:
            sim[-1], fs[-1] = xr, fr
        else:
            if fr < fs[-1]:
                xc = 1.5 * xbar - 0.5 * sim[-1]
                fc = fun(xc)
                if fc <= fr:
                    sim[-1], fs[-1] = xc, fc
                else:
                    shrink = True
            else:
                xc = 0.5 * xbar + 0.5 * sim[-1]
                fc = fun(xc)
                if fc < fs[-1]:
                    sim[-1], fs[-1] = xc, fc
                else:
                    shrink = True
            if shrink:
                for k in range(1, d + 1):
                    sim[k] = sim[0] + 0.5 * (sim[k] - sim[0])
                    fs[k] = fun(sim[k])
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]
    return sim[0].copy(), float(fs[0]), it, converged


def _profile_scale(ratio, df, s, sxx, sxy, syy, xtx, xty, yty):
    w = ratio / (1.0 + ratio * s)
    A = xtx - np.tensordot(w, sxx, axes=1)
    b = xty - w @ sxy
    c = yty - w @ syy
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return -1.0
    v = np.linalg.solve(L, b)
    return (c - float(v @ v)) / df


def golden_section(fun, lo, hi, xtol, maxiter):
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = fun(c), fun(d)
    it = 0
    converged = False
    while it < maxiter:
        if abs(b - a) <= xtol:
            converged = True
            break
        it += 1
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = fun(d)
    if fc < fd:
        return c, fc, it, converged
    return d, fd, it, converged


def reml_optimize(starts, log_floor_e, log_floor_u, s, cnt, sxx, sxy, syy,
                  xtx, xty, yty, n_obs, reml, xtol, ftol, maxiter, step,
                  method="nelder_mead_log_scale"):
    """Minimise the negative log-likelihood over (log se2, log su2).

    Returns ``(log_se2, log_su2, fmin, iterations, converged)`` for the best
    start.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    args = (s, cnt, sxx, sxy, syy, xtx, xty, yty, n_obs, reml)

    if method == "golden_section_on_ratio":
        p = xtx.shape[0]
        df = n_obs - (p if reml else 0)

        def profiled(lr):
            ratio = math.exp(lr)
            se2 = _profile_scale(ratio, df, s, sxx, sxy, syy, xtx, xty, yty)
            if se2 <= 0.0:
                return math.inf
            return neg_loglik(se2, ratio * se2, *args)

        centre = starts[0, 1] - starts[0, 0]
        lr, f, it, conv = golden_section(profiled, centre - 30.0, centre + 30.0, xtol, maxiter)
        se2 = _profile_scale(math.exp(lr), df, s, sxx, sxy, syy, xtx, xty, yty)
        return math.log(se2), math.log(se2) + lr, f, it, conv

    def fun(x):
        le = max(x[0], log_floor_e)
        lu = max(x[1], log_floor_u)
        return neg_loglik(math.exp(le), math.exp(lu), *args)

    best = None
    total = 0
    for x0 in starts:
        x, f, it, conv = nelder_mead(fun, x0, step, xtol, ftol, maxiter)
        total += it
        if best is None or conv > best[3] or (conv == best[3] and f < best[2]):
            best = (x[0], x[1], f, conv)
    return best[0], best[1], best[2], total, bool(best[3])


def gls_solve(se2, su2, s, sx, sy, xtx, xty):
    """Solve the GLS system at (se2, su2); returns (beta, u, X'V^{-1}X)."""
    w = su2 / (se2 + su2 * s)
    info = (xtx - (sx * w[:, None]).T @ sx) / se2
    rhs = (xty - (w * sy) @ sx) / se2
    try:
        L = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("GLS information matrix is not positive definite") from None
    beta = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    u = w * (sy - sx @ beta)
    return beta, u, info


def response_stats(cluster, group, z, X, y, sx, n_groups):
    """Response-dependent sufficient statistics.

    Returns ``(sy, xty, yty, sxy_g, syy_g)``.
    """
    m = sx.shape[0]
    sy = np.bincount(cluster, weights=z * y, minlength=m)
    xty = X.T @ y
    yty = float(y @ y)
    sxy = np.zeros((n_groups, X.shape[1]))
    np.add.at(sxy, group, sx * sy[:, None])
    syy = np.bincount(group, weights=sy * sy, minlength=n_groups)
    return sy, xty, yty, sxy, syy
