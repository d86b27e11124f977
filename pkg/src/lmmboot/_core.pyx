# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the single-column random-effect model.

Every routine works on per-cluster sufficient statistics so that one
likelihood evaluation costs O(G p^2), G being the number of distinct
cluster sizes ``s_j = z_j' z_j``.  ``_core_py`` holds the reference
implementation with identical signatures.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, exp, fabs, sqrt, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef struct Problem:
    int G
    int p
    const double* s
    const double* cnt
    const double* sxx     # G x p x p
    const double* sxy     # G x p
    const double* syy     # G
    const double* xtx     # p x p
    const double* xty     # p
    double yty
    double n_obs
    double m
    bint reml
    double log_floor_e
    double log_floor_u
    double* A             # p x p work
    double* b             # p work


cdef inline int _cholesky(double* A, int p) nogil:
    """In-place lower Cholesky; returns 0 on success."""
    cdef int i, j, k
    cdef double acc
    for j in range(p):
        acc = A[j * p + j]
        for k in range(j):
            acc -= A[j * p + k] * A[j * p + k]
        if acc <= 0.0:
            return -1
        A[j * p + j] = sqrt(acc)
        for i in range(j + 1, p):
            acc = A[i * p + j]
            for k in range(j):
                acc -= A[i * p + k] * A[j * p + k]
            A[i * p + j] = acc / A[j * p + j]
    return 0


cdef inline void _chol_solve(const double* L, double* x, int p) nogil:
    cdef int i, k
    cdef double acc
    for i in range(p):
        acc = x[i]
        for k in range(i):
            acc -= L[i * p + k] * x[k]
        x[i] = acc / L[i * p + i]
    for i in range(p - 1, -1, -1):
        acc = x[i]
        for k in range(i + 1, p):
            acc -= L[k * p + i] * x[k]
        x[i] = acc / L[i * p + i]


cdef double _objective(Problem* pr, double se2, double su2) nogil:
    cdef int g, i, j, p = pr.p
    cdef double w, c, logdet, quad, acc
    cdef double* A = pr.A
    cdef double* b = pr.b
    for i in range(p * p):
        A[i] = pr.xtx[i]
    for i in range(p):
        b[i] = pr.xty[i]
    c = pr.yty
    logdet = (pr.n_obs - pr.m) * log(se2)
    for g in range(pr.G):
        w = su2 / (se2 + su2 * pr.s[g])
        logdet += pr.cnt[g] * log(se2 + su2 * pr.s[g])
        for i in range(p * p):
            A[i] -= w * pr.sxx[g * p * p + i]
        for i in range(p):
            b[i] -= w * pr.sxy[g * p + i]
        c -= w * pr.syy[g]
    for i in range(p * p):
        A[i] /= se2
    for i in range(p):
        b[i] /= se2
    c /= se2
    # quadratic form y'Py = c - b'A^{-1}b
    if _cholesky(A, p) != 0:
        return INFINITY
    quad = 0.0
    for i in range(p):
        acc = b[i]
        for j in range(i):
            acc -= A[i * p + j] * b[j]
        b[i] = acc / A[i * p + i]
        quad += b[i] * b[i]
    if pr.reml:
        for i in range(p):
            logdet += 2.0 * log(A[i * p + i])
    return 0.5 * (logdet + c - quad)


cdef inline double _eval_log(Problem* pr, double le, double lu) nogil:
    if le < pr.log_floor_e:
        le = pr.log_floor_e
    if lu < pr.log_floor_u:
        lu = pr.log_floor_u
    return _objective(pr, exp(le), exp(lu))


cdef void _sort3(double* xs, double* fs) nogil:
    # insertion sort of 3 simplex vertices by function value
    cdef int i, j
    cdef double tf, t0, t1
    for i in range(1, 3):
        j = i
        while j > 0 and fs[j - 1] > fs[j]:
            tf = fs[j]; fs[j] = fs[j - 1]; fs[j - 1] = tf
            t0 = xs[2 * j]; xs[2 * j] = xs[2 * j - 2]; xs[2 * j - 2] = t0
            t1 = xs[2 * j + 1]; xs[2 * j + 1] = xs[2 * j - 1]; xs[2 * j - 1] = t1
            j -= 1


cdef int _nelder_mead(Problem* pr, double x0, double x1, double step,
                      double xtol, double ftol, int maxiter,
                      double* xout, double* fout, int* iters) nogil:
    cdef double xs[6]
    cdef double fs[3]
    cdef double xb0, xb1, xr0, xr1, fr, xe0, xe1, fe, xc0, xc1, fc
    cdef int it = 0, k, shrink, converged = 0
    cdef double dx, df
    xs[0] = x0; xs[1] = x1
    xs[2] = x0 + step; xs[3] = x1
    xs[4] = x0; xs[5] = x1 + step
    for k in range(3):
        fs[k] = _eval_log(pr, xs[2 * k], xs[2 * k + 1])
    _sort3(xs, fs)
    while it < maxiter:
        dx = 0.0
        df = 0.0
        for k in range(1, 3):
            dx = max(dx, fabs(xs[2 * k] - xs[0]))
            dx = max(dx, fabs(xs[2 * k + 1] - xs[1]))
            df = max(df, fabs(fs[k] - fs[0]))
        if dx <= xtol and df <= ftol:
            converged = 1
            break
        it += 1
        xb0 = 0.5 * (xs[0] + xs[2])
        xb1 = 0.5 * (xs[1] + xs[3])
        xr0 = 2.0 * xb0 - xs[4]
        xr1 = 2.0 * xb1 - xs[5]
        fr = _eval_log(pr, xr0, xr1)
        shrink = 0
        if fr < fs[0]:
            xe0 = 3.0 * xb0 - 2.0 * xs[4]
            xe1 = 3.0 * xb1 - 2.0 * xs[5]
            fe = _eval_log(pr, xe0, xe1)
            if fe < fr:
                xs[4] = xe0; xs[5] = xe1; fs[2] = fe
            else:
                xs[4] = xr0; xs[5] = xr1; fs[2] = fr
        elif fr < fs[1]:
            xs[4] = xr0; xs[5] = xr1; fs[2] = fr
        else:
            if fr < fs[2]:
                xc0 = 1.5 * xb0 - 0.5 * xs[4]
                xc1 = 1.5 * xb1 - 0.5 * xs[5]
                fc = _eval_log(pr, xc0, xc1)
                if fc <= fr:
                    xs[4] = xc0; xs[5] = xc1; fs[2] = fc
                else:
                    shrink = 1
            else:
                xc0 = 0.5 * xb0 + 0.5 * xs[4]
                xc1 = 0.5 * xb1 + 0.5 * xs[5]
                fc = _eval_log(pr, xc0, xc1)
                if fc < fs[2]:
                    xs[4] = xc0; xs[5] = xc1; fs[2] = fc
                else:
                    shrink = 1
            if shrink:
                for k in range(1, 3):
                    xs[2 * k] = xs[0] + 0.5 * (xs[2 * k] - xs[0])
                    xs[2 * k + 1] = xs[1] + 0.5 * (xs[2 * k + 1] - xs[1])
                    fs[k] = _eval_log(pr, xs[2 * k], xs[2 * k + 1])
        _sort3(xs, fs)
    xout[0] = xs[0]
    xout[1] = xs[1]
    fout[0] = fs[0]
    iters[0] = it
    return converged


cdef double _golden_ratio_search(Problem* pr, double lo, double hi, double xtol,
                                 int maxiter, double* fout, int* iters, int* converged) nogil:
    """Golden-section search on log(su2/se2) with se2 profiled out."""
    cdef double invphi = 0.6180339887498949
    cdef double a = lo, bnd = hi, c, d, fc, fd
    cdef int it = 0
    c = bnd - invphi * (bnd - a)
    d = a + invphi * (bnd - a)
    fc = _profiled(pr, c)
    fd = _profiled(pr, d)
    converged[0] = 0
    while it < maxiter:
        if fabs(bnd - a) <= xtol:
            converged[0] = 1
            break
        it += 1
        if fc < fd:
            bnd = d
            d = c
            fd = fc
            c = bnd - invphi * (bnd - a)
            fc = _profiled(pr, c)
        else:
            a = c
            c = d
            fc = fd
            d = a + invphi * (bnd - a)
            fd = _profiled(pr, d)
    iters[0] = it
    if fc < fd:
        fout[0] = fc
        return c
    fout[0] = fd
    return d


cdef double _profiled(Problem* pr, double log_ratio) nogil:
    # objective at se2 = 1, su2 = ratio gives y'P1y; se2 profiled in closed form
    cdef double ratio = exp(log_ratio)
    cdef double f1, se2, df
    df = pr.n_obs - (pr.p if pr.reml else 0)
    se2 = _profile_scale(pr, ratio, df)
    if se2 <= 0.0:
        return INFINITY
    return _objective(pr, se2, ratio * se2)


cdef double _profile_scale(Problem* pr, double ratio, double df) nogil:
    cdef int g, i, j, p = pr.p
    cdef double w, c, quad, acc
    cdef double* A = pr.A
    cdef double* b = pr.b
    for i in range(p * p):
        A[i] = pr.xtx[i]
    for i in range(p):
        b[i] = pr.xty[i]
    c = pr.yty
    for g in range(pr.G):
        w = ratio / (1.0 + ratio * pr.s[g])
        for i in range(p * p):
            A[i] -= w * pr.sxx[g * p * p + i]
        for i in range(p):
            b[i] -= w * pr.sxy[g * p + i]
        c -= w * pr.syy[g]
    if _cholesky(A, p) != 0:
        return -1.0
    quad = 0.0
    for i in range(p):
        acc = b[i]
        for j in range(i):
            acc -= A[i * p + j] * b[j]
        b[i] = acc / A[i * p + i]
        quad += b[i] * b[i]
    return (c - quad) / df


cdef Problem _make_problem(const double[::1] s, const double[::1] cnt,
                           const double[:, :, ::1] sxx, const double[:, ::1] sxy,
                           const double[::1] syy, const double[:, ::1] xtx,
                           const double[::1] xty, double yty, double n_obs,
                           bint reml, double* A, double* b):
    cdef Problem pr
    cdef int g
    pr.G = s.shape[0]
    pr.p = xtx.shape[0]
    pr.s = &s[0]
    pr.cnt = &cnt[0]
    pr.sxx = &sxx[0, 0, 0]
    pr.sxy = &sxy[0, 0]
    pr.syy = &syy[0]
    pr.xtx = &xtx[0, 0]
    pr.xty = &xty[0]
    pr.yty = yty
    pr.n_obs = n_obs
    pr.m = 0.0
    for g in range(pr.G):
        pr.m += cnt[g]
    pr.reml = reml
    pr.log_floor_e = -INFINITY
    pr.log_floor_u = -INFINITY
    pr.A = A
    pr.b = b
    return pr


def neg_loglik(double se2, double su2, s, cnt, sxx, sxy, syy, xtx, xty,
               double yty, double n_obs, bint reml):
    """Negative (restricted) log-likelihood without the 2*pi constant."""
    cdef int p = xtx.shape[0]
    cdef double* A = <double*> malloc(p * p * sizeof(double))
    cdef double* b = <double*> malloc(p * sizeof(double))
    cdef Problem pr
    cdef double out
    try:
        pr = _make_problem(s, cnt, sxx, sxy, syy, xtx, xty, yty, n_obs, reml, A, b)
        out = _objective(&pr, se2, su2)
    finally:
        free(A)
        free(b)
    return out


def reml_optimize(starts, double log_floor_e, double log_floor_u,
                  s, cnt, sxx, sxy, syy, xtx, xty, double yty, double n_obs,
                  bint reml, double xtol, double ftol, int maxiter, double step,
                  str method="nelder_mead_log_scale"):
    """Minimise the negative log-likelihood over (log se2, log su2).

    Returns ``(log_se2, log_su2, fmin, iterations, converged)`` for the best
    start.
    """
    cdef const double[:, ::1] st = np.ascontiguousarray(starts, dtype=np.float64)
    cdef int p = xtx.shape[0]
    cdef double* A = <double*> malloc(p * p * sizeof(double))
    cdef double* b = <double*> malloc(p * sizeof(double))
    cdef Problem pr
    cdef double xo[2]
    cdef double fo, best_f = INFINITY, best0 = 0.0, best1 = 0.0
    cdef double lr, se2, df
    cdef int it = 0, total = 0, conv, best_conv = 0, k
    try:
        pr = _make_problem(s, cnt, sxx, sxy, syy, xtx, xty, yty, n_obs, reml, A, b)
        pr.log_floor_e = log_floor_e
        pr.log_floor_u = log_floor_u
        if method == "golden_section_on_ratio":
            df = n_obs - (p if reml else 0)
            with nogil:
                lr = _golden_ratio_search(&pr, st[0, 1] - st[0, 0] - 30.0,
                                          st[0, 1] - st[0, 0] + 30.0,
                                          xtol, maxiter, &fo, &it, &conv)
                se2 = _profile_scale(&pr, exp(lr), df)
            return (log(se2), log(se2) + lr, fo, it, bool(conv))
        for k in range(st.shape[0]):
            with nogil:
                conv = _nelder_mead(&pr, st[k, 0], st[k, 1], step, xtol, ftol,
                                    maxiter, xo, &fo, &it)
            total += it
            if conv > best_conv or (conv == best_conv and fo < best_f):
                best_f = fo
                best0 = xo[0]
                best1 = xo[1]
                best_conv = conv
    finally:
        free(A)
        free(b)
    return (best0, best1, best_f, total, bool(best_conv))


def gls_solve(double se2, double su2, const double[::1] s, const double[:, ::1] sx,
              const double[::1] sy, const double[:, ::1] xtx, const double[::1] xty):
    """Solve the GLS system at (se2, su2); returns (beta, u, X'V^{-1}X)."""
    cdef int m = s.shape[0], p = xtx.shape[0], j, i, k
    cdef cnp.ndarray[cnp.float64_t, ndim=1] beta = np.empty(p)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] u = np.empty(m)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] info = np.empty((p, p))
    cdef double[:, ::1] Iv = info
    cdef double[::1] bv = beta
    cdef double[::1] uv = u
    cdef double* L = <double*> malloc(p * p * sizeof(double))
    cdef double w, r
    cdef int ok
    try:
        with nogil:
            for i in range(p):
                bv[i] = xty[i]
                for k in range(p):
                    Iv[i, k] = xtx[i, k]
            for j in range(m):
                w = su2 / (se2 + su2 * s[j])
                for i in range(p):
                    bv[i] -= w * sx[j, i] * sy[j]
                    for k in range(p):
                        Iv[i, k] -= w * sx[j, i] * sx[j, k]
            for i in range(p):
                bv[i] /= se2
                for k in range(p):
                    Iv[i, k] /= se2
                    L[i * p + k] = Iv[i, k]
            ok = _cholesky(L, p)
            if ok == 0:
                _chol_solve(L, &bv[0], p)
                for j in range(m):
                    w = su2 / (se2 + su2 * s[j])
                    r = sy[j]
                    for i in range(p):
                        r -= sx[j, i] * bv[i]
                    uv[j] = w * r
    finally:
        free(L)
    if ok != 0:
        raise np.linalg.LinAlgError("GLS information matrix is not positive definite")
    return beta, u, info


def response_stats(const cnp.int64_t[::1] cluster, const cnp.int64_t[::1] group,
                   const double[::1] z, const double[:, ::1] X, const double[::1] y,
                   const double[:, ::1] sx, int n_groups):
    """Response-dependent sufficient statistics in one pass over the data.

    Returns ``(sy, xty, yty, sxy_g, syy_g)``.
    """
    cdef int n = y.shape[0], p = X.shape[1], m = sx.shape[0], i, k, j, g
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sy = np.zeros(m)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xty = np.zeros(p)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] sxy = np.zeros((n_groups, p))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] syy = np.zeros(n_groups)
    cdef double[::1] syv = sy
    cdef double[::1] xtyv = xty
    cdef double[:, ::1] sxyv = sxy
    cdef double[::1] syyv = syy
    cdef double yty = 0.0, yi
    with nogil:
        for i in range(n):
            yi = y[i]
            yty += yi * yi
            syv[cluster[i]] += z[i] * yi
            for k in range(p):
                xtyv[k] += X[i, k] * yi
        for j in range(m):
            g = group[j]
            syyv[g] += syv[j] * syv[j]
            for k in range(p):
                sxyv[g, k] += sx[j, k] * syv[j]
    return sy, xty, yty, sxy, syy
