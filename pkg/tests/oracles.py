"""Brute-force reference implementations used as test oracles.

Everything here builds the full n x n covariance matrix and inverts it
directly, so it shares no code path with the package's Woodbury algebra.
"""
import numpy as np

from lmmboot.model import ClusteredDataset, MixedEffectTarget


def random_dataset(rng, m=None, q=1, p=2, n_range=(2, 6), unequal=True):
    """Small unbalanced dataset with random X and Z."""
    m = m or int(rng.integers(3, 7))
    ids, ys, Xs, Zs = [], [], [], []
    for j in range(m):
        nj = int(rng.integers(*n_range)) if unequal else n_range[0]
        nj = max(nj, q + 1)
        X = np.column_stack([np.ones(nj)] + [rng.normal(size=nj) for _ in range(p - 1)])
        if q == 1:
            Z = (1.0 + 0.5 * rng.random()) * np.ones((nj, 1))
        else:
            Z = np.column_stack([np.ones(nj)] + [rng.normal(size=nj) for _ in range(q - 1)])
        ids += [f"c{j}"] * nj
        ys.append(rng.normal(size=nj) + rng.normal())
        Xs.append(X)
        Zs.append(Z)
    return ClusteredDataset.from_arrays(ids, np.concatenate(ys), np.vstack(Xs), np.vstack(Zs))


def random_target(rng, data):
    k = rng.normal(size=(data.m, data.p))
    return MixedEffectTarget(k, tuple(rng.normal(size=c.q) for c in data.clusters))


def block_z(data):
    Zb = np.zeros((data.n, int(sum(data.q_j))))
    off = data.offsets
    col = 0
    for j, c in enumerate(data.clusters):
        Zb[off[j]:off[j + 1], col:col + c.q] = c.Z
        col += c.q
    return Zb


class Dense:
    """Full-matrix quantities at given variance components."""

    def __init__(self, data, se2, su2):
        self.data = data
        self.se2, self.su2 = se2, su2
        self.X = data.X
        self.y = data.y
        self.Zb = block_z(data)
        self.Q = self.Zb.shape[1]
        self.G = su2 * np.eye(self.Q)
        self.V = se2 * np.eye(data.n) + self.Zb @ self.G @ self.Zb.T
        self.Vi = np.linalg.inv(self.V)
        self.A = self.X.T @ self.Vi @ self.X
        self.Ai = np.linalg.inv(self.A)
        self.P = self.Vi - self.Vi @ self.X @ self.Ai @ self.X.T @ self.Vi

    def beta(self):
        return self.Ai @ self.X.T @ self.Vi @ self.y

    def u(self, beta=None):
        beta = self.beta() if beta is None else beta
        return self.G @ self.Zb.T @ self.Vi @ (self.y - self.X @ beta)

    def neg_loglik(self, reml=True):
        logdet = np.linalg.slogdet(self.V)[1]
        if reml:
            return 0.5 * (logdet + np.linalg.slogdet(self.A)[1] + self.y @ self.P @ self.y)
        r = self.y - self.X @ self.beta()
        return 0.5 * (logdet + r @ self.Vi @ r)

    def _L(self, target, j):
        L = np.zeros(self.Q)
        off = np.concatenate([[0], np.cumsum(self.data.q_j)])
        L[off[j]:off[j + 1]] = target.l[j]
        return L

    def g1(self, target):
        M = self.G - self.G @ self.Zb.T @ self.Vi @ self.Zb @ self.G
        return np.array([self._L(target, j) @ M @ self._L(target, j) for j in range(self.data.m)])

    def g2(self, target):
        out = []
        for j in range(self.data.m):
            b = target.k[j] - self.X.T @ self.Vi @ self.Zb @ self.G @ self._L(target, j)
            out.append(b @ self.Ai @ b)
        return np.array(out)

    def fisher(self, reml=True):
        Ds = [np.eye(self.data.n), self.Zb @ self.Zb.T]
        M = self.P if reml else self.Vi
        return np.array([[0.5 * np.trace(M @ Ds[a] @ M @ Ds[b]) for b in range(2)] for a in range(2)])


def o_vector_dense(data, se2, su2, target, j):
    """o_j = V_j^{-1} Z_j G_j l_j from the cluster's explicit V_j."""
    c = data.clusters[j]
    V = se2 * np.eye(c.n) + su2 * c.Z @ c.Z.T
    return np.linalg.solve(V, su2 * c.Z @ target.l[j])


def o_derivatives_dense(data, se2, su2, target, j):
    """Exact (do_j/dsigma_e2, do_j/dsigma_u2) from dV/dsigma_e2 = I, dV/dsigma_u2 = ZZ'."""
    c = data.clusters[j]
    Vi = np.linalg.inv(se2 * np.eye(c.n) + su2 * c.Z @ c.Z.T)
    o = Vi @ (su2 * c.Z @ target.l[j])
    return -Vi @ o, -Vi @ c.Z @ c.Z.T @ o + Vi @ c.Z @ target.l[j]


def g3_dense(data, se2, su2, target, v_a):
    out = []
    for j, c in enumerate(data.clusters):
        D = np.vstack(o_derivatives_dense(data, se2, su2, target, j))
        V = se2 * np.eye(c.n) + su2 * c.Z @ c.Z.T
        out.append(np.trace(D @ V @ D.T @ v_a))
    return np.array(out)


def g3_by_differences(data, se2, su2, target, v_a, h=1e-6):
    """g3 with do_j/d delta from central differences of the dense o_j."""
    out = []
    for j, c in enumerate(data.clusters):
        de = (o_vector_dense(data, se2 + h, su2, target, j) - o_vector_dense(data, se2 - h, su2, target, j)) / (2 * h)
        du = (o_vector_dense(data, se2, su2 + h, target, j) - o_vector_dense(data, se2, su2 - h, target, j)) / (2 * h)
        D = np.vstack([de, du])
        V = se2 * np.eye(c.n) + su2 * c.Z @ c.Z.T
        out.append(np.trace(D @ V @ D.T @ v_a))
    return np.array(out)


def balanced_anova_reml(y, m, nj):
    """Closed-form REML for the balanced one-way model y_ij = mu + u_j + e_ij.

    Interior solution: sigma_e2 = MSW, sigma_u2 = (MSB - MSW) / n_j.  When
    MSB <= MSW the REML maximum sits at sigma_u2 = 0 with
    sigma_e2 = SST / (n - 1).
    """
    Y = np.asarray(y).reshape(m, nj)
    means = Y.mean(axis=1)
    grand = Y.mean()
    ssw = float(((Y - means[:, None]) ** 2).sum())
    ssb = float(nj * ((means - grand) ** 2).sum())
    msw = ssw / (m * (nj - 1))
    msb = ssb / (m - 1)
    if msb > msw:
        return msw, (msb - msw) / nj
    return (ssw + ssb) / (m * nj - 1), 0.0
