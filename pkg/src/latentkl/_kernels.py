"""Compiled inner loops for evaluating many parameter draws against a dataset."""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def prefix_loglik(z, nu, log_w, const, labels, breaks):
    """Prefix sums of ``ln p(x_i|w_s)`` and ``ln p(y_i|x_i,w_s)`` per draw.

    z: whitened points (n, M); nu: whitened means (S, K, M); log_w: (S, K).
    labels: (n,) ints, or an empty array to skip the conditional sums.
    breaks: sorted prefix lengths in [0, n]; column b holds the sum over
    the first ``breaks[b]`` points.
    """
    S, K, M = nu.shape
    n = z.shape[0]
    B = breaks.shape[0]
    with_labels = labels.shape[0] == n and n > 0
    marg = np.zeros((S, B))
    cond = np.zeros((S, B))
    comp = np.empty(K)
    for s in range(S):
        acc_m = 0.0
        acc_c = 0.0
        b = 0
        for i in range(n):
            while b < B and breaks[b] == i:
                marg[s, b] = acc_m
                cond[s, b] = acc_c
                b += 1
            top = -np.inf
            for k in range(K):
                sq = 0.0
                for m in range(M):
                    diff = z[i, m] - nu[s, k, m]
                    sq += diff * diff
                v = log_w[s, k] - 0.5 * sq
                comp[k] = v
                top = max(top, v)
            tot = 0.0
            for k in range(K):
                tot += np.exp(comp[k] - top)
            lse = top + np.log(tot)
            acc_m += lse + const
            if with_labels:
                acc_c += comp[labels[i]] - lse
        while b < B:
            marg[s, b] = acc_m
            cond[s, b] = acc_c
            b += 1
    return marg, cond


@njit(cache=True, fastmath=True)
def pointwise_logmarg(z, nu, log_w, const):
    """``ln p(x_i | w_s)`` for every draw and point, shape (S, n)."""
    S, K, M = nu.shape
    n = z.shape[0]
    out = np.empty((S, n))
    comp = np.empty(K)
    for s in range(S):
        for i in range(n):
            top = -np.inf
            for k in range(K):
                sq = 0.0
                for m in range(M):
                    diff = z[i, m] - nu[s, k, m]
                    sq += diff * diff
                v = log_w[s, k] - 0.5 * sq
                comp[k] = v
                top = max(top, v)
            tot = 0.0
            for k in range(K):
                tot += np.exp(comp[k] - top)
            out[s, i] = top + np.log(tot) + const
    return out


@njit(cache=True)
def em_whitened(z, log_w, nu, const, tol, max_iter, eps):
    """EM in whitened coordinates.

    Returns (log_w, nu, loglik, iterations, status, trace) where status is
    0 converged, 1 iteration limit, 2 a mixing ratio fell to ``eps`` or below.
    The returned parameters are those whose log-likelihood was last evaluated.
    """
    n, M = z.shape
    K = nu.shape[0]
    log_w = log_w.copy()
    nu = nu.copy()
    trace = np.empty(max_iter + 1)
    comp = np.empty(K)
    counts = np.empty(K)
    sums = np.empty((K, M))
    ll_old = -np.inf
    for it in range(max_iter):
        counts[:] = 0.0
        sums[:, :] = 0.0
        ll = 0.0
        for i in range(n):
            top = -np.inf
            for k in range(K):
                sq = 0.0
                for m in range(M):
                    diff = z[i, m] - nu[k, m]
                    sq += diff * diff
                v = log_w[k] - 0.5 * sq
                comp[k] = v
                top = max(top, v)
            tot = 0.0
            for k in range(K):
                comp[k] = np.exp(comp[k] - top)
                tot += comp[k]
            ll += top + np.log(tot) + const
            for k in range(K):
                r = comp[k] / tot
                counts[k] += r
                for m in range(M):
                    sums[k, m] += r * z[i, m]
        trace[it] = ll
        if ll - ll_old < tol * abs(ll):
            return log_w, nu, ll, it + 1, 0, trace[: it + 1]
        for k in range(K):
            if counts[k] / n <= eps:
                return log_w, nu, ll, it + 1, 2, trace[: it + 1]
        for k in range(K):
            log_w[k] = np.log(counts[k] / n)
            for m in range(M):
                nu[k, m] = sums[k, m] / counts[k]
        ll_old = ll
    ll = 0.0
    for i in range(n):
        top = -np.inf
        for k in range(K):
            sq = 0.0
            for m in range(M):
                diff = z[i, m] - nu[k, m]
                sq += diff * diff
            comp[k] = log_w[k] - 0.5 * sq
            top = max(top, comp[k])
        tot = 0.0
        for k in range(K):
            tot += np.exp(comp[k] - top)
        ll += top + np.log(tot) + const
    trace[max_iter] = ll
    return log_w, nu, ll, max_iter, 1, trace
