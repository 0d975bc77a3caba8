"""Independent brute-force references used by unit and acceptance tests."""

import math

import numpy as np


def vlad_oracle(centroids, X, normalize=True):
    K, D = centroids.shape
    acc = [[0.0] * D for _ in range(K)]
    for x in X:
        best, best_d = 0, None
        for k in range(K):
            d = sum((x[j] - centroids[k][j]) ** 2 for j in range(D))
            if best_d is None or d < best_d:
                best, best_d = k, d
        for j in range(D):
            acc[best][j] += x[j] - centroids[best][j]
    v = [a for row in acc for a in row]
    if not normalize:
        return np.array(v)
    v = [math.copysign(math.sqrt(abs(a)), a) for a in v]
    n = math.sqrt(sum(a * a for a in v))
    return np.array([a / n for a in v]) if n > 0 else np.array(v)


def gmm_avg_loglik(X, weights, means, sigmas):
    """Mean over points of log sum_k w_k N(x | mu_k, diag(sigma_k^2)), looped."""
    total = 0.0
    for x in X:
        terms = []
        for w, mu, s in zip(weights, means, sigmas):
            lp = math.log(w)
            for xd, md, sd in zip(x, mu, s):
                lp += -0.5 * math.log(2 * math.pi) - math.log(sd) - 0.5 * ((xd - md) / sd) ** 2
            terms.append(lp)
        m = max(terms)
        total += m + math.log(sum(math.exp(t - m) for t in terms))
    return total / len(X)


def fd_fisher_blocks(X, weights, means, sigmas, h=1e-6):
    """Central-difference gradients of the average log-likelihood, scaled to Fisher blocks."""
    K, D = means.shape
    g_mu = np.zeros((K, D))
    g_sig = np.zeros((K, D))
    for k in range(K):
        for d in range(D):
            mp, mm = means.copy(), means.copy()
            mp[k, d] += h
            mm[k, d] -= h
            dmu = (gmm_avg_loglik(X, weights, mp, sigmas) - gmm_avg_loglik(X, weights, mm, sigmas)) / (2 * h)
            sp, sm = sigmas.copy(), sigmas.copy()
            sp[k, d] += h
            sm[k, d] -= h
            dsig = (gmm_avg_loglik(X, weights, means, sp) - gmm_avg_loglik(X, weights, means, sm)) / (2 * h)
            g_mu[k, d] = dmu * sigmas[k, d] / math.sqrt(weights[k])
            g_sig[k, d] = dsig * sigmas[k, d] / math.sqrt(2 * weights[k])
    return g_mu, g_sig


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
