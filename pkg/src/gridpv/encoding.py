"""Codebook learning and fixed-length aggregation of local features.

VLAD and Fisher descriptors both get signed square root followed by global
L2 normalisation unless ``normalize=False``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _blob
from .features import LocalFeatureSet

DEFAULT_POOL_CAP = 100_000


class EncodingError(ValueError):
    pass


class Encoder(str, enum.Enum):
    VLAD = "vlad"
    FV = "fv"
    AVG = "avg"
    BR = "br"


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, D)
    seed: int
    inertia: float
    provenance: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # inertia after every assignment step

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def D(self) -> int:
        return self.centroids.shape[1]


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)
    seed: int = 0
    provenance: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # average log-likelihood per EM iteration
    converged: bool = True

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def D(self) -> int:
        return self.means.shape[1]


@dataclass
class GlobalDescriptor:
    values: np.ndarray
    encoder: Encoder

    def __len__(self):
        return self.values.shape[0]


def _as_matrix(vectors) -> np.ndarray:
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise EncodingError("expected an (N, D) matrix")
    if not np.all(np.isfinite(X)):
        raise EncodingError("non-finite input")
    return X


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def subsample_pool(X: np.ndarray, cap: int, seed: int) -> np.ndarray:
    if cap is None or X.shape[0] <= cap:
        return X
    idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], cap, replace=False))
    return X[idx]


# --------------------------------------------------------------------------- k-means

def _kmeanspp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    N = X.shape[0]
    chosen = [int(rng.integers(N))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(N, p=d2 / total))
        else:
            nxt = int(rng.integers(N))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def kmeans_fit(vectors, K: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6,
               provenance: Optional[dict] = None) -> Codebook:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when the largest centroid move drops below ``tol`` or after
    ``max_iter`` updates. A cluster left empty is re-seeded at the point
    farthest from its current centroid.
    """
    X = _as_matrix(vectors)
    N = X.shape[0]
    if K < 1 or N < K:
        raise EncodingError(f"need N >= K >= 1 (N={N}, K={K})")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, K, rng)
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(X, C)
        labels = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(N), labels]
        history.append(float(point_d2.sum()))
        counts = np.bincount(labels, minlength=K)
        newC = np.zeros_like(C)
        np.add.at(newC, labels, X)
        nonempty = counts > 0
        newC[nonempty] /= counts[nonempty, None]
        if not nonempty.all():
            taken = set()
            order = np.argsort(-point_d2, kind="stable")
            pos = 0
            for k in np.flatnonzero(~nonempty):
                while int(order[pos]) in taken:
                    pos += 1
                newC[k] = X[order[pos]]
                taken.add(int(order[pos]))
        shift = np.sqrt(((newC - C) ** 2).sum(axis=1)).max()
        C = newC
        if shift < tol:
            break
    d2 = _sq_dists(X, C)
    inertia = float(d2.min(axis=1).sum())
    history.append(inertia)
    return Codebook(C, seed, inertia, dict(provenance or {}), history)


def assign(codebook: Codebook, vectors) -> np.ndarray:
    """Nearest centroid per row; ties go to the lowest index."""
    return np.argmin(_sq_dists(_as_matrix(vectors), codebook.centroids), axis=1)


# --------------------------------------------------------------------------- GMM

def _log_gauss(X, weights, means, variances) -> np.ndarray:
    """(N, K) matrix of log(w_k) + log N(x | mu_k, diag var_k)."""
    diff = X[:, None, :] - means[None]
    quad = (diff * diff / variances[None]).sum(axis=2)
    logdet = np.log(variances).sum(axis=1)
    D = X.shape[1]
    return np.log(weights)[None] - 0.5 * (D * np.log(2 * np.pi) + logdet[None] + quad)


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def posteriors(gmm: GmmModel, vectors) -> tuple:
    """Soft assignments (N, K) and per-point log-likelihoods (N,)."""
    lg = _log_gauss(np.asarray(vectors, dtype=np.float64), gmm.weights, gmm.means, gmm.variances)
    ll = _logsumexp(lg)
    return np.exp(lg - ll[:, None]), ll


def gmm_fit(vectors, K: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6,
            variance_floor: float = 1e-6, provenance: Optional[dict] = None) -> GmmModel:
    """EM for a diagonal-covariance mixture, initialised from :func:`kmeans_fit`.

    ``variance_floor`` is relative to the mean per-dimension variance of the data.
    """
    X = _as_matrix(vectors)
    N, D = X.shape
    if K < 1 or N < K:
        raise EncodingError(f"need N >= K >= 1 (N={N}, K={K})")
    data_var = X.var(axis=0).mean()
    if data_var == 0 and K > 1:
        raise EncodingError("GMM did not converge: all training vectors are identical")
    floor = variance_floor * data_var if data_var > 0 else variance_floor

    cb = kmeans_fit(X, K, seed=seed)
    labels = assign(cb, X)
    weights = np.empty(K)
    means = cb.centroids.copy()
    variances = np.empty((K, D))
    for k in range(K):
        members = X[labels == k]
        weights[k] = max(len(members), 1) / N
        variances[k] = members.var(axis=0) if len(members) > 1 else X.var(axis=0)
    weights /= weights.sum()
    np.maximum(variances, floor, out=variances)

    history = []
    converged = False
    for it in range(max_iter + 1):
        lg = _log_gauss(X, weights, means, variances)
        ll = _logsumexp(lg)
        avg = float(ll.mean())
        if history and avg - history[-1] < tol:
            history.append(avg)
            converged = True
            break
        history.append(avg)
        if it == max_iter:
            break
        gamma = np.exp(lg - ll[:, None])
        nk = np.maximum(gamma.sum(axis=0), 1e-12)
        weights = nk / nk.sum()
        means = (gamma.T @ X) / nk[:, None]
        diff2 = (X[:, None, :] - means[None]) ** 2
        variances = np.einsum("nk,nkd->kd", gamma, diff2) / nk[:, None]
        np.maximum(variances, floor, out=variances)
    return GmmModel(weights, means, variances, seed, dict(provenance or {}), history, converged)


# --------------------------------------------------------------------------- encoders

def power_l2(v: np.ndarray) -> np.ndarray:
    """Signed square root then L2 normalisation; an all-zero vector stays zero."""
    v = np.sign(v) * np.sqrt(np.abs(v))
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _check_dim(local: LocalFeatureSet, D: int):
    if local.vectors.shape[1] != D:
        raise EncodingError(f"feature dimension {local.vectors.shape[1]} != model dimension {D}")


def vlad_raw(codebook: Codebook, X: np.ndarray) -> np.ndarray:
    labels = assign(codebook, X)
    acc = np.zeros_like(codebook.centroids)
    np.add.at(acc, labels, X - codebook.centroids[labels])
    return acc.ravel()


def vlad_encode(codebook: Codebook, local: LocalFeatureSet, normalize: bool = True) -> GlobalDescriptor:
    _check_dim(local, codebook.D)
    v = vlad_raw(codebook, local.vectors)
    return GlobalDescriptor(power_l2(v) if normalize else v, Encoder.VLAD)


def fisher_blocks(gmm: GmmModel, X: np.ndarray) -> tuple:
    """Unnormalised mean and variance gradient blocks, each (K, D)."""
    gamma, _ = posteriors(gmm, X)
    n = X.shape[0]
    sigma = np.sqrt(gmm.variances)
    diff = (X[:, None, :] - gmm.means[None]) / sigma[None]  # (n, K, D)
    g_mu = np.einsum("nk,nkd->kd", gamma, diff) / (n * np.sqrt(gmm.weights))[:, None]
    g_sig = np.einsum("nk,nkd->kd", gamma, diff * diff - 1) / (n * np.sqrt(2 * gmm.weights))[:, None]
    return g_mu, g_sig


def fv_encode(gmm: GmmModel, local: LocalFeatureSet, normalize: bool = True) -> GlobalDescriptor:
    _check_dim(local, gmm.D)
    g_mu, g_sig = fisher_blocks(gmm, local.vectors)
    v = np.concatenate([g_mu.ravel(), g_sig.ravel()])
    return GlobalDescriptor(power_l2(v) if normalize else v, Encoder.FV)


def avg_encode(local: LocalFeatureSet) -> GlobalDescriptor:
    if local.vectors.shape[0] == 0:
        raise EncodingError("cannot average an empty feature set")
    return GlobalDescriptor(local.vectors.mean(axis=0), Encoder.AVG)


# --------------------------------------------------------------------------- serialization

def dumps_codebook(cb: Codebook) -> bytes:
    header = {"version": 1, "kind": "codebook", "K": cb.K, "D": cb.D, "seed": cb.seed,
              "provenance": cb.provenance, "inertia": cb.inertia}
    return _blob.dumps(header, {"centroids": cb.centroids})


def loads_codebook(blob: bytes) -> Codebook:
    h, a = _blob.loads(blob, "codebook")
    return Codebook(a["centroids"].reshape(h["K"], h["D"]), h["seed"], h["inertia"], h["provenance"])


def dumps_gmm(g: GmmModel) -> bytes:
    header = {"version": 1, "kind": "gmm", "K": g.K, "D": g.D, "seed": g.seed,
              "provenance": g.provenance}
    return _blob.dumps(header, {"weights": g.weights, "means": g.means, "variances": g.variances})


def loads_gmm(blob: bytes) -> GmmModel:
    h, a = _blob.loads(blob, "gmm")
    return GmmModel(a["weights"], a["means"], a["variances"], h["seed"], h["provenance"])


def dumps_quantizer(q) -> bytes:
    return dumps_codebook(q) if isinstance(q, Codebook) else dumps_gmm(q)


def loads_quantizer(blob: bytes):
    try:
        return loads_codebook(blob)
    except _blob.FormatError:
        return loads_gmm(blob)
