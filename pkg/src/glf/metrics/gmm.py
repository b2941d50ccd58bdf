"""Full-covariance Gaussian mixtures fitted by EM, and ancestral sampling."""

import math
from dataclasses import dataclass, field

import numpy as np

from glf.errors import NumericError, UsageError
from glf.metrics.fid import JITTER
from glf.metrics.kmeans import kmeans_plusplus

MAX_ITER = 200
REL_TOL = 1e-6
MIN_WEIGHT = 1e-8
MAX_RESEEDS = 5
PSD_TOL = 1e-8


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    log_likelihoods: list = field(default_factory=list)
    n_reseeds: int = 0

    @property
    def n_components(self):
        return len(self.weights)


def _component_logpdf(x, mean, cov):
    chol = np.linalg.cholesky(cov)
    solved = np.linalg.solve(chol, (x - mean).T)
    maha = (solved * solved).sum(0)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (x.shape[1] * math.log(2 * math.pi) + logdet + maha)


def _log_joint(x, weights, means, covs):
    """log(w_k) + log N(x | mu_k, Sigma_k), shape [N, K]."""
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return np.stack([_component_logpdf(x, m, c) for m, c in zip(means, covs)], axis=1) + logw


def _logsumexp(a):
    top = a.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(a - top).sum(axis=1, keepdims=True)))[:, 0]


def gmm_log_likelihood(model, x):
    """Mean per-sample log-likelihood."""
    x = np.asarray(x, dtype=np.float64)
    return float(_logsumexp(_log_joint(x, model.weights, model.means, model.covariances)).mean())


def fit_gmm_em(latents, n_components=10, seed=0, max_iter=MAX_ITER, tol=REL_TOL, jitter=JITTER):
    """EM for a full-covariance mixture, initialised by k-means++ seeding.

    ``log_likelihoods`` on the result lists the mean data log-likelihood
    before each M-step.  A component whose weight falls below 1e-8 is
    restarted at a random datum with the pooled covariance; more than five
    restarts raise NumericError.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2:
        raise UsageError(f"fit_gmm_em expects [N, D] latents, got shape {x.shape}")
    n, d = x.shape
    k = n_components
    if k < 1 or n < k:
        raise UsageError(f"need 1 <= n_components <= N, got {k} components for {n} samples")
    rng = np.random.default_rng(seed)
    eye = np.eye(d)
    pooled = np.cov(x.T, bias=True).reshape(d, d) + jitter * eye
    means = kmeans_plusplus(x, k, rng).copy()
    covs = np.repeat(pooled[None], k, axis=0)
    weights = np.full(k, 1.0 / k)
    history, reseeds = [], 0
    for _ in range(max_iter):
        log_joint = _log_joint(x, weights, means, covs)
        log_norm = _logsumexp(log_joint)
        ll = float(log_norm.mean())
        history.append(ll)
        if not math.isfinite(ll):
            raise NumericError("GMM EM: log-likelihood became non-finite")
        resp = np.exp(log_joint - log_norm[:, None])
        counts = resp.sum(0)
        weights = counts / n
        collapsed = np.flatnonzero(weights < MIN_WEIGHT)
        safe = np.maximum(counts, np.finfo(float).tiny)
        means = (resp.T @ x) / safe[:, None]
        for j in range(k):
            diff = x - means[j]
            cov = (resp[:, j, None] * diff).T @ diff / safe[j]
            covs[j] = 0.5 * (cov + cov.T) + jitter * eye
        if len(collapsed):
            reseeds += len(collapsed)
            if reseeds > MAX_RESEEDS:
                raise NumericError(f"GMM EM: components collapsed more than {MAX_RESEEDS} times")
            for j in collapsed:
                means[j] = x[rng.integers(n)]
                covs[j] = pooled
                weights[j] = 1.0 / k
            weights = weights / weights.sum()
            continue
        if len(history) > 1 and abs(ll - history[-2]) <= tol * abs(history[-2]):
            break
    weights = weights / weights.sum()
    return GmmModel(weights, means, covs, history, reseeds)


def _factor(cov):
    """A matrix L with L @ L.T == cov; Cholesky, or an eigen factor for singular PSD input."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
        if vals.min() < -PSD_TOL * max(1.0, np.abs(vals).max()):
            raise NumericError(f"covariance is not positive semi-definite (eigenvalue {vals.min():.3g})")
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def gmm_sample(model, n, seed):
    """Ancestral sampling: component by weight, then mean + L @ standard normal."""
    if n < 1:
        raise UsageError("n must be >= 1")
    rng = np.random.default_rng(seed)
    factors = [_factor(np.asarray(c, dtype=np.float64)) for c in model.covariances]
    comps = rng.choice(model.n_components, size=n, p=np.asarray(model.weights, dtype=np.float64))
    normals = rng.standard_normal((n, model.means.shape[1]))
    out = np.empty_like(normals)
    for j, factor in enumerate(factors):
        rows = comps == j
        out[rows] = model.means[j] + normals[rows] @ factor.T
    return out


def gaussian_sample(stats, n, seed):
    """Draws from a fitted Gaussian; identical to a one-component mixture with the same seed."""
    return gmm_sample(GmmModel(np.ones(1), stats.mu[None], stats.sigma[None]), n, seed)


