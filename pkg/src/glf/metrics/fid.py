"""Gaussian feature statistics and the Frechet distance between them."""

from dataclasses import dataclass

import numpy as np

from glf.errors import UsageError

JITTER = 1e-6
SYMMETRY_TOL = 1e-8


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def fit_gaussian(features, jitter=JITTER):
    """Sample mean and unbiased covariance (plus ``jitter * I``) of [N, F] features."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise UsageError(f"fit_gaussian expects [N, F] features, got shape {x.shape}")
    if len(x) < 2:
        raise UsageError("fit_gaussian needs at least two samples")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (len(x) - 1)
    sigma = 0.5 * (sigma + sigma.T) + jitter * np.eye(x.shape[1])
    return GaussianStats(mu, sigma, len(x))


def matrix_sqrt_psd(a):
    """Symmetric square root via eigendecomposition, negative eigenvalues clamped to zero."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise UsageError(f"matrix_sqrt_psd expects a square matrix, got shape {a.shape}")
    scale = max(1.0, np.abs(a).max())
    if np.abs(a - a.T).max() > SYMMETRY_TOL * scale:
        raise UsageError("matrix_sqrt_psd: matrix is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    root = np.sqrt(np.clip(vals, 0.0, None))
    return (vecs * root) @ vecs.T


def frechet_distance(x, g):
    """Distance between two GaussianStats, cross term in the symmetric form."""
    if x.mu.shape != g.mu.shape:
        raise UsageError(f"feature dimensions differ: {x.mu.shape[0]} vs {g.mu.shape[0]}")
    root_x = matrix_sqrt_psd(x.sigma)
    inner = root_x @ g.sigma @ root_x
    cross = np.trace(matrix_sqrt_psd(0.5 * (inner + inner.T)))
    diff = x.mu - g.mu
    value = diff @ diff + np.trace(x.sigma) + np.trace(g.sigma) - 2.0 * cross
    return max(float(value), 0.0)


def fid(real_feats, fake_feats):
    """Frechet distance between Gaussians fitted to two feature sets."""
    real = np.asarray(real_feats)
    fake = np.asarray(fake_feats)
    if real.ndim != 2 or fake.ndim != 2 or real.shape[1] != fake.shape[1]:
        raise UsageError(f"fid: feature shapes {real.shape} and {fake.shape} are incompatible")
    return frechet_distance(fit_gaussian(real), fit_gaussian(fake))
