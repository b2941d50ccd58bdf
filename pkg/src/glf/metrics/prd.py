"""Precision and recall for distributions over k-means cluster histograms."""

from dataclasses import dataclass

import numpy as np

from glf.errors import UsageError
from glf.metrics.kmeans import kmeans

ANGLE_EPS = 1e-10


@dataclass(frozen=True)
class PrdResult:
    precision: np.ndarray
    recall: np.ndarray
    f8: float
    f_1_8: float

    @property
    def curve(self):
        return list(zip(self.precision.tolist(), self.recall.tolist()))


def slopes(n_angles):
    """lambda = tan(theta) for theta equally spaced strictly inside (0, pi/2)."""
    return np.tan(np.linspace(ANGLE_EPS, np.pi / 2 - ANGLE_EPS, n_angles))


def curve_from_histograms(p, q, n_angles=1001):
    """Precision alpha(l) = sum min(l*P, Q) and recall beta(l) = sum min(P, Q/l)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    lam = slopes(n_angles)[:, None]
    precision = np.minimum(lam * p[None], q[None]).sum(1)
    recall = np.minimum(p[None], q[None] / lam).sum(1)
    return np.clip(precision, 0.0, 1.0), np.clip(recall, 0.0, 1.0)


def f_beta(precision, recall, beta):
    """Largest F_beta over a curve; points with precision = recall = 0 score 0."""
    num = (1 + beta ** 2) * precision * recall
    den = beta ** 2 * precision + recall
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(scores.max())


def histograms(real, fake, n_clusters, rng):
    pooled = np.concatenate([real, fake]).astype(np.float64)
    k = min(n_clusters, len(pooled))
    _, labels = kmeans(pooled, k, rng)
    p = np.bincount(labels[:len(real)], minlength=k) / len(real)
    q = np.bincount(labels[len(real):], minlength=k) / len(fake)
    return p, q


def prd(real_feats, fake_feats, n_clusters=20, n_angles=1001, num_runs=10, seed=0):
    """PRD curve averaged over ``num_runs`` independent clusterings, plus F_8 and F_1/8."""
    real = np.asarray(real_feats)
    fake = np.asarray(fake_feats)
    if len(real) == 0 or len(fake) == 0:
        raise UsageError("prd needs non-empty real and fake feature sets")
    if real.ndim != 2 or fake.ndim != 2 or real.shape[1] != fake.shape[1]:
        raise UsageError(f"prd: feature shapes {real.shape} and {fake.shape} are incompatible")
    rng = np.random.default_rng(seed)
    curves = [curve_from_histograms(*histograms(real, fake, n_clusters, rng), n_angles)
              for _ in range(num_runs)]
    precision = np.mean([c[0] for c in curves], axis=0)
    recall = np.mean([c[1] for c in curves], axis=0)
    return PrdResult(precision, recall, f_beta(precision, recall, 8.0), f_beta(precision, recall, 1 / 8))
