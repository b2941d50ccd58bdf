"""k-means++ seeding and Lloyd iterations (float64, seeded)."""

import numpy as np

from glf.errors import UsageError


def squared_distances(x, centers):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(x, k, rng):
    """Pick ``k`` initial centers, each new one with probability proportional to D(x)^2."""
    n = len(x)
    if not 1 <= k <= n:
        raise UsageError(f"need 1 <= k <= N, got k={k}, N={n}")
    centers = [x[rng.integers(n)]]
    closest = squared_distances(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, squared_distances(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans(x, k, rng, max_iter=100):
    """Lloyd's algorithm from a k-means++ start; returns (centers, labels)."""
    x = np.asarray(x, dtype=np.float64)
    centers = kmeans_plusplus(x, k, rng)
    labels = None
    for _ in range(max_iter):
        new_labels = squared_distances(x, centers).argmin(1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(0)
    return centers, labels
