"""Cluster-separation score for embedding batches."""

import numpy as np

from ..exceptions import RejectedInputError
from ..numerics import as_matrix, pairwise_euclidean

__all__ = ["silhouette"]


def silhouette(points, cluster_ids):
    """Mean silhouette coefficient under Euclidean distance.

    For point ``i`` with mean intra-cluster distance ``a`` and smallest mean
    distance ``b`` to another cluster, ``s_i = (b - a) / max(a, b)``.
    Points in singleton clusters, and points with ``a = b = 0``, score 0.

    Parameters
    ----------
    points : array-like, shape (n, d)
    cluster_ids : sequence of length n
        At least two distinct ids are required.
    """
    X = as_matrix(points, "points")
    ids = np.asarray(cluster_ids)
    if ids.shape != (X.shape[0],):
        raise RejectedInputError("cluster_ids must have one entry per point")
    classes, inv = np.unique(ids, return_inverse=True)
    if classes.size < 2:
        raise RejectedInputError("silhouette needs at least two clusters")
    D = pairwise_euclidean(X, X)
    onehot = np.zeros((X.shape[0], classes.size))
    onehot[np.arange(X.shape[0]), inv] = 1.0
    counts = onehot.sum(axis=0)
    sums = D @ onehot  # (n, k): total distance from each point to each cluster
    own = counts[inv]
    rows = np.arange(X.shape[0])
    a = np.where(own > 1, sums[rows, inv] / np.maximum(own - 1, 1), 0.0)
    mean_other = sums / counts
    mean_other[rows, inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.mean(s))
