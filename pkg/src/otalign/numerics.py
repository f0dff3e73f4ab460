"""Dense array helpers, seeded randomness and a finite-difference oracle.

Matrices and vectors are plain float64 :class:`numpy.ndarray` objects; the
``as_matrix`` / ``as_vector`` helpers validate them on the way in.
"""

import hashlib

import numpy as np

from .exceptions import NumericalError, RejectedInputError

__all__ = [
    "SeededRng",
    "as_matrix",
    "as_vector",
    "pairwise_euclidean",
    "finite_diff_grad",
    "gaussian_sample",
]


def as_matrix(data, name="matrix"):
    """Return ``data`` as a finite, C-contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise RejectedInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite entries")
    return arr


def as_vector(data, name="vector"):
    """Return ``data`` as a finite 1-D float64 array."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 1:
        raise RejectedInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite entries")
    return arr


def _label_key(label):
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class SeededRng:
    """Splittable random stream.

    Child streams are keyed by ``(seed, label)`` through
    :class:`numpy.random.SeedSequence`, so a child does not depend on how
    many draws were taken from its parent.

    >>> SeededRng(3).child("noise").normal(size=2).tolist() == \\
    ...     SeededRng(3).child("noise").normal(size=2).tolist()
    True
    """

    def __init__(self, seed, _path=()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise RejectedInputError(f"seed must be a 64-bit unsigned int, got {seed}")
        self.seed = seed
        self._path = tuple(_path)
        ss = np.random.SeedSequence(entropy=seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, label):
        return SeededRng(self.seed, self._path + (_label_key(label),))

    @property
    def generator(self):
        """Underlying :class:`numpy.random.Generator` (single-thread use)."""
        return self._gen

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self._path})"


def pairwise_euclidean(A, B):
    """Euclidean distance between every row of ``A`` and every row of ``B``.

    Computed from explicit differences (not the ``|a|^2 + |b|^2 - 2ab``
    expansion) so that ``pairwise_euclidean(A, A)`` is exactly symmetric
    with an exactly zero diagonal.

    Parameters
    ----------
    A : array-like, shape (M, D)
    B : array-like, shape (N, D)

    Returns
    -------
    C : ndarray, shape (M, N)
    """
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise RejectedInputError("pairwise_euclidean needs nonempty batches")
    if A.shape[1] != B.shape[1]:
        raise RejectedInputError(
            f"feature dimension mismatch: {A.shape[1]} vs {B.shape[1]}"
        )
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function ``f`` at ``x``.

    Raises :class:`NumericalError` naming the coordinate if ``f`` returns a
    non-finite value.
    """
    if not h > 0:
        raise RejectedInputError(f"step h must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = float(f(x))
        flat[k] = orig - h
        fm = float(f(x))
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {k}")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def gaussian_sample(rng, dim, mean=0.0, sigma=1.0):
    """``dim`` i.i.d. draws from N(mean, sigma^2)."""
    dim = int(dim)
    if dim < 0:
        raise RejectedInputError(f"dim must be nonnegative, got {dim}")
    if sigma < 0:
        raise RejectedInputError(f"sigma must be nonnegative, got {sigma}")
    if sigma == 0:
        return np.full(dim, float(mean))
    return mean + sigma * rng.normal(size=dim)
