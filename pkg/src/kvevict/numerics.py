"""Dense float64 kernels shared by the rest of the package.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64.
All functions are pure.
"""

import numpy as np

from kvevict import kernels
from kvevict.errors import ConfigError, DimensionError, DomainError

# Floor inside the logarithm of ``cross_entropy``.
CE_EPS = 1e-12


def as_vec(v):
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {a.shape}")
    return a


def as_mat(m):
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {a.shape}")
    return a


def matmul(a, b):
    a = as_mat(a)
    b = as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_row(logits):
    """Numerically stable softmax of a single row."""
    z = as_vec(logits)
    if z.size == 0:
        raise DomainError("softmax of an empty vector")
    e = np.exp(z - z.max())
    return e / e.sum()


def l1_norm(v):
    return float(np.abs(as_vec(v)).sum())


def maxpool1d(s, kernel):
    """Stride-1 max filter; the window is clipped at both ends, not padded."""
    s = as_vec(s)
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"pooling kernel must be odd and >= 1, got {kernel}")
    if s.size == 0 or kernel == 1:
        return s.copy()
    return kernels.maxpool1d(s, int(kernel))


def top_k_indices(s, k):
    """Indices of the ``k`` largest entries, best first.

    Equal values are ranked by smaller index, so the result is a pure
    function of the input.
    """
    s = as_vec(s)
    if k < 0 or k > s.size:
        raise DomainError(f"k={k} out of range for a vector of length {s.size}")
    order = np.argsort(-s, kind="stable")
    return order[:k]


def population_variance(xs):
    x = as_vec(xs)
    if x.size == 0:
        raise DomainError("variance of an empty vector")
    return float(np.mean((x - x.mean()) ** 2))


def cross_entropy(p, q):
    p = as_vec(p)
    q = as_vec(q)
    if p.shape != q.shape:
        raise DimensionError(f"length mismatch {p.size} vs {q.size}")
    return float(-(p * np.log(q + CE_EPS)).sum())
