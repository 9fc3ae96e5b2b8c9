"""Dense numeric primitives shared by every other module.

Everything runs in float64: at desk scale, determinism matters more than
speed. Vectors are 1-d numpy arrays, matrices are row-major 2-d arrays with
one sample per row.

Randomness goes through :class:`SeededRng`, a thin wrapper around numpy's
PCG64 bit generator (a 64-bit permuted-congruential generator). A given seed
produces the same stream on every platform, and every stochastic operation
in the package takes an explicit generator.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "softmax",
    "cosine_distance",
    "cosine_distance_rows",
    "cosine_distance_matrix",
    "argmax_stable",
    "SeededRng",
    "sample_beta",
]


def _as_float_array(a, name):
    arr = np.asarray(a, dtype=np.float64)
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def softmax(z, axis=-1):
    """Turn logits into probabilities, shifted by the max for overflow safety.

    Accepts a single logit vector or a batch of row vectors. Output entries
    are strictly positive and sum to 1 along `axis`.
    """
    arr = _as_float_array(z, "logits")
    shifted = arr - np.max(arr, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def cosine_distance(a, b):
    """1 - cos(a, b), in [0, 2]. Raises on zero-norm input.

    Rounding can push 1 - cos a hair outside [0, 2]; the result is clipped
    back so downstream tail models never see a negative distance.
    """
    va = _as_float_array(a, "a").ravel()
    vb = _as_float_array(b, "b").ravel()
    if va.shape != vb.shape:
        raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance undefined for zero-norm vector")
    return float(np.clip(1.0 - np.dot(va, vb) / (na * nb), 0.0, 2.0))


def cosine_distance_rows(rows, v):
    """Cosine distance of every row of `rows` to the vector `v`."""
    return cosine_distance_matrix(rows, np.asarray(v, dtype=np.float64).reshape(1, -1))[:, 0]


def cosine_distance_matrix(a_rows, b_rows):
    """Pairwise cosine distances, shape (len(a_rows), len(b_rows))."""
    a = _as_float_array(a_rows, "a_rows")
    b = _as_float_array(b_rows, "b_rows")
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("cosine distance undefined for zero-norm vector")
    sim = (a @ b.T) / np.outer(na, nb)
    return np.clip(1.0 - sim, 0.0, 2.0)


def argmax_stable(v):
    """Index of the maximum entry; ties break toward the lowest index."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("argmax of empty vector")
    return int(np.argmax(arr))


class SeededRng:
    """Reproducible random numbers from an explicit 64-bit seed.

    Backed by numpy's PCG64 bit generator; identical seeds and identical
    call sequences yield identical streams on all platforms. Instances are
    not thread-safe: derive one per worker with :meth:`split` (seed XOR
    worker index, the documented splitting scheme).
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def split(self, index):
        """Independent generator for worker `index` (seed XOR index)."""
        return SeededRng(self.seed ^ int(index))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def standard_gamma(self, shape, size=None):
        return self._gen.standard_gamma(shape, size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed})"


def sample_beta(rng, a, b, size=None):
    """Draw from Beta(a, b) as the ratio of two Gamma draws.

    Uses X/(X+Y) with X ~ Gamma(a), Y ~ Gamma(b) from the shared PCG64
    stream (numpy's gamma sampler is Marsaglia-Tsang). Returns values in
    [0, 1]; a scalar when `size` is None.
    """
    if not (a > 0 and b > 0):
        raise ValueError(f"Beta parameters must be positive, got a={a}, b={b}")
    x = rng.standard_gamma(a, size)
    y = rng.standard_gamma(b, size)
    total = x + y
    if size is None:
        # both gammas underflowing to zero is astronomically unlikely
        return float(x / total) if total > 0 else 0.5
    out = np.where(total > 0, x / np.where(total > 0, total, 1.0), 0.5)
    return out
