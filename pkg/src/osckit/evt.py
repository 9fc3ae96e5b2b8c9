"""Weibull extreme-value modeling.

Fits two-parameter Weibull distributions to the largest (high tail) or
smallest (low tail) values of a distance sample by maximum likelihood, and
evaluates CDF / survival probabilities. These are the per-class and
per-anchor tail models used by the distance-based post-processors.

No location shift is fitted: distances are non-negative by construction, so
the translation parameter is fixed at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "HIGH",
    "LOW",
    "WeibullModel",
    "DegenerateTailError",
    "tail_indices",
    "weibull_fit",
    "weibull_cdf",
    "weibull_survival",
    "log_likelihood",
]

HIGH = "high"
LOW = "low"

_NEWTON_TOL = 1e-8
_MAX_ITER = 200
_SHAPE_LO = 1e-3
_SHAPE_HI = 1e3


class DegenerateTailError(ValueError):
    """The selected tail has no maximum-likelihood Weibull fit."""


@dataclass(frozen=True)
class WeibullModel:
    """Fitted two-parameter Weibull: shape k, scale s, and tail provenance.

    `tail_size` is the number of samples actually used for the fit (the
    requested tail size clipped to what was available and positive).
    """

    shape: float
    scale: float
    tail: str
    tail_size: int

    def __post_init__(self):
        if not (np.isfinite(self.shape) and self.shape > 0):
            raise ValueError(f"shape must be finite and positive, got {self.shape}")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be finite and positive, got {self.scale}")
        if self.tail not in (HIGH, LOW):
            raise ValueError(f"tail must be '{HIGH}' or '{LOW}', got {self.tail!r}")
        if self.tail_size < 2:
            raise ValueError(f"tail_size must be >= 2, got {self.tail_size}")


def tail_indices(values, tail_size, tail):
    """Indices of the `tail_size` largest (high) or smallest (low) values.

    Selection uses a stable sort, so ties resolve toward lower indices and
    the chosen multiset is deterministic.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("values must be one-dimensional")
    if tail not in (HIGH, LOW):
        raise ValueError(f"tail must be '{HIGH}' or '{LOW}', got {tail!r}")
    if tail_size < 1:
        raise ValueError(f"tail_size must be >= 1, got {tail_size}")
    k = min(int(tail_size), arr.size)
    order = np.argsort(arr, kind="stable")
    if tail == HIGH:
        return order[arr.size - k:]
    return order[:k]


def _shape_statistics(log_y, k):
    # profile equation pieces on max-normalized data y (log_y <= 0)
    w = np.exp(k * log_y)
    s0 = np.sum(w)
    s1 = np.sum(w * log_y)
    s2 = np.sum(w * log_y * log_y)
    mean_log = np.mean(log_y)
    f = s1 / s0 - 1.0 / k - mean_log
    fprime = s2 / s0 - (s1 / s0) ** 2 + 1.0 / (k * k)
    return f, fprime


def _solve_shape(log_y):
    """Root of the profiled likelihood equation for the shape parameter.

    Newton from k=1 with tolerance 1e-8 and at most 200 iterations; falls
    back to bisection on [1e-3, 1e3] if Newton leaves that bracket or
    stalls. The equation is strictly increasing in k, so the bracket is
    reliable whenever the data are non-degenerate.
    """
    k = 1.0
    for _ in range(_MAX_ITER):
        f, fprime = _shape_statistics(log_y, k)
        if not np.isfinite(f) or not np.isfinite(fprime) or fprime <= 0:
            break
        step = f / fprime
        k_new = k - step
        if not np.isfinite(k_new) or k_new <= _SHAPE_LO or k_new >= _SHAPE_HI:
            break
        if abs(k_new - k) <= _NEWTON_TOL * max(1.0, abs(k_new)):
            return k_new
        k = k_new
    return _bisect_shape(log_y)


def _bisect_shape(log_y):
    lo, hi = _SHAPE_LO, _SHAPE_HI
    f_lo, _ = _shape_statistics(log_y, lo)
    f_hi, _ = _shape_statistics(log_y, hi)
    if not (f_lo < 0 < f_hi):
        raise DegenerateTailError(
            "Weibull shape equation has no root in [1e-3, 1e3]; tail too degenerate"
        )
    for _ in range(_MAX_ITER):
        mid = 0.5 * (lo + hi)
        f_mid, _ = _shape_statistics(log_y, mid)
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= _NEWTON_TOL * max(1.0, mid):
            return 0.5 * (lo + hi)
    return 0.5 * (lo + hi)


def weibull_fit(values, tail_size, tail):
    """Maximum-likelihood Weibull fit on the selected tail of `values`.

    High tail fits the `tail_size` largest values, low tail the smallest.
    Non-positive values in the selected tail are discarded (the Weibull
    support is positive); at least two distinct positive values must
    remain, otherwise :class:`DegenerateTailError` is raised.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("values must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValueError("values contain non-finite entries")
    idx = tail_indices(arr, tail_size, tail)
    selected = arr[idx]
    selected = selected[selected > 0.0]
    if selected.size < 2:
        raise DegenerateTailError(
            f"need at least 2 strictly positive tail samples, got {selected.size}"
        )
    if np.all(selected == selected[0]):
        raise DegenerateTailError("all tail samples are identical; MLE undefined")

    # normalize by the max so x**k cannot overflow for large k
    x_max = float(np.max(selected))
    log_y = np.log(selected / x_max)
    shape = _solve_shape(log_y)
    scale_y = float(np.mean(np.exp(shape * log_y))) ** (1.0 / shape)
    return WeibullModel(shape=float(shape), scale=float(x_max * scale_y),
                        tail=tail, tail_size=int(selected.size))


def _check_distances(d):
    arr = np.asarray(d, dtype=np.float64)
    if np.any(arr < 0.0):
        raise ValueError("distances must be non-negative")
    return arr


def weibull_cdf(model, d):
    """P(X <= d) = 1 - exp(-(d/s)^k). Accepts scalars or arrays, d >= 0."""
    arr = _check_distances(d)
    out = 1.0 - np.exp(-np.power(arr / model.scale, model.shape))
    return float(out) if np.ndim(d) == 0 else out


def weibull_survival(model, d):
    """P(X > d) = exp(-(d/s)^k), the complement of :func:`weibull_cdf`."""
    arr = _check_distances(d)
    out = np.exp(-np.power(arr / model.scale, model.shape))
    return float(out) if np.ndim(d) == 0 else out


def log_likelihood(shape, scale, values):
    """Weibull log-likelihood of positive `values` at (shape, scale)."""
    x = np.asarray(values, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("log-likelihood requires strictly positive values")
    n = x.size
    z = x / scale
    return float(n * (np.log(shape) - np.log(scale))
                 + (shape - 1.0) * np.sum(np.log(z))
                 - np.sum(z ** shape))
