"""Order statistics with linear interpolation between sorted values."""

from __future__ import annotations

import numpy as np

DECILES = np.linspace(0.0, 1.0, 11)


def quantiles(values, probs, axis: int = -1) -> np.ndarray:
    """Quantiles of ``values`` along ``axis`` at each probability in ``probs``.

    Position ``q*(n-1)`` in the sorted sample, interpolated linearly between
    its neighbours. The probability axis comes last in the result.
    """
    v = np.sort(np.asarray(values, dtype=np.float64), axis=axis)
    v = np.moveaxis(v, axis, -1)
    n = v.shape[-1]
    if n == 0:
        raise ValueError("quantiles of an empty sample")
    probs = np.asarray(probs, dtype=np.float64)
    if np.any((probs < 0) | (probs > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    pos = probs * (n - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    return v[..., lo] + frac * (v[..., hi] - v[..., lo])


def five_number_summary(values) -> dict[str, float]:
    """mean, min, Q1, median, Q3, max of a 1-D sample."""
    v = np.asarray(values, dtype=np.float64)
    q = quantiles(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {
        "mean": float(v.mean()),
        "min": float(q[0]),
        "q1": float(q[1]),
        "median": float(q[2]),
        "q3": float(q[3]),
        "max": float(q[4]),
    }
