"""Anomaly-map thresholding.

Maps are binarized either at a caller-supplied value or at an automatic
threshold that maximizes the between-class variance of the map's
intensity histogram (Otsu's criterion) over 256 uniform bins spanning
[0, 1]. Class weights and means are computed from exact integer bin
counts, so the split validity test (both classes non-empty) never
suffers from float round-off.
"""
from __future__ import annotations

import numpy as np

from .imaging import as_anomaly_map

__all__ = [
    "threshold_fixed",
    "otsu_threshold",
    "otsu_variances",
    "anomaly_histogram",
    "parse_threshold_spec",
]

_DEFAULT_BINS = 256


def parse_threshold_spec(spec: str):
    """Parse a threshold mode string: ``"otsu"`` or ``"fixed:<value>"``.

    Returns ("otsu", None) or ("fixed", value with value in [0, 1]).
    """
    if spec == "otsu":
        return "otsu", None
    if spec.startswith("fixed:"):
        try:
            tau = float(spec[len("fixed:"):])
        except ValueError:
            raise ValueError(f"bad fixed threshold in {spec!r}") from None
        if not 0.0 <= tau <= 1.0:
            raise ValueError("fixed threshold must lie in [0, 1]")
        return "fixed", tau
    raise ValueError(f"unknown threshold spec {spec!r}")


def threshold_fixed(amap: np.ndarray, tau: float) -> np.ndarray:
    """Binarize a map at tau: mask = 1 where value >= tau."""
    amap = as_anomaly_map(amap)
    if not 0.0 <= tau <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return (amap >= tau).astype(np.uint8)


def anomaly_histogram(amap: np.ndarray, bins: int = _DEFAULT_BINS) -> np.ndarray:
    """Histogram of map values over ``bins`` uniform bins covering [0, 1].

    Bin i holds values in [i/bins, (i+1)/bins), except the last bin which
    also includes 1.0 exactly. Returns int64 counts.
    """
    amap = as_anomaly_map(amap)
    if bins < 2:
        raise ValueError("need at least 2 bins")
    idx = np.minimum((amap * bins).astype(np.int64), bins - 1)
    return np.bincount(idx.ravel(), minlength=bins)


def otsu_variances(amap: np.ndarray, bins: int = _DEFAULT_BINS) -> np.ndarray:
    """Between-class variance for every split point t = 0 .. bins-2.

    Split t assigns bins [0, t] to the background class and (t, bins-1]
    to the foreground class; the returned sigma_b^2 is in squared
    bin-index units and is 0 wherever either class is empty.
    """
    counts = anomaly_histogram(amap, bins)
    total = int(counts.sum())
    i = np.arange(bins, dtype=np.int64)
    cum_n = np.cumsum(counts)[:-1]            # class-0 count at each split
    cum_w = np.cumsum(i * counts)[:-1]        # class-0 index mass
    w_total = int(np.sum(i * counts))

    n0 = cum_n
    n1 = total - cum_n                        # exact integers
    valid = (n0 > 0) & (n1 > 0)
    mu0 = np.divide(cum_w, n0, out=np.zeros(bins - 1), where=valid)
    mu1 = np.divide(w_total - cum_w, n1, out=np.zeros(bins - 1), where=valid)
    sigma = (n0 / total) * (n1 / total) * (mu0 - mu1) ** 2
    sigma[~valid] = 0.0
    return sigma


def otsu_threshold(amap: np.ndarray, bins: int = _DEFAULT_BINS) -> float:
    """Histogram-optimal threshold of an anomaly map.

    Returns (t* + 1)/bins where t* is the smallest split index maximizing
    the between-class variance. When the map occupies a single bin b (no
    valid split), the threshold falls back to the bin's upper edge
    (b + 1)/bins, so a constant-0 map yields an all-zero mask and a
    constant-1 map an all-one mask.
    """
    sigma = otsu_variances(amap, bins)
    if sigma.max() <= 0.0:
        counts = anomaly_histogram(amap, bins)
        b = int(np.flatnonzero(counts)[0])
        return (b + 1) / bins
    t_star = int(np.argmax(sigma))  # first max = smallest t on ties
    return (t_star + 1) / bins
