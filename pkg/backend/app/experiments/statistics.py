"""
Post-processing of Monte Carlo errors: aggregates, normal QQ pairs, tail fractions,
histograms and log-log slopes.
"""

from typing import Optional, Sequence, Tuple

import msgspec
import numpy as np
from scipy import stats

from backend.app.utils.errors import ArgumentError


class Aggregate(msgspec.Struct, forbid_unknown_fields=True):
    """Mean and sample standard deviation (ddof = 1) of a record column."""

    mean: float
    std: float


def aggregate(values: Sequence[float]) -> Aggregate:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ArgumentError("cannot aggregate an empty column")
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return Aggregate(mean=float(np.mean(values)), std=std)


def standardize(values: Sequence[float]) -> np.ndarray:
    """(v - mean) / sample std; all zeros when the spread vanishes."""
    values = np.asarray(values, dtype=np.float64)
    stats_ = aggregate(values)
    if stats_.std == 0.0:
        return np.zeros_like(values)
    return (values - stats_.mean) / stats_.std


def qq_pairs(values: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Ordered standardized sample against standard normal quantiles at (i - 0.5) / R.

    Returns:
        tuple: (sample_quantiles, normal_quantiles), both ascending
    """
    z = np.sort(standardize(values))
    probabilities = (np.arange(1, z.size + 1) - 0.5) / z.size
    return z, stats.norm.ppf(probabilities)


def qq_correlation(sample: np.ndarray, normal: np.ndarray) -> Optional[float]:
    """Pearson correlation of the QQ pairs; None when either side is constant."""
    if sample.size < 2 or np.ptp(sample) == 0.0 or np.ptp(normal) == 0.0:
        return None
    return float(np.corrcoef(sample, normal)[0, 1])


def tail_fraction(values: Sequence[float], k: float = 3.0) -> float:
    """Share of standardized values with |z| > k."""
    z = standardize(values)
    return float(np.mean(np.abs(z) > k))


def histogram(values: Sequence[float], bins: int) -> Tuple[np.ndarray, np.ndarray]:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins)
    return edges, counts


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Least-squares slope of log y against log x.

    Raises:
        ArgumentError: fewer than two points or nonpositive values
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or x.shape != y.shape:
        raise ArgumentError("a slope needs at least two matching points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ArgumentError("log-log slope needs positive values")
    slope, _ = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope)
