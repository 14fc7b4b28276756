"""
Registered true sources f*(x, y) used by the experiments.

two_bump:        two Gaussian bumps scaled so that ||f*||_{L2} = 0.54
sine_mode:       sin(pi x) sin(pi y), the first Dirichlet eigenfunction (exact spectral oracle)
indicator_block: indicator of [0.25, 0.75]^2
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from backend.app.utils.errors import ArgumentError

TWO_BUMP_NORM = 0.54

# (amplitude, centre x, centre y, width)
_BUMPS = ((1.0, 0.3, 0.35, 0.08), (0.8, 0.68, 0.62, 0.1))


@dataclass(frozen=True)
class SourcePreset:
    """A true source with an optional spectral expansion (mode list and weights)."""

    name: str
    description: str
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    spectral: Optional[Tuple[Tuple[Tuple[int, int], ...], Tuple[float, ...]]] = None

    def l2_norm(self) -> float:
        return _midpoint_l2_norm(self.func)


def _midpoint_l2_norm(func, resolution: int = 1024) -> float:
    centres = (np.arange(resolution) + 0.5) / resolution
    xs, ys = np.meshgrid(centres, centres)
    values = func(xs.ravel(), ys.ravel())
    return float(math.sqrt(np.mean(values**2)))


def _raw_two_bump(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    total = np.zeros(np.broadcast(x, y).shape)
    for amplitude, cx, cy, width in _BUMPS:
        total = total + amplitude * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * width**2))
    return total


@lru_cache(maxsize=1)
def _two_bump_scale() -> float:
    return TWO_BUMP_NORM / _midpoint_l2_norm(_raw_two_bump)


def two_bump(x, y):
    return _two_bump_scale() * _raw_two_bump(x, y)


def sine_mode(x, y):
    return np.sin(np.pi * np.asarray(x, dtype=np.float64)) * np.sin(np.pi * np.asarray(y, dtype=np.float64))


def indicator_block(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return ((x >= 0.25) & (x <= 0.75) & (y >= 0.25) & (y <= 0.75)).astype(np.float64)


PRESETS: Dict[str, SourcePreset] = {
    "two_bump": SourcePreset("two_bump", "two Gaussian bumps, ||f*||_L2 = 0.54", two_bump),
    "sine_mode": SourcePreset("sine_mode", "sin(pi x) sin(pi y)", sine_mode, spectral=(((1, 1),), (1.0,))),
    "indicator_block": SourcePreset("indicator_block", "indicator of [0.25, 0.75]^2", indicator_block),
}


def get_preset(name: str) -> SourcePreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ArgumentError(f"unknown source preset {name!r}; choose from {sorted(PRESETS)}") from None
