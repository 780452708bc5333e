"""Population diversity (SPDI) and the explore/exploit rate switch.

SPDI is the mean pairwise Euclidean distance between chromosome encodings.
The coordinator compares it to a threshold fixed at a fraction of the initial
diversity and picks one of two (crossover, mutation) rate pairs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist


class UndefinedDiversityError(ValueError):
    """Diversity needs at least two members."""


class Mode(str, Enum):
    EXPLOIT = "exploit"
    EXPLORE = "explore"


@dataclass(frozen=True)
class DiversityConfig:
    p_cross_high: float = 0.9
    p_cross_low: float = 0.6
    p_mut_high: float = 0.3
    p_mut_low: float = 0.05
    tau_fraction: float = 0.5
    epsilon_guard: float = 1e-12

    def __post_init__(self):
        for low, high, name in (
            (self.p_cross_low, self.p_cross_high, "p_cross"),
            (self.p_mut_low, self.p_mut_high, "p_mut"),
        ):
            if not 0.0 <= low <= high <= 1.0:
                raise ValueError(f"{name} rates must satisfy 0 <= low <= high <= 1")
        if not 0.0 < self.tau_fraction < 1.0:
            raise ValueError("tau_fraction must lie in (0, 1)")
        if self.epsilon_guard < 0:
            raise ValueError("epsilon_guard must be >= 0")


@dataclass(frozen=True)
class RateDecision:
    p_cross: float
    p_mut: float
    mode: Mode
    spdi_value: float
    tau: float


@dataclass(frozen=True)
class ThresholdState:
    initial_diversity: float
    tau: float


def pairwise_distance(u, v) -> float:
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.linalg.norm(u - v))


def spdi(encodings: Sequence, counters: Optional[Counter] = None) -> float:
    """Mean distance over all unordered pairs, summed in fixed index order.

    ``counters["distance_computations"]`` is advanced by the number of pairs.
    """
    matrix = np.asarray(encodings, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise UndefinedDiversityError("diversity is undefined for fewer than two members")
    distances = pdist(matrix, metric="euclidean")
    if counters is not None:
        counters["distance_computations"] += int(distances.size)
    return float(np.sum(distances) / distances.size)


def init_threshold(encodings: Sequence, config: DiversityConfig, counters: Optional[Counter] = None) -> ThresholdState:
    d0 = spdi(encodings, counters)
    return ThresholdState(initial_diversity=d0, tau=config.tau_fraction * d0)


def decide_rates(spdi_value: float, threshold: ThresholdState, config: DiversityConfig) -> RateDecision:
    if spdi_value < 0:
        raise ValueError(f"SPDI cannot be negative, got {spdi_value}")
    # values within the guard below tau count as at-threshold
    if spdi_value >= threshold.tau - config.epsilon_guard:
        return RateDecision(config.p_cross_high, config.p_mut_low, Mode.EXPLOIT, spdi_value, threshold.tau)
    return RateDecision(config.p_cross_low, config.p_mut_high, Mode.EXPLORE, spdi_value, threshold.tau)


def fixed_rates(spdi_value: float, threshold: ThresholdState, config: DiversityConfig) -> RateDecision:
    """Rates with adaptive control switched off: always the exploit pair."""
    return RateDecision(config.p_cross_high, config.p_mut_low, Mode.EXPLOIT, spdi_value, threshold.tau)
