"""Monte Carlo summaries and deterministic streaming aggregation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    std_err: float
    M: int


@dataclass
class Moments:
    """Running count/mean/M2 per component (Chan et al. pairwise merge)."""

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, values):
        values = np.asarray(values, dtype=float)
        mean = values.mean(axis=0)
        return cls(values.shape[0], mean, ((values - mean) ** 2).sum(axis=0))

    def merge(self, other):
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        return Moments(n, mean, m2)

    @property
    def std_err(self):
        if self.count < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self.m2 / (self.count - 1) / self.count)


def merge_all(parts):
    """Fold a sequence of :class:`Moments` left to right."""
    it = iter(parts)
    acc = next(it)
    for p in it:
        acc = acc.merge(p)
    return acc
