"""Uniform time discretization of [0, T]."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*h, k = 0..M, with h = T/M."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ConfigurationError(f"horizon must be positive and finite, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigurationError(f"step count must be a positive integer, got {self.steps}")

    @property
    def h(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)

    def time(self, k: int) -> float:
        # Exact endpoint so that t_M == T.
        return self.horizon if k == self.steps else k * self.h

    def step_containing(self, t: float) -> int:
        """Index k with t in (t_k, t_{k+1}]; t = 0 maps to step 0."""
        if t <= 0.0:
            return 0
        k = math.ceil(t / self.h - 1e-12) - 1
        return min(max(k, 0), self.steps - 1)

    def index_at_or_after(self, t: float) -> int:
        """First grid index k with t_k >= t."""
        return self.step_containing(t) + 1 if t > 0.0 else 0

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.steps * factor)
