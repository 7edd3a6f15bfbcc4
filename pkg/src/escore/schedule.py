"""Variance-exploding geometric noise schedule and loss weighting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 10.0
    horizon: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")

    def _check_t(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > self.horizon):
            raise ValueError(f"t outside [0, {self.horizon}]")
        return t

    def sigma(self, t):
        """Geometric interpolation sigma_min^(1-t/T) sigma_max^(t/T)."""
        t = self._check_t(t)
        frac = t / self.horizon
        out = self.sigma_min ** (1.0 - frac) * self.sigma_max ** frac
        return out if out.shape else float(out)

    def dsigma2_dt(self, t):
        """Closed-form d[sigma^2]/dt = sigma^2(t) * (2/T) * ln(smax/smin)."""
        s = np.asarray(self.sigma(t))
        rate = (2.0 / self.horizon) * math.log(self.sigma_max / self.sigma_min)
        out = s * s * rate
        return out if out.shape else float(out)

    def weight(self, t):
        """Per-noise-level loss weight lambda(t) = sigma^2(t)."""
        s = np.asarray(self.sigma(t))
        out = s * s
        return out if out.shape else float(out)
