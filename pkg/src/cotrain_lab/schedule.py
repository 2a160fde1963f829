"""Variance-preserving cosine noise schedule and noise-shell geometry.

The forward corruption maps a clean point x0 to x_t = alpha(t)*x0 + sigma(t)*eps
with alpha(t) = cos(pi*t/2), sigma(t) = sin(pi*t/2), so alpha^2 + sigma^2 = 1
for every t.  t_min stays strictly positive so sigma never vanishes inside the
score formulas.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

_HALF_PI = 0.5 * np.pi


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "vp-cosine"
    t_min: float = 1e-3
    t_max: float = 1.0

    def __post_init__(self):
        if self.kind != "vp-cosine":
            raise ConfigError(f"unknown schedule kind: {self.kind!r}")
        if not (0.0 < self.t_min < 1.0):
            raise ConfigError(f"t_min must lie in (0, 1), got {self.t_min}")
        if not (self.t_min < self.t_max <= 1.0):
            raise ConfigError(
                f"t_max must lie in (t_min, 1], got {self.t_max} with t_min={self.t_min}"
            )


def _check_t(schedule: NoiseSchedule, t) -> np.ndarray:
    arr = np.asarray(t, dtype=float)
    bad = (arr < schedule.t_min) | (arr > schedule.t_max)
    if np.any(bad):
        offending = float(np.atleast_1d(arr)[np.atleast_1d(bad)][0])
        raise DomainError(
            f"t={offending} outside [{schedule.t_min}, {schedule.t_max}]"
        )
    return arr


def alpha_sigma(schedule: NoiseSchedule, t):
    """Return (alpha(t), sigma(t)); accepts a scalar or an array of times."""
    arr = _check_t(schedule, t)
    return np.cos(_HALF_PI * arr), np.sin(_HALF_PI * arr)


def perturb(schedule: NoiseSchedule, x0, t, eps):
    """Forward corruption alpha_t*x0 + sigma_t*eps."""
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    alpha, sigma = alpha_sigma(schedule, t)
    return alpha * x0 + sigma * eps


def shell_radius(schedule: NoiseSchedule, a_t, a_k, t) -> float:
    """Normalized shell radius ||a_t - alpha_t*a_k|| / (sigma_t * sqrt(d))."""
    a_t = np.asarray(a_t, dtype=float)
    a_k = np.asarray(a_k, dtype=float)
    if a_t.shape != a_k.shape or a_t.ndim != 1:
        raise ShapeError(f"expected equal-length vectors, got {a_t.shape} and {a_k.shape}")
    alpha, sigma = alpha_sigma(schedule, t)
    d = a_t.shape[0]
    return float(np.linalg.norm(a_t - alpha * a_k) / (sigma * np.sqrt(d)))
