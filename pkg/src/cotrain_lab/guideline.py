"""Mixing-ratio selection guideline and importance-reweighting curve analysis.

The recommended search range runs from the natural ratio w_n = N/(N+M) up to
w_q, where w_q = sqrt(N/M) for strongly skewed datasets (M/N > 5) and the
target-contribution form N*q / ((1-q)*M + N*q) otherwise.  The reweighting
curve g_r(w) tracks how the posterior weight of a target point moves against a
similarly-close source point as w sweeps [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

GAP_ADJUSTMENT = 1.5     # multiplicative upward shift when the domain gap is large
W_HI_CEILING = 0.99      # recommendations stay strictly below 1


@dataclass(frozen=True)
class GuidelineInput:
    n_target: int
    m_source: int
    q: float = 0.8
    gap: str = "small"

    def __post_init__(self):
        if self.n_target < 1 or self.m_source < 1:
            raise ConfigError("dataset sizes must be >= 1")
        if not (0.0 < self.q < 1.0):
            raise ConfigError(f"q must lie in (0, 1), got {self.q}")
        if self.gap not in ("small", "large"):
            raise ConfigError(f"gap must be 'small' or 'large', got {self.gap!r}")


@dataclass(frozen=True)
class RangeRecommendation:
    w_lo: float
    w_hi: float
    degenerate: bool
    notes: tuple[str, ...]


def natural_ratio(n_target: int, m_source: int) -> float:
    """w_n = N / (N + M), equivalent to dataset concatenation."""
    if n_target < 0 or m_source < 0 or n_target + m_source < 1:
        raise ConfigError("need N >= 0, M >= 0, N + M >= 1")
    return n_target / (n_target + m_source)


def upper_ratio(n_target: int, m_source: int, q: float = 0.8) -> float:
    """Upper bound of the search range."""
    if not (0.0 < q < 1.0):
        raise ConfigError(f"q must lie in (0, 1), got {q}")
    if n_target < 1 or m_source < 1:
        raise ConfigError("dataset sizes must be >= 1")
    if m_source / n_target > 5.0:
        return math.sqrt(n_target / m_source)
    return n_target * q / ((1.0 - q) * m_source + n_target * q)


def recommend_range(inp: GuidelineInput, cap_half: bool = False) -> RangeRecommendation:
    """Search range (w_n, w_q), shifted up by 1.5x for large domain gaps.

    The result is clamped so w_lo < w_hi < 1; a degenerate flag records when
    the raw bounds crossed (w_n already at or above w_q).
    """
    w_lo = natural_ratio(inp.n_target, inp.m_source)
    w_hi = upper_ratio(inp.n_target, inp.m_source, inp.q)
    notes: list[str] = []
    if inp.gap == "large":
        w_lo *= GAP_ADJUSTMENT
        w_hi *= GAP_ADJUSTMENT
        notes.append(f"large-gap adjustment x{GAP_ADJUSTMENT} applied")
    if cap_half and w_hi > 0.5:
        w_hi = 0.5
        notes.append("upper bound capped at 0.5")
    if w_hi > W_HI_CEILING:
        w_hi = W_HI_CEILING
        notes.append(f"upper bound clamped below 1 (at {W_HI_CEILING})")
    degenerate = w_lo >= w_hi
    if degenerate:
        w_lo = w_hi * (1.0 - 1e-9)
        notes.append("degenerate range: natural ratio reached the upper bound")
    return RangeRecommendation(w_lo=float(w_lo), w_hi=float(w_hi),
                               degenerate=degenerate, notes=tuple(notes))


@dataclass(frozen=True)
class ReweightCurve:
    """g_r / g_s over a w grid, plus the diagonal intersection point."""

    w: np.ndarray
    g_r: np.ndarray
    g_s: np.ndarray
    ratio: np.ndarray
    w_intersection: float    # g_r(w) = 1 - w, found numerically

    def rows(self) -> list[dict]:
        out = []
        for i in range(self.w.size):
            out.append({"w": float(self.w[i]), "g_r": float(self.g_r[i]),
                        "g_s": float(self.g_s[i]), "ratio": float(self.ratio[i])})
        return out


def _g_r(w: np.ndarray, n_target: int, m_source: int, r_gap: float, d: int) -> np.ndarray:
    # r_gap = r_s^2 - r_t^2; exponent restores the raw Gaussian log-weight gap
    boost = math.exp(min(r_gap * d / 2.0, 700.0))
    num = w / n_target * boost
    den = num + (1.0 - w) / m_source
    with np.errstate(invalid="ignore"):
        out = np.where(den > 0, num / den, 0.0)
    return out


def reweight_curve(n_target: int, m_source: int, w_grid, r_gap: float = 0.0,
                   t: float = 0.5, d: int = 2) -> ReweightCurve:
    """Tabulate g_r, g_s and their ratio across the mixing-ratio grid.

    ``t`` is accepted for interface symmetry with the score-side ops; the
    curve itself depends only on (N, M, r_gap, d) since r_gap is already
    expressed in normalized shell-radius units.
    """
    if n_target < 1 or m_source < 1:
        raise ConfigError("dataset sizes must be >= 1")
    w = np.asarray(w_grid, dtype=float)
    if w.ndim != 1 or (w < 0).any() or (w > 1).any():
        raise ConfigError("w grid must lie in [0, 1]")
    g_r = _g_r(w, n_target, m_source, r_gap, d)
    g_s = 1.0 - g_r
    per_point = (w / n_target) / np.where(w < 1.0, (1.0 - w) / m_source, np.nan)
    boost = math.exp(min(r_gap * d / 2.0, 700.0))
    ratio = np.where(np.isnan(per_point), np.inf, per_point * boost)

    # Intersection of g_r with the diagonal g = 1 - w, by bisection.
    lo, hi = 0.0, 1.0
    f = lambda x: _g_r(np.array([x]), n_target, m_source, r_gap, d)[0] - (1.0 - x)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return ReweightCurve(w=w, g_r=g_r, g_s=g_s, ratio=ratio,
                         w_intersection=0.5 * (lo + hi))
