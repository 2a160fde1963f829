"""Closed-form evaluator of the co-trained empirical optimal score.

Each data point contributes a Gaussian bump centered at alpha_t * a_i; the
posterior weight of point i is a softmax over

    ln(w_k) - ||a_t - alpha_t a_i||^2 / (2 sigma_t^2) + ln K(z, z_i)

with per-point domain weights w_t = w/N, w_s = (1-w)/M.  All weight arithmetic
happens in log space: the raw exponents underflow already for action dims as
small as 8.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from .errors import ConfigError, NumericError, ShapeError, UndefinedRatioError
from .schedule import NoiseSchedule, alpha_sigma

TARGET = "target"
SOURCE = "source"


@dataclass(frozen=True)
class LabeledDataset:
    """Paired (obs, action, domain) samples for the target and source domains."""

    obs: np.ndarray        # (n, d_obs)
    actions: np.ndarray    # (n, d_act)
    is_target: np.ndarray  # (n,) bool

    def __post_init__(self):
        obs = np.asarray(self.obs, dtype=float)
        act = np.asarray(self.actions, dtype=float)
        tgt = np.asarray(self.is_target, dtype=bool)
        if obs.ndim != 2 or act.ndim != 2 or tgt.ndim != 1:
            raise ShapeError("obs/actions must be 2-d, is_target 1-d")
        if not (obs.shape[0] == act.shape[0] == tgt.shape[0]):
            raise ShapeError("obs, actions and is_target must have equal length")
        if obs.shape[0] < 1:
            raise ConfigError("dataset needs at least one point")
        if not (np.isfinite(obs).all() and np.isfinite(act).all()):
            raise NumericError("dataset contains non-finite values")
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "actions", act)
        object.__setattr__(self, "is_target", tgt)

    @property
    def n_target(self) -> int:
        return int(self.is_target.sum())

    @property
    def m_source(self) -> int:
        return int((~self.is_target).sum())

    @property
    def d_obs(self) -> int:
        return self.obs.shape[1]

    @property
    def d_act(self) -> int:
        return self.actions.shape[1]

    def domain_names(self) -> list[str]:
        return [TARGET if t else SOURCE for t in self.is_target]


@dataclass(frozen=True)
class PosteriorWeights:
    g: np.ndarray
    domain_weight_target: float
    domain_weight_source: float


@dataclass(frozen=True)
class MixtureOracle:
    data: LabeledDataset
    w: float
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    kernel: str = "uniform"
    bandwidth: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.w <= 1.0):
            raise ConfigError(f"w must lie in [0, 1], got {self.w}")
        if self.w == 1.0 and self.data.n_target == 0:
            raise ConfigError("w=1 with an empty target split")
        if self.w == 0.0 and self.data.m_source == 0:
            raise ConfigError("w=0 with an empty source split")
        if self.kernel not in ("uniform", "gaussian-rbf"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "gaussian-rbf":
            h = self.bandwidth
            if h is None:
                h = median_bandwidth(self.data.obs)
            if not (h > 0):
                raise ConfigError(f"bandwidth must be positive, got {h}")
            object.__setattr__(self, "bandwidth", float(h))


def median_bandwidth(obs: np.ndarray) -> float:
    """Median pairwise observation distance (median heuristic)."""
    if obs.shape[0] < 2:
        return 1.0
    d = np.median(pdist(obs))
    return float(d) if d > 0 else 1.0


def _log_domain_weights(oracle: MixtureOracle) -> np.ndarray:
    """ln(w/N) per target point, ln((1-w)/M) per source point."""
    data = oracle.data
    with np.errstate(divide="ignore"):
        log_wt = np.log(oracle.w) - np.log(max(data.n_target, 1))
        log_ws = np.log1p(-oracle.w) - np.log(max(data.m_source, 1))
    return np.where(data.is_target, log_wt, log_ws)


def _prepare_queries(oracle: MixtureOracle, a_t, z):
    a = np.asarray(a_t, dtype=float)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != oracle.data.d_act:
        raise ShapeError(f"query shape {np.shape(a_t)} incompatible with d_act={oracle.data.d_act}")
    if not np.isfinite(a).all():
        raise NumericError("non-finite query point")
    zz = None
    if z is not None:
        if oracle.kernel != "gaussian-rbf":
            raise ConfigError("conditioning on z requires the gaussian-rbf kernel")
        zz = np.asarray(z, dtype=float)
        if zz.ndim == 1:
            zz = np.broadcast_to(zz[None, :], (a.shape[0], zz.shape[0]))
        if zz.shape != (a.shape[0], oracle.data.d_obs):
            raise ShapeError(f"z shape {np.shape(z)} incompatible with d_obs={oracle.data.d_obs}")
        if not np.isfinite(zz).all():
            raise NumericError("non-finite observation")
    return a, zz, single


def _logits(oracle: MixtureOracle, a: np.ndarray, t: float, z: np.ndarray | None) -> np.ndarray:
    """(n_query, n_points) unnormalized log posterior weights."""
    alpha, sigma = alpha_sigma(oracle.schedule, t)
    centers = alpha * oracle.data.actions
    diff = a[:, None, :] - centers[None, :, :]
    sq = np.einsum("qnd,qnd->qn", diff, diff)
    logits = _log_domain_weights(oracle)[None, :] - sq / (2.0 * sigma * sigma)
    if z is not None:
        zdiff = z[:, None, :] - oracle.data.obs[None, :, :]
        zsq = np.einsum("qnd,qnd->qn", zdiff, zdiff)
        logits = logits - zsq / (2.0 * oracle.bandwidth ** 2)
    return logits


def posterior_matrix(oracle: MixtureOracle, a_t, t: float, z=None) -> np.ndarray:
    """Softmax posterior weights g for a batch of queries, rows summing to 1."""
    a, zz, _ = _prepare_queries(oracle, a_t, z)
    logits = _logits(oracle, a, t, zz)
    lse = logsumexp(logits, axis=1, keepdims=True)
    return np.exp(logits - lse)


def posterior_weights(oracle: MixtureOracle, a_t, t: float, z=None) -> PosteriorWeights:
    """Per-point posterior weights and the aggregated domain weight for one query."""
    a, zz, single = _prepare_queries(oracle, a_t, z)
    if not single:
        raise ShapeError("posterior_weights takes a single query point")
    logits = _logits(oracle, a, t, zz)[0]
    lse = logsumexp(logits)
    g = np.exp(logits - lse)
    tgt = oracle.data.is_target
    # domain masses via log-sum-exp differences: exact 0/1 at the w endpoints
    with np.errstate(invalid="ignore"):
        w_t = float(np.exp(logsumexp(logits[tgt]) - lse)) if tgt.any() else 0.0
        w_s = float(np.exp(logsumexp(logits[~tgt]) - lse)) if (~tgt).any() else 0.0
    return PosteriorWeights(g=g, domain_weight_target=w_t, domain_weight_source=w_s)


def mixture_score(oracle: MixtureOracle, a_t, t: float, z=None) -> np.ndarray:
    """Co-trained optimal score: sum_i g_i * (alpha_t a_i - a_t) / sigma_t^2."""
    a, zz, single = _prepare_queries(oracle, a_t, z)
    g = posterior_matrix(oracle, a, t, zz)
    actions = oracle.data.actions
    active = np.isfinite(_log_domain_weights(oracle))
    if not active.all():
        # w endpoints: exclude the weightless domain so the reduction to the
        # single-domain score is bit-exact, not just within rounding
        g = g[:, active]
        actions = actions[active]
    alpha, sigma = alpha_sigma(oracle.schedule, t)
    score = (alpha * (g @ actions) - a) / (sigma * sigma)
    return score[0] if single else score


def domain_weight(oracle: MixtureOracle, a_t, t: float, z=None) -> float:
    """Dynamic target-domain weight w_hat_t in [0, 1]."""
    return posterior_weights(oracle, a_t, t, z).domain_weight_target


def relative_weight_ratio(oracle: MixtureOracle, idx_target: int, idx_source: int,
                          a_t, t: float) -> float:
    """g_target / g_source for one target and one source point.

    Evaluates (w/N)/((1-w)/M) * exp((r_s^2 - r_t^2) d / 2) in log space;
    returns +inf when the source weight is exactly zero.
    """
    data = oracle.data
    if not data.is_target[idx_target]:
        raise ConfigError(f"index {idx_target} does not address a target point")
    if data.is_target[idx_source]:
        raise ConfigError(f"index {idx_source} does not address a source point")
    a, _, single = _prepare_queries(oracle, a_t, None)
    if not single:
        raise ShapeError("relative_weight_ratio takes a single query point")
    logits = _logits(oracle, a, t, None)[0]
    log_num, log_den = logits[idx_target], logits[idx_source]
    if np.isneginf(log_num) and np.isneginf(log_den):
        raise UndefinedRatioError("both weights are zero")
    if np.isneginf(log_den):
        return float("inf")
    with np.errstate(over="ignore"):
        return float(np.exp(log_num - log_den))
