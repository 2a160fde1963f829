"""Alignment and discernibility measurement.

Optimal transport comes in two routes that are kept deliberately independent:
a log-domain Sinkhorn solver for entropic plans and an exact Hungarian solver
for small uniform problems (also the test oracle for Sinkhorn).  The
Wasserstein and Gromov-Wasserstein distances follow the measurement protocol
used throughout: per-domain feature standardization for W2, pooled-mean cost
normalization for GW.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import betainc, expit, logsumexp

from . import nn
from .errors import (
    ConfigError,
    IncompleteDesignError,
    NumericError,
    ShapeError,
    UndefinedCorrelationError,
)
from .oracle import LabeledDataset, median_bandwidth
from .rngtools import substream
from .schedule import NoiseSchedule, alpha_sigma

EXACT_OT_MAX = 512


@dataclass(frozen=True)
class SinkhornResult:
    plan: np.ndarray
    value: float
    iterations: int
    converged: bool


def sinkhorn(cost, a, b, epsilon: float, max_iter: int = 2000,
             tol: float = 1e-9) -> SinkhornResult:
    """Entropic OT via log-domain Sinkhorn iterations.

    Marginal violation is measured in L1 after each full sweep; a sweep ends
    with exact column marginals, so only the row residual is monitored.
    """
    C = np.asarray(cost, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if C.ndim != 2 or C.shape != (a.size, b.size):
        raise ShapeError(f"cost shape {C.shape} incompatible with weights {a.size}, {b.size}")
    if not np.isfinite(C).all():
        raise NumericError("cost matrix contains non-finite entries")
    if (a < 0).any() or (b < 0).any():
        raise ConfigError("weights must be nonnegative")
    if abs(a.sum() - 1.0) > 1e-8 or abs(b.sum() - 1.0) > 1e-8:
        raise ConfigError("weights must each sum to 1")
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")

    logK = -C / epsilon
    with np.errstate(divide="ignore"):
        loga = np.log(a)
        logb = np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f = loga - logsumexp(logK + g[None, :], axis=1)
        g = logb - logsumexp(logK + f[:, None], axis=0)
        plan = np.exp(f[:, None] + logK + g[None, :])
        err = np.abs(plan.sum(axis=1) - a).sum()
        if err < tol:
            converged = True
            break
    plan = np.exp(f[:, None] + logK + g[None, :])
    if not converged:
        warnings.warn(f"sinkhorn did not converge in {max_iter} iterations", RuntimeWarning)
    return SinkhornResult(plan=plan, value=float((plan * C).sum()),
                          iterations=it, converged=converged)


def hungarian(cost) -> tuple[np.ndarray, float]:
    """O(n^3) Hungarian method with potentials; returns (assignment, value)."""
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeError(f"cost must be square, got {C.shape}")
    if not np.isfinite(C).all():
        raise NumericError("cost matrix contains non-finite entries")
    n = C.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)       # column -> assigned row (1-based, 0 free)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = C[i0 - 1, :] - u[i0] - v[1:]
            unused = ~used[1:]
            improve = unused & (cur < minv[1:])
            minv[1:][improve] = cur[improve]
            way[1:][improve] = j0
            masked = np.where(unused, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][unused] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    value = float(C[np.arange(n), assignment].sum())
    return assignment, value


def exact_ot(cost) -> tuple[np.ndarray, float]:
    """Exact assignment for small uniform-weight problems (n <= 512)."""
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeError(f"cost must be square, got {C.shape}")
    if C.shape[0] > EXACT_OT_MAX:
        raise ConfigError(f"exact solver limited to n <= {EXACT_OT_MAX}, got {C.shape[0]}")
    return hungarian(C)


def standardize(X: np.ndarray) -> np.ndarray:
    """Per-dimension zero mean, unit variance; constant dims stay centered."""
    Xc = X - X.mean(axis=0)
    std = Xc.std(axis=0)
    scale = np.where(std > 1e-12, std, 1.0)
    return Xc / scale


def wasserstein(X, Y, normalize: bool = True) -> float:
    """W2 between two point clouds (squared-Euclidean ground cost).

    Exact assignment when both clouds have the same size <= 512; entropic
    Sinkhorn with epsilon = 0.05 * mean cost otherwise.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ConfigError("point sets must be nonempty")
    if normalize:
        X = standardize(X)
        Y = standardize(Y)
    C = cdist(X, Y, metric="sqeuclidean")
    mean_c = float(C.mean())
    if mean_c <= 0:
        return 0.0
    n, m = C.shape
    if n == m and n <= EXACT_OT_MAX:
        _, total = exact_ot(C)
        value = total / n
    else:
        res = sinkhorn(C, np.full(n, 1.0 / n), np.full(m, 1.0 / m),
                       epsilon=0.05 * mean_c)
        value = res.value
    return float(np.sqrt(max(value, 0.0)))


def gromov_wasserstein(X, Y, epsilon: float = 0.01, max_iter: int = 100,
                       tol: float = 1e-9, inner_max_iter: int = 2000) -> float:
    """Entropic Gromov-Wasserstein (square loss) between intra-domain geometries.

    Both squared-Euclidean cost matrices are divided by their pooled mean, the
    plan starts at the uniform product coupling, and each linearization is
    solved with Sinkhorn.  Returns the square-loss GW objective at the
    converged plan (entropy term excluded).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ConfigError("point sets must be nonempty")
    CX = cdist(X, X, metric="sqeuclidean")
    CY = cdist(Y, Y, metric="sqeuclidean")
    pooled = (CX.sum() + CY.sum()) / (CX.size + CY.size)
    if pooled <= 0:
        return 0.0
    CX = CX / pooled
    CY = CY / pooled
    n, m = CX.shape[0], CY.shape[0]
    a = np.full(n, 1.0 / n)
    b = np.full(m, 1.0 / m)
    constC = (CX ** 2 @ a)[:, None] + (CY ** 2 @ b)[None, :]
    P = np.outer(a, b)
    converged = False
    for _ in range(max_iter):
        M = constC - 2.0 * CX @ P @ CY
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = sinkhorn(M, a, b, epsilon=epsilon, max_iter=inner_max_iter)
        delta = np.abs(res.plan - P).sum()
        P = res.plan
        if delta < tol:
            converged = True
            break
    if not converged:
        warnings.warn("gromov_wasserstein plan did not converge", RuntimeWarning)
    M = constC - 2.0 * CX @ P @ CY
    return float((M * P).sum())


def bhattacharyya_overlap(data: LabeledDataset, t: float, schedule: NoiseSchedule,
                          feature_weight: float = 1.0) -> float:
    """Mean over target points of the best cross-domain Gaussian overlap.

    Equal-covariance Bhattacharyya coefficient exp(-D/(8 sigma_t^2)) with
    D = alpha_t^2 ||a_i - a_j||^2 + feature_weight ||z_i - z_j||^2.
    """
    if data.n_target == 0 or data.m_source == 0:
        raise ConfigError("both domains must be nonempty")
    alpha, sigma = alpha_sigma(schedule, t)
    tgt = data.is_target
    D = alpha ** 2 * cdist(data.actions[tgt], data.actions[~tgt], metric="sqeuclidean")
    if feature_weight != 0.0:
        D = D + feature_weight * cdist(data.obs[tgt], data.obs[~tgt], metric="sqeuclidean")
    bc = np.exp(-D / (8.0 * sigma ** 2))
    return float(bc.max(axis=1).mean())


def linear_probe(features, labels, seed: int = 0) -> float:
    """Held-out accuracy of a 2-layer MLP domain classifier.

    80/20 stratified split, hidden width 64, 2000 full-batch Adam steps on
    binary cross-entropy.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels).astype(int)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeError("features must be 2-d with one label per row")
    classes = np.unique(y)
    if classes.size < 2:
        raise ConfigError("probe needs two classes")
    counts = [(y == c).sum() for c in classes]
    if min(counts) < 20:
        raise ConfigError(f"need >= 20 samples per class, got {counts}")

    rng = substream(seed, "probe-split")
    train_idx, test_idx = [], []
    for c in classes:
        idx = np.flatnonzero(y == c)
        perm = rng.permutation(idx)
        cut = int(round(0.8 * idx.size))
        train_idx.append(perm[:cut])
        test_idx.append(perm[cut:])
    train = np.concatenate(train_idx)
    test = np.concatenate(test_idx)

    net = nn.init_mlp((X.shape[1], 64, 1), substream(seed, "probe-init"), encoder_split=1)
    state = nn.init_adam(net.parameters(), lr=1e-3)
    Xtr, ytr = X[train], (y[train] == classes[1]).astype(float)
    for _ in range(2000):
        out, cache = nn.forward(net, Xtr)
        logit = out[:, 0]
        grad = (expit(logit) - ytr) / ytr.size
        grads = nn.backward(net, cache, grad[:, None])
        nn.apply_adam(net, state, grads)
    out, _ = nn.forward(net, X[test])
    pred = (out[:, 0] > 0).astype(int)
    truth = (y[test] == classes[1]).astype(int)
    return float((pred == truth).mean())


def discernibility(data: LabeledDataset, t: float, schedule: NoiseSchedule,
                   kernel: str = "gaussian-rbf", bandwidth: float | None = None) -> float:
    """Average peak conditional action density, averaged over the two domains.

    For each domain k and each observation z_i in k, p_k(a^t | z_i) is the
    kernel-weighted Gaussian mixture over k's own points; the max over a^t is
    approximated on the candidate set {alpha_t a_j : j in k}.
    """
    if data.n_target == 0 or data.m_source == 0:
        raise ConfigError("both domains must be nonempty")
    if kernel not in ("uniform", "gaussian-rbf"):
        raise ConfigError(f"unknown kernel {kernel!r}")
    alpha, sigma = alpha_sigma(schedule, t)
    d = data.d_act
    norm_const = (2.0 * np.pi * sigma ** 2) ** (-d / 2.0)
    if kernel == "gaussian-rbf":
        h = bandwidth if bandwidth is not None else median_bandwidth(data.obs)
        if not h > 0:
            raise ConfigError(f"bandwidth must be positive, got {h}")

    per_domain = []
    for mask in (data.is_target, ~data.is_target):
        A = data.actions[mask]
        Z = data.obs[mask]
        n_k = A.shape[0]
        if kernel == "uniform":
            K = np.full((n_k, n_k), 1.0 / n_k)
        else:
            K = np.exp(-cdist(Z, Z, metric="sqeuclidean") / (2.0 * h ** 2))
            K = K / K.sum(axis=1, keepdims=True)
        G = norm_const * np.exp(
            -(alpha ** 2) * cdist(A, A, metric="sqeuclidean") / (2.0 * sigma ** 2)
        )
        density_at_candidates = K @ G
        per_domain.append(float(density_at_candidates.max(axis=1).mean()))
    return 0.5 * (per_domain[0] + per_domain[1])


@dataclass(frozen=True)
class CorrelationResult:
    pearson_r: float
    pearson_p: float
    spearman_r: float
    spearman_p: float


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc * xc).sum())
    sy = np.sqrt((yc * yc).sum())
    if sx <= 0 or sy <= 0:
        raise UndefinedCorrelationError("zero variance input")
    return float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))


def _two_sided_p(r: float, n: int) -> float:
    """P(|T| > t) for t = r sqrt((n-2)/(1-r^2)), via the regularized beta."""
    if abs(r) >= 1.0:
        return 0.0
    df = n - 2
    t2 = r * r * df / (1.0 - r * r)
    return float(betainc(df / 2.0, 0.5, df / (df + t2)))


def correlations(x, y) -> CorrelationResult:
    """Pearson and Spearman coefficients with two-sided Student-t p-values."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("x and y must be 1-d of equal length")
    if x.size < 3:
        raise ConfigError(f"need n >= 3, got {x.size}")
    r = _pearson(x, y)
    rs = _pearson(_average_ranks(x), _average_ranks(y))
    return CorrelationResult(
        pearson_r=r, pearson_p=_two_sided_p(r, x.size),
        spearman_r=rs, spearman_p=_two_sided_p(rs, x.size),
    )


@dataclass(frozen=True)
class AnovaShares:
    share_a: float
    share_b: float
    share_interaction: float
    share_residual: float
    degenerate: bool
    ss_total: float

    def as_dict(self) -> dict:
        return {
            "share_a": self.share_a,
            "share_b": self.share_b,
            "share_interaction": self.share_interaction,
            "share_residual": self.share_residual,
            "degenerate": self.degenerate,
            "ss_total": self.ss_total,
        }


def anova_two_factor(records) -> AnovaShares:
    """Classical balanced two-factor fixed-effects variance decomposition.

    ``records`` is an iterable of mappings with keys factor_a, factor_b and
    response.  The design must form a complete factorial grid with the same
    replicate count in every cell.
    """
    rows = list(records)
    if not rows:
        raise IncompleteDesignError("empty table")
    levels_a = sorted({r["factor_a"] for r in rows})
    levels_b = sorted({r["factor_b"] for r in rows})
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        cells.setdefault((r["factor_a"], r["factor_b"]), []).append(float(r["response"]))
    counts = {k: len(v) for k, v in cells.items()}
    expected = [(la, lb) for la in levels_a for lb in levels_b]
    missing = [k for k in expected if k not in cells]
    if missing:
        raise IncompleteDesignError(f"missing cells: {missing[:4]}")
    reps = set(counts.values())
    if len(reps) != 1:
        raise IncompleteDesignError(f"unbalanced replicate counts: {sorted(reps)}")
    r = reps.pop()

    I, J = len(levels_a), len(levels_b)
    Y = np.array([[cells[(la, lb)] for lb in levels_b] for la in levels_a])  # (I, J, r)
    grand = Y.mean()
    mean_a = Y.mean(axis=(1, 2))
    mean_b = Y.mean(axis=(0, 2))
    mean_ab = Y.mean(axis=2)

    ss_a = r * J * float(((mean_a - grand) ** 2).sum())
    ss_b = r * I * float(((mean_b - grand) ** 2).sum())
    ss_ab = r * float(((mean_ab - mean_a[:, None] - mean_b[None, :] + grand) ** 2).sum())
    ss_res = float(((Y - mean_ab[:, :, None]) ** 2).sum())
    ss_total = float(((Y - grand) ** 2).sum())

    if ss_total <= 1e-300:
        return AnovaShares(0.0, 0.0, 0.0, 0.0, degenerate=True, ss_total=0.0)
    return AnovaShares(
        share_a=ss_a / ss_total,
        share_b=ss_b / ss_total,
        share_interaction=ss_ab / ss_total,
        share_residual=ss_res / ss_total,
        degenerate=False,
        ss_total=ss_total,
    )


def pca_project(features, dims: int = 2, seed: int = 0) -> np.ndarray:
    """Project onto the top principal directions via deflated power iteration."""
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise ShapeError("features must be 2-d")
    n, d = X.shape
    if n < dims:
        raise ConfigError(f"need at least {dims} samples, got {n}")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / max(n - 1, 1)
    rng = substream(seed, "pca")
    V = np.zeros((dims, d))
    for k in range(min(dims, d)):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        for _ in range(10_000):
            v_new = C @ v
            norm = np.linalg.norm(v_new)
            if norm < 1e-300:
                break  # deflated to (numerical) zero: direction is arbitrary
            v_new /= norm
            if min(np.linalg.norm(v_new - v), np.linalg.norm(v_new + v)) < 1e-13:
                v = v_new
                break
            v = v_new
        pivot = int(np.argmax(np.abs(v)))
        if v[pivot] < 0:
            v = -v
        V[k] = v
        lam = float(v @ C @ v)
        C = C - lam * np.outer(v, v)
    return Xc @ V.T


def subsample_rows(X: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    """At most ``cap`` rows, drawn without replacement (measurement protocol)."""
    if X.shape[0] <= cap:
        return X
    idx = np.sort(rng.choice(X.shape[0], size=cap, replace=False))
    return X[idx]


@dataclass
class MetricsReport:
    w_distance: float | None = None
    gw_distance: float | None = None
    bhattacharyya: float | None = None
    probe_accuracy: float | None = None
    d_disc: float | None = None
    pearson: tuple[float, float] | None = None
    spearman: tuple[float, float] | None = None

    def as_dict(self) -> dict:
        out: dict = {}
        for key, val in self.__dict__.items():
            if val is None:
                continue
            out[key] = list(val) if isinstance(val, tuple) else val
        return out
