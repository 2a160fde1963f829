"""Controlled source/target manifold experiment.

Inputs live on a unit arc in R^3: x = (cos(pi u), sin(pi u), z_dom) + noise,
with z_dom = 0 for the source domain and z_dom = delta_z for the target.  The
output map is y_source(u) = (u, 0.5 sin(2 pi u)); the target adds a constant
action gap.  The target dataset covers only u in [0, 0.5]; the remaining
interval is the out-of-distribution region used to test extrapolation.

``run_sweep`` trains one policy per (w, delta_z, replicate) cell and records
in-distribution and OOD L2 against the exact ground truth together with the
representation measurements (alignment Wasserstein distance, discernibility,
probe accuracy).
"""

from __future__ import annotations

import os
import sys
import time
import traceback
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .cotrain import (
    LABEL_TARGET,
    TrainConfig,
    assemble_input,
    encoder_probe_features,
    train,
)
from .errors import ConfigError
from .metrics import discernibility, linear_probe, wasserstein
from .oracle import LabeledDataset
from .rngtools import substream
from .sampler import SamplerConfig, cfg_score, eps_to_score, sample
from .schedule import NoiseSchedule, alpha_sigma

REGIONS = ("in-dist", "ood")

SWEEP_COLUMNS = ("w", "delta_z", "seed", "method", "l2_in_dist", "l2_ood",
                 "m_align", "d_disc", "probe_acc", "wall_s")


@dataclass(frozen=True)
class ManifoldSpec:
    delta_z: float = 1.0
    action_gap: tuple[float, float] = (0.2, -0.2)
    target_u_range: tuple[float, float] = (0.0, 0.5)
    ood_u_range: tuple[float, float] = (0.5, 1.0)
    n_source: int = 3000
    n_target: int = 30
    obs_noise: float = 0.01

    def __post_init__(self):
        lo, hi = self.target_u_range
        olo, ohi = self.ood_u_range
        if not (0.0 <= lo < hi <= 1.0) or not (0.0 <= olo < ohi <= 1.0):
            raise ConfigError("u ranges must be nondegenerate subintervals of [0, 1]")
        if max(lo, olo) < min(hi, ohi):
            raise ConfigError("target and OOD u ranges must be disjoint")
        if self.n_source < 1 or self.n_target < 1:
            raise ConfigError("sample counts must be >= 1")
        if self.delta_z < 0 or self.obs_noise < 0:
            raise ConfigError("delta_z and obs_noise must be nonnegative")


@dataclass(frozen=True)
class ManifoldTruth:
    """Exact evaluation of both manifold maps."""

    spec: ManifoldSpec

    def y_source(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.stack([u, 0.5 * np.sin(2.0 * np.pi * u)], axis=-1)

    def y_target(self, u) -> np.ndarray:
        return self.y_source(u) + np.asarray(self.spec.action_gap)

    def x_target(self, u) -> np.ndarray:
        """Noiseless target-domain input for latent coordinate u."""
        u = np.asarray(u, dtype=float)
        z = np.full_like(u, self.spec.delta_z)
        return np.stack([np.cos(np.pi * u), np.sin(np.pi * u), z], axis=-1)

    def u_from_x(self, x) -> np.ndarray:
        """Invert a noiseless input back to u (exact on the arc)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.arccos(np.clip(x[:, 0], -1.0, 1.0)) / np.pi

    def predict_exact(self, x) -> np.ndarray:
        return self.y_target(self.u_from_x(x))

    def u_range(self, region: str) -> tuple[float, float]:
        if region == "in-dist":
            return self.spec.target_u_range
        if region == "ood":
            return self.spec.ood_u_range
        raise ConfigError(f"unknown region {region!r}")


def gen_manifold_data(spec: ManifoldSpec, seed: int) -> tuple[LabeledDataset, ManifoldTruth]:
    """Sample the paired datasets; target rows come first."""
    truth = ManifoldTruth(spec)
    rng = substream(seed, "manifold")
    u_t = rng.uniform(*spec.target_u_range, spec.n_target)
    u_s = rng.uniform(0.0, 1.0, spec.n_source)
    x_t = truth.x_target(u_t) + spec.obs_noise * rng.standard_normal((spec.n_target, 3))
    x_s = np.stack([np.cos(np.pi * u_s), np.sin(np.pi * u_s), np.zeros_like(u_s)], axis=-1)
    x_s = x_s + spec.obs_noise * rng.standard_normal((spec.n_source, 3))
    data = LabeledDataset(
        obs=np.concatenate([x_t, x_s]),
        actions=np.concatenate([truth.y_target(u_t), truth.y_source(u_s)]),
        is_target=np.concatenate([np.ones(spec.n_target, bool),
                                  np.zeros(spec.n_source, bool)]),
    )
    return data, truth


def eval_l2(predict, spec: ManifoldSpec, region: str = "in-dist",
            n_eval: int = 64, seed: int = 0) -> float:
    """Mean squared prediction error on noiseless target inputs.

    ``predict`` takes an (n, 3) input array and returns (n, 2) actions;
    stochastic predictors are expected to average their own draws.
    """
    truth = ManifoldTruth(spec)
    lo, hi = truth.u_range(region)
    rng = substream(seed, "eval", region)
    u = rng.uniform(lo, hi, n_eval)
    pred = np.asarray(predict(truth.x_target(u)), dtype=float)
    resid = pred - truth.y_target(u)
    return float((resid ** 2).sum(axis=1).mean())


def make_predictor(denoiser: nn.Mlp, method: str, schedule: NoiseSchedule,
                   sampler_config: SamplerConfig, n_draws: int = 16,
                   guidance_lam: float = 0.0, t_embed_dim: int = 16):
    """Action predictor: mean of ``n_draws`` reverse-diffusion samples per input.

    Conditional methods (cfg, cfg-adda) always run the guidance combination of
    the target-labeled and null-labeled scores, so lam = 0 exercises the same
    pathway as any other guidance scale.
    """
    uses_labels = method in ("cfg", "cfg-adda")

    def predict(x_batch):
        x = np.atleast_2d(np.asarray(x_batch, dtype=float))
        n = x.shape[0]
        obs = np.repeat(x, n_draws, axis=0)
        d_act = denoiser.layer_dims[-1]
        if uses_labels:
            cond = np.broadcast_to(LABEL_TARGET, (obs.shape[0], LABEL_TARGET.size))
            null = np.zeros_like(cond)

        def score_fn(a_t, t):
            if uses_labels:
                inp_c = assemble_input(obs, a_t, t, t_embed_dim, cond)
                inp_u = assemble_input(obs, a_t, t, t_embed_dim, null)
                s_c = eps_to_score(nn.forward(denoiser, inp_c)[0], t, schedule)
                s_u = eps_to_score(nn.forward(denoiser, inp_u)[0], t, schedule)
                return cfg_score(s_c, s_u, guidance_lam)
            inp = assemble_input(obs, a_t, t, t_embed_dim, None)
            return eps_to_score(nn.forward(denoiser, inp)[0], t, schedule)

        draws = sample(score_fn, schedule, sampler_config, d_act, n * n_draws)
        return draws.reshape(n, n_draws, d_act).mean(axis=1)

    return predict


@dataclass(frozen=True)
class SraResult:
    m_align: float
    d_disc: float


def _balanced_indices(is_target: np.ndarray, cap: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    tgt = np.flatnonzero(is_target)
    src = np.flatnonzero(~is_target)
    k = min(tgt.size, src.size, cap)
    tgt_pick = np.sort(rng.choice(tgt, size=k, replace=False)) if tgt.size > k else tgt
    src_pick = np.sort(rng.choice(src, size=k, replace=False)) if src.size > k else src
    return tgt_pick, src_pick


def sra_measure(data: LabeledDataset, net: nn.Mlp, t: float,
                schedule: NoiseSchedule, method: str = "vanilla",
                subsample: int = 1024, seed: int = 0,
                t_embed_dim: int = 16) -> SraResult:
    """Structured-representation-alignment pair (M_align, D_disc).

    Encoder features are measured with the noise-free probe; at most
    ``subsample`` points per domain enter the distance computation.
    """
    with_labels = method in ("cfg", "cfg-adda")
    z = encoder_probe_features(net, data.obs, data.actions, t, schedule,
                               t_embed_dim, with_labels)
    rng = substream(seed, "sra-subsample")
    tgt = np.flatnonzero(data.is_target)
    src = np.flatnonzero(~data.is_target)
    if tgt.size > subsample:
        tgt = np.sort(rng.choice(tgt, size=subsample, replace=False))
    if src.size > subsample:
        src = np.sort(rng.choice(src, size=subsample, replace=False))
    m_align = wasserstein(z[tgt], z[src])
    keep = np.concatenate([tgt, src])
    feat_data = LabeledDataset(obs=z[keep], actions=data.actions[keep],
                               is_target=data.is_target[keep])
    d_disc = discernibility(feat_data, t, schedule, kernel="gaussian-rbf")
    return SraResult(m_align=m_align, d_disc=d_disc)


def probe_accuracy(data: LabeledDataset, features: np.ndarray, cap: int = 1024,
                   seed: int = 0) -> float:
    """Linear-probe accuracy on class-balanced features.

    The raw splits are heavily imbalanced (N << M); the probe sees equal
    counts per domain so chance level stays at 0.5.
    """
    rng = substream(seed, "probe-balance")
    tgt, src = _balanced_indices(data.is_target, cap, rng)
    keep = np.concatenate([tgt, src])
    return linear_probe(features[keep], data.is_target[keep].astype(int), seed=seed)


@dataclass(frozen=True)
class SweepConfig:
    w_values: tuple = (0.0, 0.005, 0.016, 0.1, 0.3, 0.5, 0.8, 1.0)
    delta_z_values: tuple = (0.0, 0.25, 1.0, 3.0, 10.0)
    replicates: int = 3
    manifold: ManifoldSpec = field(default_factory=ManifoldSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=10_000, width=64))
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    n_eval: int = 64
    n_draws: int = 16
    feature_t: float = 0.5
    base_seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if not self.w_values or not self.delta_z_values:
            raise ConfigError("sweep grid must be nonempty")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")


@dataclass
class SweepRow:
    w: float
    delta_z: float
    seed: int
    method: str
    l2_in_dist: float
    l2_ood: float
    m_align: float
    d_disc: float
    probe_acc: float
    wall_s: float
    error: str | None = None

    def as_record(self) -> dict:
        return {k: getattr(self, k) for k in SWEEP_COLUMNS}


def run_cell(config: SweepConfig, iw: int, idz: int, rep: int) -> SweepRow:
    """Train and evaluate a single sweep cell; failures become NaN rows."""
    w = float(config.w_values[iw])
    dz = float(config.delta_z_values[idz])
    t0 = time.perf_counter()
    try:
        cell = substream(config.base_seed, "cell", iw, idz, rep)
        data_seed, train_seed, eval_seed, metric_seed = (
            int(s) for s in cell.integers(0, 2 ** 62, 4))
        spec = replace(config.manifold, delta_z=dz)
        data, _ = gen_manifold_data(spec, data_seed)
        tconf = replace(config.train, w=w, seed=train_seed)
        schedule = NoiseSchedule()
        result = train(data, tconf, schedule)
        predictor = make_predictor(
            result.denoiser, tconf.method, schedule,
            replace(config.sampler, seed=eval_seed),
            n_draws=config.n_draws, t_embed_dim=tconf.t_embed_dim)
        l2_in = eval_l2(predictor, spec, "in-dist", config.n_eval, eval_seed)
        l2_ood = eval_l2(predictor, spec, "ood", config.n_eval, eval_seed)
        sra = sra_measure(data, result.denoiser, config.feature_t, schedule,
                          tconf.method, seed=metric_seed,
                          t_embed_dim=tconf.t_embed_dim)
        feats = encoder_probe_features(
            result.denoiser, data.obs, data.actions, config.feature_t,
            schedule, tconf.t_embed_dim, tconf.uses_labels)
        acc = probe_accuracy(data, feats, seed=metric_seed)
        return SweepRow(w=w, delta_z=dz, seed=rep, method=tconf.method,
                        l2_in_dist=l2_in, l2_ood=l2_ood,
                        m_align=sra.m_align, d_disc=sra.d_disc, probe_acc=acc,
                        wall_s=time.perf_counter() - t0)
    except Exception:  # noqa: BLE001 - per-cell failures must not kill the sweep
        err = traceback.format_exc(limit=4)
        print(f"sweep cell (w={w}, delta_z={dz}, rep={rep}) failed:\n{err}",
              file=sys.stderr)
        return SweepRow(w=w, delta_z=dz, seed=rep, method=config.train.method,
                        l2_in_dist=float("nan"), l2_ood=float("nan"),
                        m_align=float("nan"), d_disc=float("nan"),
                        probe_acc=float("nan"),
                        wall_s=time.perf_counter() - t0, error=err)


def _run_cell_star(args) -> tuple[tuple[int, int, int], SweepRow]:
    config, iw, idz, rep = args
    return (idz, iw, rep), run_cell(config, iw, idz, rep)


def run_sweep(config: SweepConfig) -> list[SweepRow]:
    """Run every (w, delta_z, replicate) cell; rows come back in grid order."""
    tasks = [(config, iw, idz, rep)
             for idz in range(len(config.delta_z_values))
             for iw in range(len(config.w_values))
             for rep in range(config.replicates)]
    results: dict[tuple[int, int, int], SweepRow] = {}
    jobs = max(1, config.jobs)
    if jobs == 1:
        for task in tasks:
            key, row = _run_cell_star(task)
            results[key] = row
    else:
        import multiprocessing as mp

        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        ctx = mp.get_context("spawn")
        with ctx.Pool(jobs) as pool:
            for key, row in pool.imap_unordered(_run_cell_star, tasks):
                results[key] = row
    return [results[k] for k in sorted(results)]
