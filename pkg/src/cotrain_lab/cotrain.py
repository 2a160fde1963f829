"""Co-training procedures for the toy diffusion policy.

Five methods share one loop: plain mixed-batch denoising score matching
(``vanilla``), Sinkhorn-regularized feature alignment (``ot``), adversarial
feature alignment with a gradient-reversed discriminator (``adda``),
classifier-free guidance with label dropout (``cfg``), and their combination
(``cfg-adda``).  The mixing ratio w enters through batch composition: a batch
of B elements holds round(B*w) target samples, so the expected objective is
w * L_target + (1-w) * L_source.

Regularizers activate only after the warmup step, and the ``promote``
discriminator direction removes the gradient reversal (the discrimination-
promotion ablation).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import nn
from .errors import ConfigError, DivergenceError
from .metrics import sinkhorn
from .oracle import LabeledDataset
from .rngtools import substream
from .schedule import NoiseSchedule, alpha_sigma

METHODS = ("vanilla", "ot", "adda", "cfg", "cfg-adda")
LABEL_DIM = 3
LABEL_TARGET = np.array([1.0, 0.0, 0.0])
LABEL_SOURCE = np.array([0.0, 1.0, 0.0])
# the null token is the all-zeros label vector

DIVERGENCE_LIMIT = 1e6
TRAJECTORY_THIN = 50


@dataclass(frozen=True)
class TrainConfig:
    method: str = "vanilla"
    w: float = 0.5
    batch: int = 256
    steps: int = 20_000
    lr: float = 1e-3
    seed: int = 0
    p_drop: float = 0.2
    lambda_disc: float = 0.1
    lambda_ot: float = 0.1
    warmup: int = 5_000
    disc_direction: str = "reverse"
    grl_strength: float = 1.0
    width: int = 128
    t_embed_dim: int = 16

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if not (0.0 <= self.w <= 1.0):
            raise ConfigError(f"w must lie in [0, 1], got {self.w}")
        if not (0.0 <= self.p_drop < 1.0):
            raise ConfigError(f"p_drop must lie in [0, 1), got {self.p_drop}")
        if self.warmup > self.steps:
            raise ConfigError(f"warmup {self.warmup} exceeds steps {self.steps}")
        if self.disc_direction not in ("reverse", "promote"):
            raise ConfigError(f"disc_direction must be reverse|promote, got {self.disc_direction!r}")
        if self.batch < 1 or self.steps < 1:
            raise ConfigError("batch and steps must be >= 1")

    @property
    def uses_labels(self) -> bool:
        return self.method in ("cfg", "cfg-adda")

    @property
    def uses_disc(self) -> bool:
        return self.method in ("adda", "cfg-adda")

    @property
    def uses_ot(self) -> bool:
        return self.method == "ot"


@dataclass
class TrainReport:
    final_losses: dict
    trajectory: list
    wall_s: float
    checkpoint_path: str | None


@dataclass
class TrainResult:
    report: TrainReport
    denoiser: nn.Mlp
    discriminator: nn.Mlp | None
    config: TrainConfig


def sample_mixed_batch(data: LabeledDataset, w: float, batch: int,
                       rng: np.random.Generator):
    """Mixed batch with round(batch*w) target rows, shuffled."""
    if w > 0.0 and data.n_target == 0:
        raise ConfigError("w > 0 requires a nonempty target split")
    if w < 1.0 and data.m_source == 0:
        raise ConfigError("w < 1 requires a nonempty source split")
    n_t = int(np.floor(batch * w + 0.5))      # round half up
    if w > 0.0:
        n_t = max(n_t, 1)
    if w < 1.0:
        n_t = min(n_t, batch - 1)
    if w == 0.0:
        n_t = 0
    if w == 1.0:
        n_t = batch
    tgt_rows = np.flatnonzero(data.is_target)
    src_rows = np.flatnonzero(~data.is_target)
    picks = []
    if n_t > 0:
        picks.append(tgt_rows[rng.integers(0, tgt_rows.size, n_t)])
    if batch - n_t > 0:
        picks.append(src_rows[rng.integers(0, src_rows.size, batch - n_t)])
    idx = np.concatenate(picks)
    order = rng.permutation(batch)
    idx = idx[order]
    return data.obs[idx], data.actions[idx], data.is_target[idx]


def make_labels(is_target: np.ndarray, rng: np.random.Generator | None = None,
                p_drop: float = 0.0) -> np.ndarray:
    """One-hot environment labels; rows are nulled (zeroed) with prob p_drop."""
    labels = np.where(is_target[:, None], LABEL_TARGET[None, :], LABEL_SOURCE[None, :])
    if p_drop > 0.0:
        if rng is None:
            raise ConfigError("label dropout needs an rng")
        drop = rng.random(is_target.size) < p_drop
        labels = np.where(drop[:, None], 0.0, labels)
    return labels


def assemble_input(obs: np.ndarray, a_t: np.ndarray, t, t_embed_dim: int,
                   labels: np.ndarray | None = None) -> np.ndarray:
    """Denoiser input: concat(obs, noisy action, timestep embedding[, label])."""
    t_arr = np.broadcast_to(np.asarray(t, dtype=float), (obs.shape[0],))
    parts = [obs, a_t, nn.timestep_embed(t_arr, t_embed_dim)]
    if labels is not None:
        parts.append(labels)
    return np.concatenate(parts, axis=1)


def denoiser_input_dim(d_obs: int, d_act: int, config: TrainConfig) -> int:
    return d_obs + d_act + config.t_embed_dim + (LABEL_DIM if config.uses_labels else 0)


def init_denoiser(data: LabeledDataset, config: TrainConfig,
                  rng: np.random.Generator) -> nn.Mlp:
    dims = (denoiser_input_dim(data.d_obs, data.d_act, config),
            config.width, config.width, config.width, data.d_act)
    return nn.init_mlp(dims, rng, encoder_split=2)


def init_discriminator(config: TrainConfig, rng: np.random.Generator) -> nn.Mlp:
    return nn.init_mlp((config.width, 64, 64, 1), rng, encoder_split=1, zero_output=False)


def _dsm_forward(net: nn.Mlp, obs, actions, schedule: NoiseSchedule,
                 rng: np.random.Generator, t_embed_dim: int, labels=None):
    """One DSM draw: loss, output gradient, forward cache."""
    B, d_act = actions.shape
    t = rng.uniform(schedule.t_min, schedule.t_max, B)
    eps = rng.standard_normal((B, d_act))
    alpha, sigma = alpha_sigma(schedule, t)
    a_t = alpha[:, None] * actions + sigma[:, None] * eps
    x = assemble_input(obs, a_t, t, t_embed_dim, labels)
    out, cache = nn.forward(net, x)
    resid = out - eps
    loss = float((resid ** 2).sum() / B)
    grad_out = 2.0 * resid / B
    return loss, grad_out, cache


def dsm_loss(net: nn.Mlp, batch, schedule: NoiseSchedule, rng: np.random.Generator,
             t_embed_dim: int = 16, labels=None):
    """Denoising score-matching loss and full parameter gradients."""
    obs, actions, _ = batch
    if obs.shape[0] == 0:
        raise ConfigError("empty batch")
    loss, grad_out, cache = _dsm_forward(net, obs, actions, schedule, rng,
                                         t_embed_dim, labels)
    return loss, nn.backward(net, cache, grad_out)


@dataclass(frozen=True)
class OtParams:
    epsilon_scale: float = 0.05   # entropic epsilon as a fraction of mean cost
    max_iter: int = 500
    tol: float = 1e-9


def ot_loss(features_t: np.ndarray, features_s: np.ndarray,
            params: OtParams = OtParams()):
    """Sinkhorn transport cost <P, C> with envelope (fixed-plan) gradients."""
    zt = np.atleast_2d(features_t)
    zs = np.atleast_2d(features_s)
    if zt.shape[0] == 0 or zs.shape[0] == 0:
        raise ConfigError("both feature sets must be nonempty")
    diff = zt[:, None, :] - zs[None, :, :]
    C = np.einsum("ijd,ijd->ij", diff, diff)
    mean_c = float(C.mean())
    if mean_c <= 0.0:
        return 0.0, np.zeros_like(zt), np.zeros_like(zs)
    res = sinkhorn(C, np.full(zt.shape[0], 1.0 / zt.shape[0]),
                   np.full(zs.shape[0], 1.0 / zs.shape[0]),
                   epsilon=params.epsilon_scale * mean_c,
                   max_iter=params.max_iter, tol=params.tol)
    P = res.plan
    grad_t = 2.0 * (zt * P.sum(axis=1)[:, None] - P @ zs)
    grad_s = 2.0 * (zs * P.sum(axis=0)[:, None] - P.T @ zt)
    return float(res.value), grad_t, grad_s


@dataclass
class DiscGrads:
    params: nn.Grads
    dfeat_t: np.ndarray
    dfeat_s: np.ndarray


def disc_loss(disc: nn.Mlp, features_t: np.ndarray, features_s: np.ndarray):
    """Binary cross-entropy with source labeled 1, target labeled 0.

    Loss is the sum of the two per-domain expectations, stabilized in logit
    space (an uninformative discriminator scores 2*ln 2).
    """
    zt = np.atleast_2d(features_t)
    zs = np.atleast_2d(features_s)
    if zt.shape[0] == 0 or zs.shape[0] == 0:
        raise ConfigError("both feature sets must be nonempty")
    out_s, cache_s = nn.forward(disc, zs)
    out_t, cache_t = nn.forward(disc, zt)
    l_s, l_t = out_s[:, 0], out_t[:, 0]
    loss = float(np.logaddexp(0.0, -l_s).mean() + np.logaddexp(0.0, l_t).mean())
    dl_s = -(1.0 - expit(l_s)) / l_s.size
    dl_t = expit(l_t) / l_t.size
    g_s = nn.backward(disc, cache_s, dl_s[:, None])
    g_t = nn.backward(disc, cache_t, dl_t[:, None])
    return loss, DiscGrads(params=g_s.add_(g_t), dfeat_t=g_t.dx, dfeat_s=g_s.dx)


def train(data: LabeledDataset, config: TrainConfig,
          schedule: NoiseSchedule | None = None,
          out_dir: str | Path | None = None,
          run_context: dict | None = None) -> TrainResult:
    """Run one co-training job; optionally persist the run directory."""
    schedule = schedule or NoiseSchedule()
    rng = substream(config.seed, "train")
    denoiser = init_denoiser(data, config, substream(config.seed, "init-denoiser"))
    state = nn.init_adam(denoiser.parameters(), lr=config.lr)
    disc = disc_state = None
    if config.uses_disc:
        disc = init_discriminator(config, substream(config.seed, "init-disc"))
        disc_state = nn.init_adam(disc.parameters(), lr=config.lr)

    trajectory = []
    losses = {"dsm": 0.0, "ot": 0.0, "disc": 0.0, "total": 0.0}
    t0 = time.perf_counter()
    for step in range(config.steps):
        obs, actions, is_tgt = sample_mixed_batch(data, config.w, config.batch, rng)
        labels = None
        if config.uses_labels:
            labels = make_labels(is_tgt, rng, config.p_drop)
        loss_dsm, grad_out, cache = _dsm_forward(
            denoiser, obs, actions, schedule, rng, config.t_embed_dim, labels)
        grads = nn.backward(denoiser, cache, grad_out)

        loss_ot = loss_disc = 0.0
        regularize = step >= config.warmup and is_tgt.any() and (~is_tgt).any()
        if regularize and (config.uses_ot or config.uses_disc):
            z = nn.features_from_cache(cache)
            if config.uses_ot:
                loss_ot, g_t, g_s = ot_loss(z[is_tgt], z[~is_tgt])
                feat_grad = np.zeros_like(z)
                feat_grad[is_tgt] = g_t
                feat_grad[~is_tgt] = g_s
                grads.add_(nn.backward_from_features(
                    denoiser, cache, config.lambda_ot * feat_grad))
            if config.uses_disc:
                loss_disc, dg = disc_loss(disc, z[is_tgt], z[~is_tgt])
                feat_grad = np.zeros_like(z)
                feat_grad[is_tgt] = dg.dfeat_t
                feat_grad[~is_tgt] = dg.dfeat_s
                feat_grad *= config.lambda_disc
                if config.disc_direction == "reverse":
                    routed = nn.grl(feat_grad, config.grl_strength)
                else:
                    routed = config.grl_strength * feat_grad
                grads.add_(nn.backward_from_features(denoiser, cache, routed))
                for arr in dg.params.parameters():
                    arr *= config.lambda_disc
                nn.apply_adam(disc, disc_state, dg.params)

        total = loss_dsm + config.lambda_ot * loss_ot + config.lambda_disc * loss_disc
        if not np.isfinite(total) or total > DIVERGENCE_LIMIT:
            raise DivergenceError(step, total)
        nn.apply_adam(denoiser, state, grads)

        losses = {"dsm": loss_dsm, "ot": loss_ot, "disc": loss_disc, "total": total}
        if step % TRAJECTORY_THIN == 0 or step == config.steps - 1:
            trajectory.append({"step": step, **losses})
    wall = time.perf_counter() - t0

    checkpoint_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint_path = str(out / "checkpoint.json")
        _write_run_dir(out, config, denoiser, disc, trajectory, losses, wall,
                       run_context)
    report = TrainReport(final_losses=losses, trajectory=trajectory,
                         wall_s=wall, checkpoint_path=checkpoint_path)
    return TrainResult(report=report, denoiser=denoiser, discriminator=disc,
                       config=config)


def _write_run_dir(out: Path, config: TrainConfig, denoiser: nn.Mlp,
                   disc: nn.Mlp | None, trajectory: list, losses: dict,
                   wall: float, run_context: dict | None) -> None:
    cfg_doc = {"version": 1, "train": asdict(config)}
    if run_context:
        cfg_doc.update(run_context)
    (out / "config.json").write_text(json.dumps(cfg_doc, indent=2, sort_keys=True))
    checkpoint = {"denoiser": nn.mlp_to_dict(denoiser),
                  "discriminator": nn.mlp_to_dict(disc) if disc is not None else None}
    (out / "checkpoint.json").write_text(json.dumps(checkpoint))
    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "total", "dsm", "ot", "disc"])
        for row in trajectory:
            writer.writerow([row["step"], repr(row["total"]), repr(row["dsm"]),
                             repr(row["ot"]), repr(row["disc"])])
    report_doc = {"final_losses": losses, "wall_s": wall,
                  "checkpoint_path": str(out / "checkpoint.json")}
    (out / "report.json").write_text(json.dumps(report_doc, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[nn.Mlp, nn.Mlp | None]:
    with open(path) as fh:
        doc = json.load(fh)
    denoiser = nn.mlp_from_dict(doc["denoiser"])
    disc = nn.mlp_from_dict(doc["discriminator"]) if doc.get("discriminator") else None
    return denoiser, disc


def encoder_probe_features(net: nn.Mlp, obs: np.ndarray, actions: np.ndarray,
                           t: float, schedule: NoiseSchedule,
                           t_embed_dim: int = 16, with_labels: bool = False) -> np.ndarray:
    """Canonical noise-free encoder features for measurement.

    Uses the deterministic eps = 0 corruption a_t = alpha_t * a and the null
    label token, so repeated measurement of the same network is reproducible.
    """
    alpha, _ = alpha_sigma(schedule, t)
    a_t = alpha * actions
    labels = np.zeros((obs.shape[0], LABEL_DIM)) if with_labels else None
    x = assemble_input(obs, a_t, t, t_embed_dim, labels)
    return nn.encoder_features(net, x)
