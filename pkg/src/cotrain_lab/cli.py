"""Single entry-point command.

Subcommands: gen-data, oracle-sample, reweight, train, eval, sweep, metrics,
guideline.  Data goes to the file or stream named by the subcommand; all
diagnostics go to stderr.  Exit codes: 0 success, 1 runtime failure, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import cotrain, formats, guideline, metrics, toylab
from .errors import CotrainError
from .oracle import MixtureOracle
from .rngtools import substream
from .sampler import SamplerConfig, sample
from .schedule import NoiseSchedule


def _add_gen_data(sub):
    p = sub.add_parser("gen-data", help="generate a toy manifold dataset (JSONL)")
    p.add_argument("--delta-z", type=float, default=1.0)
    p.add_argument("--n-source", type=int, default=3000)
    p.add_argument("--n-target", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)


def cmd_gen_data(args) -> int:
    spec = toylab.ManifoldSpec(delta_z=args.delta_z, n_source=args.n_source,
                               n_target=args.n_target)
    data, _ = toylab.gen_manifold_data(spec, args.seed)
    meta = {"version": 1, "kind": "manifold-meta", "seed": args.seed,
            "spec": asdict(spec)}
    formats.write_dataset_jsonl(data, args.out, meta=meta)
    return 0


def _add_oracle_sample(sub):
    p = sub.add_parser("oracle-sample", help="sample from the analytical mixture score")
    p.add_argument("--data", required=True)
    p.add_argument("--w", type=float, required=True)
    p.add_argument("--kernel", choices=["uniform", "gaussian-rbf"], default="uniform")
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--mode", choices=["ancestral-sde", "probability-flow-ode"],
                   default="ancestral-sde")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle_sample)


def cmd_oracle_sample(args) -> int:
    data = formats.read_dataset_jsonl(args.data)
    schedule = NoiseSchedule()
    oracle = MixtureOracle(data=data, w=args.w, schedule=schedule,
                           kernel=args.kernel, bandwidth=args.bandwidth)
    config = SamplerConfig(mode=args.mode, n_steps=args.steps, seed=args.seed)

    from .oracle import mixture_score

    def score_fn(a_t, t):
        return mixture_score(oracle, a_t, t)

    draws = sample(score_fn, schedule, config, data.d_act, args.n)
    formats.write_samples_csv(draws, args.out)
    return 0


def _add_reweight(sub):
    p = sub.add_parser("reweight", help="importance-reweighting curve g_r(w)")
    p.add_argument("--n", type=int, required=True, help="target dataset size N")
    p.add_argument("--m", type=int, required=True, help="source dataset size M")
    p.add_argument("--r-gap", type=float, default=0.0, help="r_s^2 - r_t^2")
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--w-grid", default=",".join(str(w) for w in np.linspace(0, 1, 101)))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reweight)


def cmd_reweight(args) -> int:
    grid = [float(v) for v in args.w_grid.split(",") if v.strip()]
    curve = guideline.reweight_curve(args.n, args.m, grid, r_gap=args.r_gap,
                                     t=args.t, d=args.d)
    formats.write_reweight_csv(curve.rows(), args.out)
    print(formats.dump_json({"w_intersection": curve.w_intersection}))
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="co-train a denoiser on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=list(cotrain.METHODS), default="vanilla")
    p.add_argument("--w", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lambda-disc", type=float, default=0.1)
    p.add_argument("--lambda-ot", type=float, default=0.1)
    p.add_argument("--p-drop", type=float, default=0.2)
    p.add_argument("--warmup", type=int, default=None,
                   help="default: min(5000, steps // 2)")
    p.add_argument("--disc-direction", choices=["reverse", "promote"], default="reverse")
    p.add_argument("--grl-strength", type=float, default=1.0)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--width", type=int, default=128)
    p.set_defaults(func=cmd_train)


def cmd_train(args) -> int:
    data = formats.read_dataset_jsonl(args.data)
    warmup = args.warmup if args.warmup is not None else min(5000, args.steps // 2)
    config = cotrain.TrainConfig(
        method=args.method, w=args.w, batch=args.batch, steps=args.steps,
        lr=args.lr, seed=args.seed, p_drop=args.p_drop,
        lambda_disc=args.lambda_disc, lambda_ot=args.lambda_ot, warmup=warmup,
        disc_direction=args.disc_direction, grl_strength=args.grl_strength,
        width=args.width)
    meta = formats.read_dataset_meta(args.data)
    context = {"data_path": str(args.data),
               "manifold": meta["spec"] if meta else None,
               "sampler": asdict(SamplerConfig())}
    cotrain.train(data, config, out_dir=args.out_dir, run_context=context)
    return 0


def _add_eval(sub):
    p = sub.add_parser("eval", help="L2 evaluation of a trained run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--region", choices=list(toylab.REGIONS), default="in-dist")
    p.add_argument("--guidance-lambda", type=float, default=0.0)
    p.add_argument("--n-eval", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)


def load_run_config(path: Path) -> dict:
    doc = json.loads(path.read_text())
    if doc.get("version") != 1:
        raise CotrainError(f"{path}: unsupported config version {doc.get('version')!r}")
    known = {"version", "train", "manifold", "sampler", "data_path"}
    unknown = set(doc) - known
    if unknown:
        raise CotrainError(f"{path}: unknown config keys {sorted(unknown)}")
    return doc


def cmd_eval(args) -> int:
    run = Path(args.run)
    doc = load_run_config(run / "config.json")
    if not doc.get("manifold"):
        raise CotrainError("run has no manifold metadata; cannot evaluate ground truth")
    spec = formats.manifold_from_dict(doc["manifold"])
    tconf = cotrain.TrainConfig(**doc["train"])
    denoiser, _ = cotrain.load_checkpoint(run / "checkpoint.json")
    sconf = SamplerConfig(**doc["sampler"])
    sconf = replace(sconf, seed=args.seed)
    predictor = toylab.make_predictor(
        denoiser, tconf.method, NoiseSchedule(), sconf,
        guidance_lam=args.guidance_lambda, t_embed_dim=tconf.t_embed_dim)
    l2 = toylab.eval_l2(predictor, spec, args.region, args.n_eval, args.seed)
    report = {"l2": l2, "region": args.region,
              "guidance_lambda": args.guidance_lambda,
              "n_eval": args.n_eval, "seed": args.seed}
    text = formats.dump_json(report, args.out)
    if args.out is None:
        print(text)
    return 0


def _add_sweep(sub):
    p = sub.add_parser("sweep", help="(w x delta_z) grid sweep with ANOVA")
    p.add_argument("--config", required=True, help="sweep config JSON")
    p.add_argument("--jobs", type=int, default=None,
                   help="default: COTRAIN_LAB_JOBS or 1")
    p.add_argument("--out", required=True, help="results CSV; ANOVA JSON beside it")
    p.set_defaults(func=cmd_sweep)


def load_sweep_config(path, jobs: int | None) -> toylab.SweepConfig:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != 1:
        raise CotrainError(f"{path}: unsupported config version {doc.get('version')!r}")
    known = {"version", "grid", "replicates", "train", "manifold", "sampler",
             "n_eval", "n_draws", "feature_t", "base_seed"}
    unknown = set(doc) - known
    if unknown:
        raise CotrainError(f"{path}: unknown config keys {sorted(unknown)}")
    grid = doc.get("grid", {})
    kwargs = {}
    if "w" in grid:
        kwargs["w_values"] = tuple(float(v) for v in grid["w"])
    if "delta_z" in grid:
        kwargs["delta_z_values"] = tuple(float(v) for v in grid["delta_z"])
    for key in ("replicates", "n_eval", "n_draws", "feature_t", "base_seed"):
        if key in doc:
            kwargs[key] = doc[key]
    if "manifold" in doc:
        kwargs["manifold"] = formats.manifold_from_dict(doc["manifold"])
    if "train" in doc:
        kwargs["train"] = cotrain.TrainConfig(**doc["train"])
    if "sampler" in doc:
        kwargs["sampler"] = SamplerConfig(**doc["sampler"])
    if jobs is None:
        jobs = int(os.environ.get("COTRAIN_LAB_JOBS", "1"))
    kwargs["jobs"] = jobs
    return toylab.SweepConfig(**kwargs)


def cmd_sweep(args) -> int:
    config = load_sweep_config(args.config, args.jobs)
    rows = toylab.run_sweep(config)
    formats.write_sweep_csv(rows, args.out)
    anova_path = Path(args.out).with_suffix(".anova.json")
    table = [{"factor_a": r.w, "factor_b": r.delta_z, "replicate": r.seed,
              "response": r.l2_in_dist} for r in rows]
    finite = all(np.isfinite(r.l2_in_dist) for r in rows)
    if finite:
        shares = metrics.anova_two_factor(table)
        doc = {"factor_a": "w", "factor_b": "delta_z", **shares.as_dict()}
    else:
        doc = {"error": "sweep contains failed cells; ANOVA skipped"}
    formats.dump_json(doc, anova_path)
    failed = sum(1 for r in rows if r.error)
    if failed:
        print(f"{failed} cell(s) failed; see stderr log", file=sys.stderr)
    return 0


def _add_metrics(sub):
    p = sub.add_parser("metrics", help="alignment metrics between two feature files")
    p.add_argument("--features-a", required=True)
    p.add_argument("--features-b", required=True)
    p.add_argument("--metric", choices=["w2", "gw", "probe", "bc", "all"], default="all")
    p.add_argument("--t", type=float, default=0.5, help="diffusion time for bc")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_metrics)


def cmd_metrics(args) -> int:
    A = formats.read_features_csv(args.features_a)
    B = formats.read_features_csv(args.features_b)
    if A.shape[1] != B.shape[1]:
        raise CotrainError(
            f"feature dims differ: {A.shape[1]} vs {B.shape[1]}")
    rng = substream(args.seed, "metrics-subsample")
    A = metrics.subsample_rows(A, 1024, rng)
    B = metrics.subsample_rows(B, 1024, rng)
    report = metrics.MetricsReport()
    want = args.metric
    if want in ("w2", "all"):
        report.w_distance = metrics.wasserstein(A, B)
    if want in ("gw", "all"):
        report.gw_distance = metrics.gromov_wasserstein(A, B)
    if want in ("bc", "all"):
        from .oracle import LabeledDataset

        data = LabeledDataset(
            obs=np.concatenate([A, B]), actions=np.concatenate([A, B]),
            is_target=np.concatenate([np.ones(len(A), bool), np.zeros(len(B), bool)]))
        report.bhattacharyya = metrics.bhattacharyya_overlap(
            data, args.t, NoiseSchedule(), feature_weight=0.0)
    if want in ("probe", "all"):
        X = np.concatenate([A, B])
        y = np.concatenate([np.ones(len(A), int), np.zeros(len(B), int)])
        report.probe_accuracy = metrics.linear_probe(X, y, seed=args.seed)
    text = formats.dump_json(report.as_dict(), args.out)
    if args.out is None:
        print(text)
    return 0


def _add_guideline(sub):
    p = sub.add_parser("guideline", help="mixing-ratio selection guideline")
    p.add_argument("--n-target", type=int, required=True)
    p.add_argument("--m-source", type=int, required=True)
    p.add_argument("--q", type=float, default=0.8)
    p.add_argument("--gap", choices=["small", "large"], default="small")
    p.add_argument("--cap-half", action="store_true")
    p.set_defaults(func=cmd_guideline)


def cmd_guideline(args) -> int:
    inp = guideline.GuidelineInput(n_target=args.n_target, m_source=args.m_source,
                                   q=args.q, gap=args.gap)
    rec = guideline.recommend_range(inp, cap_half=args.cap_half)
    doc = {
        "w_n": guideline.natural_ratio(args.n_target, args.m_source),
        "w_q": guideline.upper_ratio(args.n_target, args.m_source, args.q),
        "range": [rec.w_lo, rec.w_hi],
        "degenerate": rec.degenerate,
        "notes": list(rec.notes),
    }
    print(formats.dump_json(doc))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cotrain-lab")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_data(sub)
    _add_oracle_sample(sub)
    _add_reweight(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_sweep(sub)
    _add_metrics(sub)
    _add_guideline(sub)
    return parser


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CotrainError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return cli_dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
