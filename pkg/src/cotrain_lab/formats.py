"""File formats owned by the CLI: JSONL datasets, CSV tables, JSON reports.

Floats in data streams are serialized with 17 significant digits so every
value round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .oracle import LabeledDataset
from .toylab import SWEEP_COLUMNS, ManifoldSpec, SweepRow


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def meta_path(data_path) -> Path:
    return Path(str(data_path) + ".meta.json")


def write_dataset_jsonl(data: LabeledDataset, path, meta: dict | None = None) -> None:
    """One record per sample: {"x": [...], "y": [...], "domain": "..."} .

    A sidecar <path>.meta.json carries the generating manifold spec so that
    downstream evaluation can recover the exact ground truth.
    """
    with open(path, "w") as fh:
        for x, y, name in zip(data.obs, data.actions, data.domain_names()):
            xs = ", ".join(fmt(v) for v in x)
            ys = ", ".join(fmt(v) for v in y)
            fh.write(f'{{"x": [{xs}], "y": [{ys}], "domain": "{name}"}}\n')
    if meta is not None:
        meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_dataset_jsonl(path) -> LabeledDataset:
    obs, actions, is_target = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                x, y, domain = rec["x"], rec["y"], rec["domain"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: malformed dataset record ({exc})")
            if domain not in ("target", "source"):
                raise ConfigError(f"{path}:{lineno}: unknown domain {domain!r}")
            obs.append([float(v) for v in x])
            actions.append([float(v) for v in y])
            is_target.append(domain == "target")
    if not obs:
        raise ConfigError(f"{path}: empty dataset")
    return LabeledDataset(obs=np.array(obs), actions=np.array(actions),
                          is_target=np.array(is_target))


def read_dataset_meta(path) -> dict | None:
    mp = meta_path(path)
    if not mp.exists():
        return None
    return json.loads(mp.read_text())


def manifold_from_dict(obj: dict) -> ManifoldSpec:
    known = set(ManifoldSpec.__dataclass_fields__)
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown manifold fields: {sorted(unknown)}")
    obj = dict(obj)
    for key in ("action_gap", "target_u_range", "ood_u_range"):
        if key in obj:
            obj[key] = tuple(obj[key])
    return ManifoldSpec(**obj)


def write_samples_csv(samples: np.ndarray, path) -> None:
    """One row per sample, columns a1..a_d."""
    samples = np.atleast_2d(samples)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"a{i + 1}" for i in range(samples.shape[1])])
        for row in samples:
            writer.writerow([fmt(v) for v in row])


def read_features_csv(path) -> np.ndarray:
    """Feature matrix, one row per sample; a non-numeric header row is skipped."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(csv.reader(fh), start=1):
            if not line:
                continue
            try:
                rows.append([float(v) for v in line])
            except ValueError:
                if lineno == 1:
                    continue
                raise ConfigError(f"{path}:{lineno}: non-numeric feature row")
    if not rows:
        raise ConfigError(f"{path}: empty feature file")
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise ConfigError(f"{path}: ragged rows (widths {sorted(width)})")
    return np.asarray(rows)


def write_reweight_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["w", "g_r", "g_s", "ratio"])
        for r in rows:
            writer.writerow([fmt(r["w"]), fmt(r["g_r"]), fmt(r["g_s"]), fmt(r["ratio"])])


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            rec = row.as_record()
            out = []
            for col in SWEEP_COLUMNS:
                v = rec[col]
                out.append(fmt(v) if isinstance(v, float) else v)
            writer.writerow(out)


def read_sweep_csv(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for rec in csv.DictReader(fh):
            row = dict(rec)
            for col in SWEEP_COLUMNS:
                if col not in ("method",):
                    row[col] = float(row[col])
            out.append(row)
    return out


def dump_json(obj: dict, path=None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text
