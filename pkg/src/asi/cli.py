"""Command-line surface: train, degrade, upsample, evaluate, compare, and run
named experiments from config files.

Exit codes: 0 success, 2 bad arguments, 3 I/O failure, 4 numeric failure
(non-finite values in a forward pass). The environment variable ``ASI_SEED``
overrides any config-file seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .baseline import bspline_upsample_z
from .experiments import (
    ExperimentSpec,
    compare_methods,
    degradation_protocol,
    load_spec,
    run_experiment,
    synthetic_volume_dataset,
)
from .interp import NumericError, upsample_volume
from .metrics import MetricReport, evaluate_volume
from .model import CheckpointFormatError, ModelConfig, load_checkpoint
from .training import TrainConfig, VolumeTripletSource, train
from .volume import Volume, VolumeFormatError, load_volume, save_volume

EXIT_OK = 0
EXIT_BAD_ARGS = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _seed_override(seed: int) -> int:
    env = os.environ.get("ASI_SEED")
    return int(env) if env else seed


def _load_train_config(path: Path) -> tuple[TrainConfig, dict, int]:
    raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a YAML mapping")
    seed = _seed_override(int(raw.get("seed", 0)))
    model = ModelConfig(**raw.get("model", {}))
    cfg = TrainConfig(**raw.get("train", {}), model=model, seed=seed)
    return cfg, dict(raw.get("data", {})), seed


def _resolve_training_volumes(data: dict, seed: int) -> tuple[list[Volume], list[Volume]]:
    kind = data.get("kind", "synthetic-volumes")
    if kind == "synthetic-volumes":
        n_train = int(data.get("n_train", 40))
        n_val = int(data.get("n_val", 5))
        slices = int(data.get("slices", 24))
        size = int(data.get("size", 64))
        volumes = synthetic_volume_dataset(n_train + n_val, slices, size, seed)
        return volumes[:n_train], volumes[n_train:]
    if kind == "volf-dir":
        root = Path(data["dir"])
        train_vols = [load_volume(p) for p in sorted((root / "train").glob("*.volf"))]
        val_vols = [load_volume(p) for p in sorted((root / "val").glob("*.volf"))]
        if not train_vols or not val_vols:
            raise FileNotFoundError(f"no .volf volumes under {root}/train and {root}/val")
        return train_vols, val_vols
    raise ValueError(f"unknown data kind {kind!r}")


def cmd_train(args) -> int:
    cfg, data, seed = _load_train_config(Path(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config-echo.yaml").write_text(Path(args.config).read_text(encoding="utf-8"), encoding="utf-8")
    train_vols, val_vols = _resolve_training_volumes(data, seed)
    train(cfg, VolumeTripletSource(train_vols), VolumeTripletSource(val_vols), out_dir=out)
    print(f"trained {cfg.epochs} epochs; best checkpoint at {out / 'checkpoints' / 'best.asck'}")
    return EXIT_OK


def cmd_downsample(args) -> int:
    vol = load_volume(args.input)
    low, _ = degradation_protocol(vol, args.factor)
    save_volume(low, args.out)
    print(f"wrote {args.out}: {low.num_slices} slices, spacing {low.spacing}")
    return EXIT_OK


def cmd_upsample(args) -> int:
    vol = load_volume(args.input)
    if args.method == "bspline":
        up = bspline_upsample_z(vol, args.factor)
    else:
        if not args.model:
            raise ValueError("--model is required for method 'asi'")
        mp = load_checkpoint(args.model)
        up = upsample_volume(mp, vol, args.factor)
    if not np.isfinite(up.data).all():
        raise NumericError("upsampled volume contains non-finite values")
    save_volume(up, args.out)
    print(f"wrote {args.out}: {up.num_slices} slices, spacing {up.spacing}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ref = load_volume(args.ref)
    cand = load_volume(args.cand)
    report = MetricReport()
    planes = [args.plane]
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            chunks = pool.map(lambda p: evaluate_volume(ref, cand, p), planes)
            for rows in chunks:
                report.per_item.extend(rows)
    else:
        for plane in planes:
            report.per_item.extend(evaluate_volume(ref, cand, plane))
    if args.synthesized_every:
        k = args.synthesized_every
        indices = [i for i in range(ref.num_slices) if i % k]
        report.per_item.extend(evaluate_volume(ref, cand, "axial", indices=indices, id_prefix="syn|"))
    report.to_csv(args.out)
    aggregate = report.aggregate()
    print(json.dumps(aggregate, indent=2))
    return EXIT_OK


def cmd_compare(args) -> int:
    spec = load_spec(args.config)
    spec = replace(spec, seed=_seed_override(spec.seed), train=replace(spec.train, seed=_seed_override(spec.train.seed)))
    report = compare_methods(spec)
    print(json.dumps(report.extras, indent=2))
    return EXIT_OK


def cmd_experiment(args) -> int:
    spec = load_spec(args.spec)
    spec = replace(spec, seed=_seed_override(spec.seed), train=replace(spec.train, seed=_seed_override(spec.train.seed)))
    result = run_experiment(spec)
    print(json.dumps(result, indent=2, default=float))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asi", description="Through-plane volume upsampling via latent-space slice interpolation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("downsample", help="blur and K-subsample a volume along z")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--factor", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_downsample)

    p = sub.add_parser("upsample", help="upsample a volume along z")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--factor", type=int, required=True)
    p.add_argument("--method", choices=("asi", "bspline"), default="asi")
    p.add_argument("--model", default=None, help="ASCK checkpoint (required for method asi)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_upsample)

    p = sub.add_parser("evaluate", help="per-slice metrics between two volumes")
    p.add_argument("--ref", required=True)
    p.add_argument("--cand", required=True)
    p.add_argument("--plane", choices=("axial", "sagittal", "coronal"), default="axial")
    p.add_argument("--out", required=True)
    p.add_argument("--synthesized-every", type=int, default=0, help="also report rows restricted to non-multiples of K")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("compare", help="run the method-comparison experiment from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("experiment", help="run a named experiment from a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, VolumeFormatError, CheckpointFormatError) as exc:
        if isinstance(exc, (VolumeFormatError, CheckpointFormatError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS
    except (FileNotFoundError, IsADirectoryError, PermissionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
