"""Command-line entry point: gen-data, train, eval, gradcheck, export."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .descriptors import ValidationError, dataset_hash, load_dataset, save_dataset
from .encoders import NetVladEncoder, PoolEncoder
from .evaluation import DEFAULT_N_VALUES, DEFAULT_NMS_RADIUS, encode_split, evaluate
from .geodata import SPLIT_NAMES, WorldConfig, generate_world, split_geographic
from .gradcheck import run_suite
from .pooling import load_params, load_params_meta, save_params
from .postprocess import fit_whitening, save_whitening
from .trainer import DivergenceError, TrainConfig, train

log = logging.getLogger("netvlad")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


@dataclass(frozen=True)
class EvalOptions:
    split: str = "test"
    n_values: tuple = DEFAULT_N_VALUES
    whiten_dim: int | None = None
    nms_radius: float | None = None
    pooling: str = "netvlad"

    def __post_init__(self):
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        if not self.n_values or min(self.n_values) < 1:
            raise ValidationError("n_values must be a non-empty list of positive integers")
        if self.pooling not in ("netvlad", "max", "sum"):
            raise ValidationError(f"unknown pooling {self.pooling!r}")


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = WorldConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalOptions = EvalOptions()
    splits: tuple = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0
    precision: str = "single"


def _block(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ValidationError(f"config block {name!r} must be an object")
    unknown = set(raw) - {f.name for f in fields(cls)}
    if unknown:
        raise ValidationError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return cls(**raw)


def parse_run_config(raw: dict, seed: int | None = None, precision: str | None = None) -> RunConfig:
    """Validate a config dict; ``seed``/``precision`` override the file's values.

    The run seed is copied into the world and train blocks so a single number
    drives every random stream.
    """
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    seed = int(raw.get("seed", 0) if seed is None else seed)
    precision = precision or raw.get("precision", "single")
    if precision not in ("single", "double"):
        raise ValidationError(f"precision must be 'single' or 'double', got {precision!r}")
    world = _block(WorldConfig, raw.get("world"), "world")
    trn = _block(TrainConfig, raw.get("train"), "train")
    splits = tuple(float(f) for f in raw.get("splits", (1 / 3, 1 / 3, 1 / 3)))
    if len(splits) != 3:
        raise ValidationError("splits must list train/val/test fractions")
    return RunConfig(
        world=dataclasses.replace(world, seed=seed),
        train=dataclasses.replace(trn, seed=seed, precision=precision),
        eval=_block(EvalOptions, raw.get("eval"), "eval"),
        splits=splits,
        seed=seed,
        precision=precision,
    )


def load_run_config(path: str | None, seed: int | None = None, precision: str | None = None) -> RunConfig:
    if path is None:
        return parse_run_config({}, seed, precision)
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {p} is not valid JSON: {exc}") from None
    return parse_run_config(raw, seed, precision)


def _split_of(ds, name):
    if ds.splits is None:
        raise ValidationError("dataset has no split labels")
    idx = [i for i, s in enumerate(ds.splits) if s == name]
    if not idx:
        raise ValidationError(f"dataset has no images in split {name!r}")
    return ds.subset(idx)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    world = generate_world(cfg.world)
    parts = split_geographic(world, cfg.splits)
    label = {i: s.splits[0] for s in parts for i in s.ids}
    world.splits = [label[i] for i in world.ids]
    world.extra["split_fractions"] = list(cfg.splits)
    digest = save_dataset(world, args.out)
    counts = {name: len(p) for name, p in zip(SPLIT_NAMES, parts)}
    print(json.dumps({"dataset": str(args.out), "images": len(world), "splits": counts, "hash": digest}))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    ds = load_dataset(args.data)
    trn, val = _split_of(ds, "train"), _split_of(ds, "val")
    res = train(trn, val, cfg.train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": cfg.seed, "init_sample_hash": res.init_sample_hash, "dataset_hash": dataset_hash(args.data)}
    for epoch, params in enumerate(res.checkpoints):
        save_params(params, out / f"epoch_{epoch:03d}.nvlad", epoch=epoch, **meta)
    save_params(res.best_params, out / "best.nvlad", epoch=res.best_epoch, **meta)
    res.write_metrics(out / "metrics.jsonl")
    print(json.dumps({"best_epoch": res.best_epoch, "checkpoint": str(out / "best.nvlad"),
                      "diverged": res.diverged}))
    return EXIT_RUNTIME if res.diverged else EXIT_OK


def _encoder(args, opts: EvalOptions, precision: str):
    pooling = args.pooling or opts.pooling
    if pooling == "netvlad":
        if not args.checkpoint:
            raise ValidationError("eval with NetVLAD pooling needs --checkpoint")
        return NetVladEncoder(load_params(args.checkpoint))
    return PoolEncoder(pooling, precision=precision)


def cmd_eval(args, cfg: RunConfig) -> int:
    opts = cfg.eval
    ds = load_dataset(args.data)
    split = _split_of(ds, args.split or opts.split)
    encoder = _encoder(args, opts, cfg.precision)
    whiten_dim = args.whiten_dim if args.whiten_dim is not None else opts.whiten_dim
    whitening = None
    out = Path(args.out)
    if whiten_dim:
        trn = _split_of(ds, "train")
        whitening = fit_whitening(encode_split(trn, encoder), whiten_dim)
        save_whitening(whitening, out / "whitening.nvw", source_hash=dataset_hash(args.data))
    nms = args.nms_radius if args.nms_radius is not None else opts.nms_radius
    report = evaluate(split, encoder, whitening=whitening, nms_radius=nms, n_values=opts.n_values)
    report.options["split"] = split.splits[0]
    jpath, cpath = report.write(out)
    print(json.dumps({"report": str(jpath), "curve": str(cpath),
                      "recall": dict(zip(map(str, report.curve.n_values), report.curve.recall))}))
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    results = run_suite(seed=cfg.seed, instances=args.instances)
    failed = [r for r in results if not r.passed]
    summary = {
        "instances": args.instances,
        "checks": len(results),
        "failed": len(failed),
        "max_relative_error": max(r.max_error for r in results),
        "tolerance": results[0].tolerance,
    }
    for r in failed:
        print(f"FAIL {r.name} {r.info}: {r.errors}", file=sys.stderr)
    print(json.dumps(summary))
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_export(args, cfg: RunConfig) -> int:
    params = load_params(args.checkpoint)
    if args.precision:
        params = params.astype(args.precision)
    out = Path(args.out)
    if args.format == "npz":
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("wb") as fh:
            np.savez(fh, w=params.w, b=params.b, c=params.c, alpha=np.float64(params.alpha))
    else:
        meta = {k: v for k, v in load_params_meta(args.checkpoint).items()
                if k not in ("alpha", "k", "d", "precision", "sha256")}
        save_params(params, out, **meta)
    print(json.dumps({"exported": str(out), "format": args.format}))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--precision", choices=("single", "double"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="netvlad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic geotagged dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train NetVLAD on a dataset's train split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", parents=[common], help="recall@N on a dataset split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--pooling", choices=("netvlad", "max", "sum"))
    p.add_argument("--split", choices=SPLIT_NAMES)
    p.add_argument("--whiten-dim", type=int)
    p.add_argument("--nms-radius", type=float, nargs="?", const=DEFAULT_NMS_RADIUS)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)

    p = sub.add_parser("export", parents=[common], help="re-emit a checkpoint as a portable file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--format", choices=("container", "npz"), default="container")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.seed, args.precision)
        return COMMANDS[args.command](args, cfg)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DivergenceError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
