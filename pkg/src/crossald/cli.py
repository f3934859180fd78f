"""Command-line entry point: ``crossald {generate,train,diversity,eval}``.

Exit codes: 0 success, 1 I/O failure, 2 usage/validation error, 3 numeric
failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

from . import experiments, segnet, synth_data, trainer
from .cross_ald import MixConfig
from .sampler import KERNEL_SPACES, SamplerConfig, SamplerDivergence
from .segnet import CheckpointError

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("crossald")


class UsageError(Exception):
    pass


def _norm(value: str) -> float:
    v = value.strip().lower()
    if v in ("inf", "infinity", "linf"):
        return math.inf
    try:
        f = float(v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 2 or inf, got {value!r}") from None
    return f


def _int_list(value: str) -> list[int]:
    try:
        out = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("list must not be empty")
    return out


# flag name -> (config section, field name, type)
TRAIN_FLAGS = {
    "total-iters": ("train", "total_iters", int),
    "batch-labeled": ("train", "batch_labeled", int),
    "batch-unlabeled": ("train", "batch_unlabeled", int),
    "lr": ("train", "lr", float),
    "momentum": ("train", "momentum", float),
    "lambda-cross-max": ("train", "lambda_cross_max", float),
    "lambda-cs": ("train", "lambda_cs", float),
    "rampup-iters": ("train", "rampup_iters", int),
    "labeled-fraction": ("train", "labeled_fraction", float),
    "base-width": ("train", "base_width", int),
    "eval-every": ("train", "eval_every", int),
    "seed": ("train", "seed", int),
}
SAMPLER_FLAGS = {
    "epsilon": ("sampler", "epsilon", float),
    "norm-p": ("sampler", "norm_p", _norm),
    "tau": ("sampler", "tau", float),
    "iters": ("sampler", "iters", int),
    "eta": ("sampler", "eta", float),
    "n-particles": ("sampler", "n_particles", int),
    "sampler-seed": ("sampler", "seed", int),
}
MIX_FLAGS = {
    "alpha": ("mix", "alpha", float),
    "mix-seed": ("mix", "seed", int),
}


def _add_flags(p: argparse.ArgumentParser, table: dict) -> None:
    for flag, (_, name, typ) in table.items():
        p.add_argument(f"--{flag}", dest=f"{_section(table, flag)}__{name}", type=typ, default=None)


def _section(table: dict, flag: str) -> str:
    return table[flag][0]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossald", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--h", type=int, default=32)
    g.add_argument("--w", type=int, default=32)
    g.add_argument("--c", type=int, default=3)
    g.add_argument("--n-train", type=int, default=40)
    g.add_argument("--n-eval", type=int, default=16)
    g.add_argument("--labeled-fraction", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="semi-supervised training run")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with any subset of the config fields")
    t.add_argument("--regularizer", choices=trainer.REGULARIZERS, default=None)
    t.add_argument("--kernel-space", dest="sampler__kernel_space", choices=KERNEL_SPACES, default=None)
    t.add_argument("--threads", type=int, default=1)
    _add_flags(t, TRAIN_FLAGS)
    _add_flags(t, SAMPLER_FLAGS)
    _add_flags(t, MIX_FLAGS)

    d = sub.add_parser("diversity", help="particle diversity of VAT / SVGD / SVGDF")
    d.add_argument("--dataset", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config", help="JSON file with sampler fields")
    d.add_argument("--n-list", type=_int_list, default=[2, 4, 8])
    d.add_argument("--model-seed", type=int, default=0)
    d.add_argument("--n-images", type=int, default=3)
    d.add_argument("--base-width", type=int, default=8)
    d.add_argument("--threads", type=int, default=1)
    _add_flags(d, SAMPLER_FLAGS)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset's eval split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    return parser


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in raw.items()}


def _merge_section(base: dict, overrides: dict, cls, label: str) -> dict:
    valid = {f.name for f in fields(cls)}
    for k in overrides:
        if k not in valid:
            raise UsageError(f"unknown {label} field {k!r}")
    return {**base, **overrides}


def train_config_from_args(args: argparse.Namespace) -> trainer.TrainConfig:
    file_cfg = _load_config_file(args.config)
    sampler_file = file_cfg.pop("sampler", {}) or {}
    mix_file = file_cfg.pop("mix", {}) or {}
    flag_vals = {"train": {}, "sampler": {}, "mix": {}}
    for key, val in vars(args).items():
        if "__" in key and val is not None:
            section, name = key.split("__", 1)
            flag_vals[section][name] = val
    if args.regularizer is not None:
        flag_vals["train"]["regularizer"] = args.regularizer

    train_kw = _merge_section(file_cfg, flag_vals["train"], trainer.TrainConfig, "train")
    sampler_kw = _merge_section({k.replace("-", "_"): v for k, v in sampler_file.items()}, flag_vals["sampler"], SamplerConfig, "sampler")
    mix_kw = _merge_section({k.replace("-", "_"): v for k, v in mix_file.items()}, flag_vals["mix"], MixConfig, "mix")
    try:
        scfg = SamplerConfig.from_dict(sampler_kw)
        mcfg = MixConfig(**mix_kw)
        return trainer.TrainConfig(**train_kw, sampler=scfg, mix=mcfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _require_dataset(path: str) -> synth_data.Dataset:
    if not (Path(path) / "manifest.json").is_file():
        raise UsageError(f"dataset not found: {path} (no manifest.json)")
    try:
        return synth_data.load_dataset(path)
    except synth_data.DatasetError as exc:
        raise UsageError(str(exc)) from exc


def cmd_generate(args: argparse.Namespace) -> int:
    try:
        synth_data.generate_dataset(
            args.out,
            H=args.h,
            W=args.w,
            C=args.c,
            n_train=args.n_train,
            n_eval=args.n_eval,
            seed=args.seed,
            labeled_fraction=args.labeled_fraction,
        )
    except (ValueError, synth_data.DatasetError) as exc:
        raise UsageError(str(exc)) from exc
    log.info("wrote dataset to %s", args.out)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = train_config_from_args(args)
    _require_dataset(args.dataset)
    report = trainer.run_training(config, args.dataset, args.out, log_every=100 if args.verbose else 0)
    print(json.dumps(report["final_metrics"], sort_keys=True))
    return EXIT_OK


def cmd_diversity(args: argparse.Namespace) -> int:
    dataset = _require_dataset(args.dataset)
    file_cfg = _load_config_file(args.config)
    flag_vals = {k.split("__", 1)[1]: v for k, v in vars(args).items() if k.startswith("sampler__") and v is not None}
    kw = _merge_section(file_cfg, flag_vals, SamplerConfig, "sampler")
    try:
        base = SamplerConfig.from_dict(kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if args.n_images < 1 or args.n_images > dataset.manifest.n_train:
        raise UsageError(f"--n-images must lie in [1, {dataset.manifest.n_train}]")
    if any(n < 2 for n in args.n_list):
        raise UsageError("every entry of --n-list must be >= 2 (diversity needs particle pairs)")
    rows = experiments.run_diversity(
        dataset, args.n_list, base, args.model_seed, args.n_images, args.base_width, threads=max(1, args.threads)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "diversity.csv").write_text(experiments.diversity_csv(rows))
    for (method, n), v in experiments.summarize_diversity(rows).items():
        log.info("%s N=%d mean SSE %.6g", method, n, v)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = _require_dataset(args.dataset)
    try:
        model = segnet.load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc
    m = dataset.manifest
    if model.arch.num_classes != m.C:
        raise UsageError(f"checkpoint predicts {model.arch.num_classes} classes, dataset has {m.C}")
    if m.H % 2 or m.W % 2 or m.H < 8 or m.W < 8:
        raise UsageError(f"dataset images {m.H}x{m.W} are not valid network inputs")
    report = trainer.evaluate_dataset(model, dataset)
    print(json.dumps(report.as_dict(), sort_keys=True))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "diversity": cmd_diversity, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"crossald {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (trainer.TrainingDivergence, SamplerDivergence, FloatingPointError) as exc:
        print(f"crossald {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"crossald {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
