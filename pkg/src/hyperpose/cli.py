"""``hyperpose`` command line: train, eval, analyze, gradcheck, synth.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort,
4 incompatible checkpoint/dataset.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from .analysis import PROJECTIONS, WEIGHT_SOURCES, cluster_report, write_report
from .checkpoint import CheckpointError, CheckpointMismatchError, read_checkpoint, save_checkpoint
from .config import Config, ConfigError, DataConfig, ModelConfig, TrainConfig, config_from_dict, get_preset, load_config
from .data import PoseListError, SyntheticScene, make_overfit_set, write_dataset
from .tensor import ShapeError
from .training import NumericalAbort, evaluate

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_INCOMPATIBLE = 0, 2, 3, 4

log = logging.getLogger("hyperpose")

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


# ---------------------------------------------------------------------------
# Config flags: one per config key, ``--section.key``


def _flag_type(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, tuple):
        kind = type(default[0])
        return lambda s: tuple(kind(v) for v in s.split(","))
    return type(default)


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    for section, cls in _SECTIONS.items():
        group = parser.add_argument_group(f"[{section}] overrides")
        base = cls()
        for f in dataclasses.fields(cls):
            default = getattr(base, f.name)
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            group.add_argument(f"--{section}.{f.name}", dest=f"cfg__{section}__{f.name}", type=_flag_type(default),
                               default=None, metavar=type(default).__name__.upper(),
                               help=f"overrides the config file (built-in default: {shown})")


def flag_overrides(args: argparse.Namespace) -> dict:
    raw: dict = {}
    for key, val in vars(args).items():
        if key.startswith("cfg__") and val is not None:
            _, section, name = key.split("__", 2)
            raw.setdefault(section, {})[name] = val
    return raw


def resolve_config(path: str | None, preset: str | None, overrides: dict) -> Config:
    if path:
        base = load_config(path)
    elif preset:
        base = get_preset(preset)
    else:
        base = Config()
    return config_from_dict(overrides, base) if overrides else base


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    from .runs import phases_for, run_training

    cfg = resolve_config(args.config, args.preset, flag_overrides(args))
    phases = phases_for(args.phase)
    out = Path(args.out)
    try:
        run = run_training(cfg, out, phases, resume=args.resume, command=" ".join(sys.argv))
    except NumericalAbort as exc:
        from .model import HyperPoseModel

        model = HyperPoseModel(cfg.model, rng=0)
        model.load_state_dict(exc.last_good)
        save_checkpoint(model, out / "abort.ckpt", cfg, meta={"epoch": exc.epoch, "step": exc.step})
        print(f"numerical abort: {exc} (last good parameters in {out / 'abort.ckpt'})", file=sys.stderr)
        return EXIT_NUMERIC
    for phase, log_ in run.logs.items():
        if log_.rows:
            last = log_.rows[-1]
            print(f"phase {phase}: loss {last['loss']:.6g} median_pos {last['median_pos']:.6g} "
                  f"median_deg {last['median_deg']:.6g} -> {run.checkpoints[phase]}")
    return EXIT_OK


def _dataset_samples(ckpt_cfg: Config, dataset: str, split_file: str | None):
    from .runs import load_samples

    data = ckpt_cfg.data
    if split_file:
        data = dataclasses.replace(data, split_file=split_file)
    return load_samples(data, ckpt_cfg.model.input_size, source=dataset), data


def cmd_eval(args) -> int:
    ck = read_checkpoint(args.checkpoint)
    samples, data = _dataset_samples(ck.config, args.dataset, args.split_file)
    if not samples:
        print("eval: dataset is empty", file=sys.stderr)
        return EXIT_USAGE
    res = evaluate(ck.model, samples, data)
    print(f"median_pos_m={res.median_pos:.17g} median_ang_deg={res.median_deg:.17g} n={len(samples)}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval_summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["median_pos_m", "median_ang_deg", "n"])
            w.writerow([format(res.median_pos, ".17g"), format(res.median_deg, ".17g"), len(samples)])
        with open(out / "eval_samples.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "pos_err_m", "ang_err_deg"])
            for s, p, a in zip(samples, res.pos_err, res.ang_err):
                w.writerow([s.ref, format(float(p), ".17g"), format(float(a), ".17g")])
    return EXIT_OK


def cmd_analyze(args) -> int:
    ck = read_checkpoint(args.checkpoint)
    samples, data = _dataset_samples(ck.config, args.dataset, args.split_file)
    if len(samples) < args.k:
        print(f"analyze: need at least K={args.k} samples, got {len(samples)}", file=sys.stderr)
        return EXIT_USAGE
    rows = cluster_report(samples, ck.model, args.k, args.seed, args.proj, args.weights, data)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("clusters.csv")
    write_report(rows, out)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite, summarize

    t0 = time.perf_counter()
    results = run_suite(seeds=range(args.seeds), model=args.scale == "desk")
    print(summarize(results))
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if all(r.passed for r in results) else 1


def cmd_synth(args) -> int:
    scene = SyntheticScene.generate(args.seed, n_blobs=args.blobs)
    train, _ = make_overfit_set(args.seed, args.n, scene, size=args.size)
    path = write_dataset(train, args.out, args.split_file, scene)
    print(f"wrote {len(train)} samples to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="hyperpose", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one phase or all three", formatter_class=fmt)
    t.add_argument("config", nargs="?", default=None, help="TOML config file")
    t.add_argument("--preset", default=None, help="named preset used when no config file is given")
    t.add_argument("--phase", default="all", choices=["1", "2", "3", "all"], help="phase to run")
    t.add_argument("--resume", default=None, help="checkpoint to start from")
    t.add_argument("--out", default="runs/latest", help="output directory")
    add_config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="median errors of a checkpoint on a dataset", formatter_class=fmt)
    e.add_argument("checkpoint")
    e.add_argument("dataset", help="dataset directory, or 'synthetic' for the checkpoint's synthetic set")
    e.add_argument("--split-file", default=None, help="pose list inside the dataset directory (default: from the checkpoint config)")
    e.add_argument("--out", default=None, help="directory for eval_summary.csv and eval_samples.csv")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="cluster generated weights and camera positions", formatter_class=fmt)
    a.add_argument("checkpoint")
    a.add_argument("dataset", help="dataset directory, or 'synthetic'")
    a.add_argument("--split-file", default=None, help="pose list inside the dataset directory")
    a.add_argument("--k", type=int, default=4, help="number of clusters")
    a.add_argument("--proj", choices=PROJECTIONS, default="pca", help="2D embedding of the weight vectors")
    a.add_argument("--weights", choices=WEIGHT_SOURCES, default="both", help="which generated heads to use")
    a.add_argument("--seed", type=int, default=0, help="k-means / t-SNE seed")
    a.add_argument("--out", default=None, help="CSV path (default: clusters.csv beside the checkpoint)")
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gradcheck", help="64-bit gradient-check suite", formatter_class=fmt)
    g.add_argument("--scale", choices=["desk", "ops"], default="desk",
                   help="'desk' adds the end-to-end desk-scale model to the op checks")
    g.add_argument("--seeds", type=int, default=10, help="number of random seeds")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic dataset in pose-list format", formatter_class=fmt)
    s.add_argument("--seed", type=int, default=42, help="scene and pose seed")
    s.add_argument("--n", type=int, default=200, help="number of samples")
    s.add_argument("--size", type=int, default=32, help="image side in pixels")
    s.add_argument("--blobs", type=int, default=24, help="Gaussian blobs in the scene")
    s.add_argument("--split-file", default="dataset_train.txt", help="pose list file name")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PoseListError, ValueError) as exc:
        if isinstance(exc, ShapeError):
            print(f"incompatible: {exc}", file=sys.stderr)
            return EXIT_INCOMPATIBLE
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointMismatchError, CheckpointError) as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
