"""Command-line entry point: ``iqeclip {gen-data,train,adapt,eval,infer}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig
from .data import DatasetError, generate_dataset, read_pgm, write_pgm
from .scoring import to_display

log = logging.getLogger("iqeclip")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iqeclip", description="Instance-aware query anomaly detector (toy scale).")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic multi-domain benchmark")
    g.add_argument("--out", required=True, help="output dataset root")
    g.add_argument("--seed", type=int, default=0, help="generation seed (default 0)")
    g.add_argument("--image-size", type=int, default=64, help="image side length in pixels")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    t = sub.add_parser("train", help="leave-one-out zero-shot training")
    t.add_argument("--data", required=True, help="dataset root")
    t.add_argument("--holdout", required=True, help="domain excluded from training")
    t.add_argument("--config", help="key = value run config (defaults if omitted)")
    t.add_argument("--out", help="checkpoint path to write")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--loss-log", help="CSV loss log path (default: <out>.loss.csv)")
    t.add_argument("--dump-config", action="store_true",
                   help="print the resolved config and exit without training")

    a = sub.add_parser("adapt", help="few-shot adaptation of a checkpoint")
    a.add_argument("--ckpt", required=True, help="zero-shot checkpoint")
    a.add_argument("--data", required=True, help="dataset root")
    a.add_argument("--target", required=True, help="target domain supplying the K shots")
    a.add_argument("--k", type=int, required=True, choices=(0, 2, 4, 8, 16), help="number of shots")
    a.add_argument("--out", required=True, help="adapted checkpoint path")
    a.add_argument("--seed", type=int, help="override the shot-sampling/shuffle seed")

    e = sub.add_parser("eval", help="AC/AS AUROC on a domain's test split")
    e.add_argument("--ckpt", required=True,
                   help="checkpoint path; a '{seed}' placeholder selects one checkpoint per seed")
    e.add_argument("--data", required=True, help="dataset root")
    e.add_argument("--domain", required=True, help="domain to evaluate")
    e.add_argument("--seeds", type=int, default=5, help="number of seeds 0..N-1 (default 5)")
    e.add_argument("--report", required=True, help="CSV report path")
    e.add_argument("--map-alpha", type=float, help="override the map fusion weight")
    e.add_argument("--no-timing", action="store_true", help="write 0 wall_seconds for byte-stable reports")

    i = sub.add_parser("infer", help="anomaly map and score for one image")
    i.add_argument("--ckpt", required=True, help="checkpoint path")
    i.add_argument("--image", required=True, help="input P5 PGM")
    i.add_argument("--out-map", required=True, help="output P5 PGM (min-max normalised map)")
    i.add_argument("--class-word", default="object", help="class word for the prompt template")
    return p


def _load_config(args) -> RunConfig:
    overrides = {"seed": args.seed}
    if args.config:
        return RunConfig.load(args.config, **overrides)
    return RunConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})


def cmd_gen_data(args) -> int:
    names = generate_dataset(args.out, seed=args.seed, size=args.image_size, force=args.force)
    print(f"wrote domains: {', '.join(names)}")
    return 0


def cmd_train(args) -> int:
    from .training import train_zero_shot

    cfg = _load_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.dumps())
        return 0
    if not args.out:
        raise UsageError("train requires --out unless --dump-config is given")
    model, history = train_zero_shot(cfg, args.data, args.holdout)
    checkpoint.save_model(model, args.out)
    _write_loss_log(args.loss_log or f"{args.out}.loss.csv", history)
    print(f"final mean loss {history[-1][1]:.6f}; checkpoint {args.out}")
    return 0


def _write_loss_log(path, history) -> None:
    lines = ["epoch,mean_loss"] + [f"{e},{v:.8f}" for e, v in history]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_adapt(args) -> int:
    from .training import few_shot_adapt

    model = checkpoint.load_model(args.ckpt)
    cfg = model.cfg if args.seed is None else model.cfg.replace(seed=args.seed)
    model, history, shots = few_shot_adapt(model, args.data, args.target, args.k, cfg)
    checkpoint.save_model(model, args.out)
    if history:
        _write_loss_log(f"{args.out}.loss.csv", history)
    print(f"adapted on {len(shots)} shot(s): {' '.join(shots) or '-'}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate

    if args.seeds <= 0:
        raise UsageError("--seeds must be positive")
    templated = "{seed}" in args.ckpt
    if not templated and args.seeds > 1:
        log.warning("single checkpoint scored for every seed; spread will be zero")
    cache = {}

    def model_for_seed(seed):
        path = args.ckpt.format(seed=seed) if templated else args.ckpt
        if path not in cache:
            cache[path] = checkpoint.load_model(path)
        return cache[path]

    report = evaluate(model_for_seed, args.data, args.domain, range(args.seeds), args.map_alpha)
    report.write_csv(args.report, timing=not args.no_timing)
    agg = report.aggregate(args.domain)
    as_text = "n/a" if agg["as_mean"] is None else f"{agg['as_mean']:.4f} +- {agg['as_std']:.4f}"
    print(f"{args.domain}: AC {agg['ac_mean']:.4f} +- {agg['ac_std']:.4f}, AS {as_text}")
    return 0


def cmd_infer(args) -> int:
    model = checkpoint.load_model(args.ckpt)
    image = read_pgm(args.image)
    res = model.predict(image, [args.class_word])
    write_pgm(args.out_map, to_display(res.fused[0]))
    print(f"score {float(res.score[0]):.6f}")
    return 0


class UsageError(Exception):
    pass


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "adapt": cmd_adapt,
            "eval": cmd_eval, "infer": cmd_infer}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"iqeclip {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DatasetError, checkpoint.CheckpointError, OSError, ValueError,
            RuntimeError, FloatingPointError) as exc:
        print(f"iqeclip {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
