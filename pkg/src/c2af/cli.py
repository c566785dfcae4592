"""Command-line entry points: synth, train, eval, ablate, baseline, gradcheck."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, parse_int_list
from .data import SynthConfig, load_container, parse_confusions, save_container, split_train_test, synth_generate
from .evaluation import BASELINE_MODES, ablation_suite, emit_report, mean_accuracy
from .fusion import ABLATION_MODES, HEAD_MODES
from .gradcheck import THRESHOLD, run_gradcheck, summarize
from .training import TrainConfig, evaluate, load_checkpoint, run_training, save_checkpoint, with_seed

log = logging.getLogger("c2af")


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_classes=args.classes,
        n_views=args.views,
        n_samples=args.samples,
        length=args.length,
        dims=parse_int_list(args.dims),
        noise=args.noise,
        confusions=parse_confusions(args.confusions, args.views),
        seed=args.seed,
    )
    save_container(synth_generate(cfg), args.out)
    print(f"wrote {cfg.n_samples} samples x {cfg.n_views} views to {args.out}")
    return 0


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg


def cmd_train(args) -> int:
    ds = load_container(args.data)
    cfg = _load_config(args)
    result = run_training(ds, cfg)
    save_checkpoint(result.checkpoint, args.out)
    Path(args.log).write_text(result.log_text(), encoding="utf-8")
    primary = cfg.heads[0]
    best = result.best[primary]
    print(f"{primary}: best test accuracy {best.fused_accuracy:.4f} at step {best.step}; checkpoint {args.out}")
    return 0


def _held_out(ds, ckpt, split: str):
    if split == "all":
        return ds
    return split_train_test(ds, ckpt.config.test_fraction)[1]


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    ds = _held_out(load_container(args.data), ckpt, args.split)
    reports = evaluate(ckpt, ds)
    emit_report(list(reports.values()), args.report, args.format)
    for mode, rep in reports.items():
        print(f"{mode:18s} {rep.fused_accuracy:.4f}")
    return 0


def cmd_ablate(args) -> int:
    ds = load_container(args.data)
    cfg = _load_config(args)
    modes = _csv_list(args.modes)
    seeds = [int(s) for s in _csv_list(args.seeds)]
    reports = ablation_suite(ds, cfg, modes, seeds)
    emit_report(reports, args.report, args.format)
    for mode in modes:
        print(f"{mode:18s} mean {mean_accuracy(reports, mode):.4f} over seeds {seeds}")
    return 0


def cmd_baseline(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if args.mode == "concat" and "concat" not in ckpt.model.heads:
        raise ConfigError("checkpoint has no concat head; train with heads including concat")
    ds = _held_out(load_container(args.data), ckpt, args.split)
    rep = evaluate(ckpt, ds, modes=(args.mode,))[args.mode]
    emit_report(rep, args.report, args.format)
    print(f"{args.mode:18s} {rep.fused_accuracy:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    ok, lines = summarize(run_gradcheck(args.seed, args.eps), args.threshold)
    print("\n".join(lines))
    print("gradcheck " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2af", description="Correlative channel-aware fusion for multi-view time series.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--samples", type=int, default=3600)
    p.add_argument("--length", type=int, default=32)
    p.add_argument("--dims", default="8,8,8")
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--confusions", default="", help="per-view class pairs, e.g. '0-1;0-1;2-3'")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and save the best checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    split_help = "score the checkpoint's held-out split (default) or every sample"
    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--split", choices=("test", "all"), default="test", help=split_help)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train each ablation mode over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--modes", default=",".join(ABLATION_MODES))
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("baseline", help="score a late-fusion baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=BASELINE_MODES, required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--split", choices=("test", "all"), default="test", help=split_help)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny full network")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--threshold", type=float, default=THRESHOLD)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"c2af {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
