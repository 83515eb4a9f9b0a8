"""``antiuav`` command line: synth, train, track, eval, stats and plot.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
Any flag may also come from ``--config FILE`` (YAML or JSON, keys spelled
like the flags); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

DEFAULT_SEED = 42
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
STUB_TRACKERS = ("oracle", "absent", "random", "noisy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _data_default():
    return os.environ.get("ANTIUAV_DATA")


def _common(p, data=True, seed=False):
    p.add_argument("--config", help="YAML/JSON file supplying default values for any flag")
    if data:
        p.add_argument("--data", default=_data_default(),
                       help="benchmark root directory (default: $ANTIUAV_DATA)")
    if seed:
        p.add_argument("--seed", type=int, default=None, help=f"random seed (default {DEFAULT_SEED})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="antiuav", description="Anti-UAV tracking toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic benchmark tree")
    _common(p, data=False, seed=True)
    p.add_argument("--out", required=False, help="output root directory")
    p.add_argument("--train", type=int, default=2, help="number of training pairs")
    p.add_argument("--val", type=int, default=1, help="number of validation pairs")
    p.add_argument("--test", type=int, default=1, help="number of test pairs")
    p.add_argument("--profile", default="mixed", choices=("easy", "fm", "tc", "ov", "mixed"),
                   help="attribute preset for the generated pairs")
    p.add_argument("--frame-size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"),
                   help="frame height and width in pixels")
    p.add_argument("--num-frames", type=int, default=60, help="frames per sequence")

    p = sub.add_parser("train", help="train the query-guided tracker")
    _common(p, seed=True)
    p.add_argument("--split", default="train", help="training split name")
    p.add_argument("--val-split", default="val", help="validation split for mSA logging and threshold "
                   "calibration; 'none' disables")
    p.add_argument("--modality", default="infrared", choices=("infrared", "visible"), help="input modality")
    p.add_argument("--strategy", default="dfsc",
                   choices=("normal", "dfsc", "dfsc-all", "dfsc-cls", "dfsc-reg",
                            "dfsc_all", "dfsc_cls", "dfsc_reg"),
                   help="training strategy")
    p.add_argument("--alpha", type=float, default=0.25, help="weight of the cross-sequence RPN loss")
    p.add_argument("--beta", type=float, default=1.0, help="regression weight in the RPN/RCNN losses")
    p.add_argument("--steps", type=int, default=600, help="optimisation steps")
    p.add_argument("--lr", type=float, default=0.01, help="initial learning rate")
    p.add_argument("--n-pnum", type=int, default=64, help="proposals kept for the instance stage")
    p.add_argument("--batch-size", type=int, default=2, help="sequences per batch")
    p.add_argument("--steps-per-epoch", type=int, default=100, help="steps between validation runs")
    p.add_argument("--normalize-cross", action="store_true",
                   help="divide the cross-sequence loss by the number of cross pairs")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--log", help="JSON-lines training log (default: <out>.log.jsonl)")

    p = sub.add_parser("track", help="run a tracker and write per-sequence result files")
    _common(p, seed=True)
    p.add_argument("--split", default="test", help="split to track")
    p.add_argument("--modality", default="infrared", choices=("infrared", "visible"), help="input modality")
    p.add_argument("--tracker", default="model", choices=("model",) + STUB_TRACKERS,
                   help="trained checkpoint or a stub baseline")
    p.add_argument("--ckpt", help="checkpoint for --tracker model")
    p.add_argument("--theta", type=float, default=None, help="existence threshold (default: checkpoint's)")
    p.add_argument("--out", help="directory for the result files")

    p = sub.add_parser("eval", help="score result files and render the attribute table")
    _common(p)
    p.add_argument("--split", default="test", help="split to evaluate")
    p.add_argument("--modality", default="infrared", choices=("infrared", "visible"),
                   help="modality for protocols 1 and 2 (protocol 3 uses both)")
    p.add_argument("--results", action="append", default=None, metavar="NAME=DIR",
                   help="tracker results directory, repeatable")
    p.add_argument("--protocol", type=int, default=2, choices=(1, 2, 3), help="evaluation protocol")
    p.add_argument("--provenance", default="", help="declared training data for the tracker(s)")
    p.add_argument("--format", default="markdown", choices=("markdown", "csv"), help="table format")
    p.add_argument("--out", help="directory for report.{md,csv} and summary.json")

    p = sub.add_parser("stats", help="position, scale and attribute statistics of a split")
    _common(p)
    p.add_argument("--split", default="train", help="split to summarize")
    p.add_argument("--modality", default="infrared", choices=("infrared", "visible"), help="modality")
    p.add_argument("--out", help="write the statistics JSON here instead of stdout")

    p = sub.add_parser("plot", help="write precision/success curve data files")
    _common(p)
    p.add_argument("--split", default="test", help="split to evaluate")
    p.add_argument("--modality", default="infrared", choices=("infrared", "visible"), help="modality")
    p.add_argument("--results", help="tracker results directory")
    p.add_argument("--out", help="directory for precision.csv and success.csv")
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        doc = yaml.safe_load(path.read_text()) or {}
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a key-value mapping")
        sp = _subparser(parser, args.command)
        known = {a.dest for a in sp._actions}
        values = {k.replace("-", "_"): v for k, v in doc.items()}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown keys in {path}: {', '.join(unknown)}")
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _seed(args) -> int:
    if args.seed is None:
        print(f"seed: {DEFAULT_SEED} (default)")
        return DEFAULT_SEED
    print(f"seed: {args.seed}")
    return args.seed


# --- commands ---------------------------------------------------------------


def cmd_synth(args):
    from .synth import make_benchmark

    _require(args, "out")
    seed = _seed(args)
    splits = make_benchmark(args.out, args.train, args.val, args.test, seed=seed, profile=args.profile,
                            frame_size=tuple(args.frame_size), num_frames=args.num_frames)
    for name, split in splits.items():
        print(f"{name}: {len(split.pairs)} pairs ({', '.join(p.pair_id for p in split.pairs)})")
    return EXIT_OK


def cmd_train(args):
    from .tracker.checkpoint import save_checkpoint
    from .training import StrategyConfig, fit, load_sequences

    _require(args, "data", "out")
    seed = _seed(args)
    cfg = StrategyConfig(strategy=args.strategy, alpha=args.alpha, beta=args.beta, n_pnum=args.n_pnum,
                         batch_size=args.batch_size, lr=args.lr, steps=args.steps,
                         steps_per_epoch=args.steps_per_epoch, normalize_cross=args.normalize_cross, seed=seed)
    train = load_sequences(args.data, args.split, args.modality)
    val = None
    if args.val_split and args.val_split.lower() != "none":
        val = load_sequences(args.data, args.val_split, args.modality)

    def progress(rec):
        if rec["step"] % 50 == 0:
            logging.getLogger("antiuav").info("step %(step)d total %(total).4f L_cross %(L_cross).4f", rec)

    model, tlog = fit(train, cfg, val=val, progress=progress)
    meta = {"strategy": cfg.strategy, "alpha": cfg.alpha, "beta": cfg.beta, "steps": cfg.steps, "seed": seed,
            "modality": args.modality, "train_split": args.split, "train_sequences": len(train)}
    save_checkpoint(args.out, model, meta)
    log_path = Path(args.log or f"{args.out}.log.jsonl")
    log_path.write_text(tlog.to_jsonl())
    last = tlog.steps[-1]
    print(f"trained {cfg.strategy} for {cfg.steps} steps: final total {last['total']:.4f}, "
          f"L_cross {last['L_cross']:.4f}")
    for rec in tlog.epochs:
        print("val", json.dumps(rec, sort_keys=True))
    print(f"checkpoint: {args.out}\nlog: {log_path}")
    return EXIT_OK


def cmd_track(args):
    from .annotations import load_split, sequence_dir
    from .evaluation import (absent_result, noisy_result, oracle_result, random_box_result, run_tracker,
                             save_results)
    from .imageio import read_frame, FRAME_PATTERN, frame_extension

    _require(args, "data", "out")
    seed = _seed(args)
    split = load_split(args.data, args.split)
    rng = np.random.Generator(np.random.PCG64(seed))
    skipped = []
    if args.tracker == "model":
        from .tracker.checkpoint import load_checkpoint

        _require(args, "ckpt")
        model, _ = load_checkpoint(args.ckpt)
        results, skipped = run_tracker(model, args.data, split, args.modality, args.theta)
    else:
        results = []
        for pair in split.pairs:
            ann = pair.get(args.modality)
            if args.tracker == "oracle":
                results.append(oracle_result(ann))
            elif args.tracker == "absent":
                results.append(absent_result(ann))
            elif args.tracker == "noisy":
                results.append(noisy_result(ann, rng))
            else:
                d = sequence_dir(args.data, split.name, pair.pair_id, args.modality)
                ext = frame_extension(1 if args.modality == "infrared" else 3)
                H, W = read_frame(d / FRAME_PATTERN.format(0, ext)).shape[:2]
                results.append(random_box_result(ann, (H, W), rng))
    save_results(results, args.out)
    print(f"{args.tracker}: wrote {len(results)} result files to {args.out}")
    for s in skipped:
        print(f"skipped {s}")
    return EXIT_OK


def _result_sets(specs):
    out = []
    for spec in specs or []:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).name, spec
        out.append((name, path))
    if not out:
        raise UsageError("at least one --results NAME=DIR is required")
    return out


def cmd_eval(args):
    from .annotations import load_split
    from .evaluation import evaluate, load_results, render_report, report_summary, split_tags

    _require(args, "data")
    split = load_split(args.data, args.split)
    tags = split_tags(split)
    if args.protocol == 3:
        anns = split.sequences("infrared") + split.sequences("visible")
    else:
        anns = split.sequences(args.modality)
    reports = []
    for name, path in _result_sets(args.results):
        results = load_results(path, anns, name)
        reports.append(evaluate(results, anns, args.protocol, tags, args.provenance))
    table = render_report(reports, args.format)
    print(f"protocol {args.protocol}; provenance: {args.provenance or 'unspecified'}")
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(render_report(reports, "markdown"))
        (out / "report.csv").write_text(render_report(reports, "csv"))
        summary = [report_summary(r) for r in reports]
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def cmd_stats(args):
    from .annotations import dataset_statistics, load_split

    _require(args, "data")
    stats = dataset_statistics(load_split(args.data, args.split), args.modality)
    text = json.dumps(stats.as_dict(), sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"statistics: {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_plot(args):
    from .annotations import load_split
    from .evaluation import evaluate, load_results, render_curve

    _require(args, "data", "results", "out")
    split = load_split(args.data, args.split)
    anns = split.sequences(args.modality)
    report = evaluate(load_results(args.results, anns), anns, 2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "precision.csv").write_text(render_curve(report.precision))
    (out / "success.csv").write_text(render_curve(report.success))
    print(f"curves: {out / 'precision.csv'}, {out / 'success.csv'}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "track": cmd_track, "eval": cmd_eval, "stats": cmd_stats,
            "plot": cmd_plot}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, FileExistsError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
