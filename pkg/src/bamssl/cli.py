"""Command-line entry point: ``bamssl {run,presets,curate,report}``."""
import argparse
import json
import logging
import os
import sys

from . import data as ds
from .config import load_config
from .errors import ConfigurationError, InputError
from .harness import read_metrics, report_from_rows, run_experiment
from .ssl_methods import preset_catalog

EXIT_OK, EXIT_INPUT, EXIT_CONFIG = 0, 1, 2


def build_parser():
    parser = argparse.ArgumentParser(prog="bamssl", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--out", default=None, help="output directory / file")
    parser.add_argument("--quiet", action="store_true", help="only print errors")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train one configured experiment")
    run.add_argument("config", nargs="?", help="INI config file (defaults if omitted)")
    run.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="SECTION.KEY=VALUE", help="override one config value")

    sub.add_parser("presets", help="list the threshold-method presets")

    cur = sub.add_parser("curate", help="write a long-tailed synthetic dataset CSV")
    cur.add_argument("--K", type=int, default=10)
    cur.add_argument("--n-max", type=int, default=500)
    cur.add_argument("--alpha", type=float, default=10.0)
    cur.add_argument("--d", type=int, default=2)
    cur.add_argument("--separation", type=float, default=3.0)
    cur.add_argument("--test-per-class", type=int, default=100)

    rep = sub.add_parser("report", help="recompute the convergence report from metrics.csv")
    rep.add_argument("metrics", help="metrics CSV written by `run`")
    return parser


def _say(args, text):
    if not args.quiet:
        print(text)


def cmd_run(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"experiment.out_dir={args.out}")
    cfg = load_config(args.config, overrides)
    if not args.quiet:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    summary = run_experiment(cfg)
    conv = summary["convergence"]
    _say(args, f"{summary['method']} seed={summary['seed']}: accuracy={conv['accuracy']:.4f} "
               f"ece={conv['ece']:.4f} (checkpoint epoch {conv['checkpoint_epoch']})")
    _say(args, f"metrics: {summary['metrics_path']}")
    _say(args, f"summary: {summary['summary_path']}")


def cmd_presets(args):
    for preset in preset_catalog().values():
        print(preset.describe())


def cmd_curate(args):
    seed = 0 if args.seed is None else args.seed
    counts = ds.long_tail_counts(args.K, args.n_max, args.alpha)
    per_class = counts[0] + ds.labeled_count(counts[0]) + args.test_per_class
    data = ds.make_blobs(args.K, per_class, args.d, args.separation, seed)
    split = ds.curate_long_tail(data, counts, seed, 0.1, args.test_per_class)
    out = args.out or "long_tail.csv"
    if os.path.dirname(out):
        os.makedirs(os.path.dirname(out), exist_ok=True)
    ds.write_split_csv(out, split)
    _say(args, f"wrote {out}: labeled={len(split.labeled_y)} unlabeled={len(split.unlabeled_y)} "
               f"test={len(split.test_y)} counts={counts}")


def cmd_report(args):
    rep = report_from_rows(read_metrics(args.metrics))
    print(json.dumps(rep, sort_keys=True))


COMMANDS = {"run": cmd_run, "presets": cmd_presets, "curate": cmd_curate, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
