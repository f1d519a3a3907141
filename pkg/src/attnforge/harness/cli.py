"""Command-line entry point: ``attnforge <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_dataset_spec, load_run_config
from .data import generate, write_dataset
from .runner import (TrainingDivergedError, compare, pe_metric, read_report, sweep_intrinsic,
                     train, write_report)


def _grid(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be comma-separated integers, got {text!r}") from None


def cmd_gen_data(args):
    spec = load_dataset_spec(args.spec)
    out = write_dataset(generate(spec), args.out)
    print(f"wrote {spec.generator} dataset to {out}")


def cmd_train(args):
    cfg = load_run_config(args.config)
    report = train(cfg)
    out = args.out or cfg.output_path
    if not out:
        raise SystemExit("no output path: pass --out or set output.path")
    write_report(report, out)
    print(f"{report.method}: accuracy={report.accuracy:.4f} params={report.exact_params} "
          f"pe={report.pe:.4f} -> {out}")


def cmd_sweep(args):
    cfg = load_run_config(args.config)
    result = sweep_intrinsic(cfg, args.group, args.grid, args.threshold, train_head=args.train_head)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    for row in result["rows"]:
        print(f"d={row['d']:>6} accuracy={row['accuracy']:.4f} {'*' if row['qualified'] else ''}")
    print(f"d_t={result['d_t']} (reference {result['reference_accuracy']:.4f})")


def cmd_compare(args):
    csv_path, json_path = compare([read_report(p) for p in args.reports], args.out)
    print(Path(csv_path).read_text(), end="")
    print(f"wrote {csv_path} and {json_path}")


def cmd_pe(args):
    print(f"{pe_metric(args.score, args.params, args.m0):.6f}")


def build_parser():
    p = argparse.ArgumentParser(prog="attnforge", description="Parameter-efficient attention adaptation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--spec", required=True, help="dataset spec file (data.* keys)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration and write a JSON report")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="report path (defaults to output.path)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep-intrinsic", help="local intrinsic-dimension grid search")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True, type=_grid)
    s.add_argument("--out", required=True)
    s.add_argument("--group", default="attention:0", help="kind[:layers], e.g. attention:0 or mlp:0,1")
    s.add_argument("--threshold", type=float, default=0.9)
    s.add_argument("--train-head", action="store_true", help="also train the classifier head")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="rank reports by PE into CSV and JSON tables")
    c.add_argument("reports", nargs="+")
    c.add_argument("--out", required=True, help="output prefix")
    c.set_defaults(func=cmd_compare)

    e = sub.add_parser("pe", help="performance-efficiency score")
    e.add_argument("--score", required=True, type=float, help="accuracy in [0,1] or percent")
    e.add_argument("--params", required=True, type=int)
    e.add_argument("--m0", type=float, default=1e8)
    e.set_defaults(func=cmd_pe)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
