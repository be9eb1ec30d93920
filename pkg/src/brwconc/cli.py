"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 engine error, 4 bound
violation in verification mode.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .errors import BrwError, ConfigError
from .experiments import (PIPELINES, ExperimentConfig, emit_plot_data, list_models, load_config,
                          run_experiment)

EXIT_OK, EXIT_CONFIG, EXIT_ENGINE, EXIT_VIOLATION = 0, 2, 3, 4


def _common(p):
    p.add_argument("--config", type=Path, help="TOML config, JSON config or run manifest")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--workers", type=int, help="worker processes for trial blocks")
    p.add_argument("--out", type=Path, help="base directory for run directories")
    p.add_argument("--format", choices=("csv", "json"), default="csv",
                   help="what to print on stdout")
    p.add_argument("--verify", action="store_true",
                   help="exit with status 4 when any bound is violated")


def build_parser():
    parser = argparse.ArgumentParser(prog="brwconc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in PIPELINES:
        _common(sub.add_parser(name, help=f"run the {name} pipeline"))
    p = sub.add_parser("list-models", help="print the kernel catalog")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p = sub.add_parser("emit-plot-data", help="write long-format plot data for a run")
    p.add_argument("run", type=Path, help="run directory or manifest.json")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig.from_mapping({})
    data = cfg.to_dict()
    data["pipeline"] = args.command
    if args.seed is not None:
        data["seed"] = args.seed
    if args.workers is not None:
        data["workers"] = args.workers
    if args.out is not None:
        data["out"] = str(args.out)
    if args.verify:
        data["bounds"]["verify"] = True
    return ExperimentConfig.from_mapping(data)


def _print_catalog(fmt, out):
    rows = list_models()
    if fmt == "json":
        json.dump(rows, out, indent=2, default=str)
        out.write("\n")
        return
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["id", "role", "params", "domain", "kinks", "kink_window"])
    for r in rows:
        w.writerow([r["id"], r["role"], json.dumps({k: v["default"] for k, v in r["params"].items()}),
                    json.dumps(r["domain"]), json.dumps(r["kinks"]), r["kink_window"]])


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list-models":
            _print_catalog(args.format, out)
            return EXIT_OK
        if args.command == "emit-plot-data":
            path, _ = emit_plot_data(args.run)
            text = path.read_text()
            if args.format == "json":
                rows = list(csv.DictReader(text.splitlines()))
                json.dump(rows, out, indent=2)
                out.write("\n")
            else:
                out.write(text)
            return EXIT_OK
        cfg = _config(args)
        manifest = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BrwError as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    if args.format == "json":
        json.dump(manifest.to_dict(), out, indent=2, sort_keys=True)
        out.write("\n")
    else:
        for name in manifest.outputs:
            out.write(f"# {Path(manifest.run_dir) / name}\n")
            out.write((Path(manifest.run_dir) / name).read_text())
    if cfg.data["bounds"]["verify"] and manifest.violations:
        print(f"{manifest.violations} bound violation(s)", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
