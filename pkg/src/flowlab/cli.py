"""``flowlab`` command line: run, validate, catalogue.

Exit codes: 0 all checks pass, 1 a checked bound or invariant failed,
2 configuration error.
"""

import argparse
import datetime as _dt
import json
import sys
from pathlib import Path

from .catalogue import CATALOGUE
from .errors import ConfigurationError, DomainError
from .experiments import build_report, load_config, run_experiment
from .parallel import set_threads

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG = 0, 1, 2


def _parser():
    ap = argparse.ArgumentParser(prog="flowlab", description="Gaussian flow experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment configuration")
    run.add_argument("config")
    run.add_argument("--out", help="output prefix (default: config 'output' or config path stem)")
    run.add_argument("--threads", type=int, help="worker threads (default: $FLOWLAB_THREADS or 1)")
    run.add_argument("--seed", type=int, help="override the master seed")
    val = sub.add_parser("validate", help="check a configuration without running it")
    val.add_argument("config")
    sub.add_parser("catalogue", help="list the built-in vector fields")
    return ap


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _prefix(args, cfg):
    if args.out:
        return args.out
    if "output" in cfg:
        return cfg["output"]
    p = Path(args.config)
    return str(p.with_suffix("")) if p.suffix == ".json" else str(p)


def _run(args):
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        set_threads(args.threads)
    cfg = load_config(args.config, None if args.seed is None else {"seed": args.seed})
    result = run_experiment(cfg)
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    report = build_report(cfg, result, stamp)
    prefix = _prefix(args, cfg)
    _write(f"{prefix}.report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write(f"{prefix}.table.csv", result.table_csv())
    verdict = "PASS" if result.passed else "FAIL"
    print(f"{result.experiment}: {verdict} ({prefix}.report.json)")
    return EXIT_OK if result.passed else EXIT_VIOLATION


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "catalogue":
            for kind, desc in CATALOGUE.items():
                print(f"{kind:24s} {desc}")
            return EXIT_OK
        if args.command == "validate":
            cfg = load_config(args.config)
            print(f"{args.config}: valid {cfg['experiment']} configuration")
            return EXIT_OK
        return _run(args)
    except (ConfigurationError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
