"""Command line: ``sgdthermo run | oracle | report``.

Exit codes: 0 success, 1 oracle mismatch, 2 invalid config or arguments,
3 divergence, 4 missing capability.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import CapabilityError, Diverged, FormatError, InconsistentData, InvalidArgument

EXIT_ORACLE = 1
EXIT_VALIDATION = 2
EXIT_DIVERGED = 3
EXIT_CAPABILITY = 4


def _parser():
    p = argparse.ArgumentParser(prog="sgdthermo", description="SGD stochastic-thermodynamics laboratory")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run an experiment config"),
                       ("oracle", "run enumeration and finite-difference oracles"),
                       ("report", "summarize an artifact directory")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="experiment TOML file")
        s.add_argument("--out", help="artifact directory")
        s.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        s.add_argument("--seed-override", type=int, default=None)
    return p


def _cmd_run(args):
    from . import experiments

    if not args.config:
        raise InvalidArgument("run needs --config")
    cfg = experiments.load_config(args.config)
    out = args.out or os.path.join("artifacts", cfg.name)
    log = lambda msg: print(msg, file=sys.stderr)
    summary = experiments.run_experiment(cfg, out, max(1, args.workers), args.seed_override, log)
    print(json.dumps({"out": out, "results": summary["results"]}, indent=1, default=experiments._json_default))
    return 0


def _cmd_oracle(args):
    from .oracle_suite import run_suite

    report = run_suite(seed=args.seed_override or 0)
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "oracle.json").write_text(text)
    failed = [c for c in report["checks"] if not c["pass"]]
    for c in failed:
        print(f"FAIL {c['name']}: error {c['error']:.3e} > {c['tol']:.0e}", file=sys.stderr)
    print(json.dumps({"passed": report["passed"], "checks": len(report["checks"]), "failed": len(failed)}))
    return 0 if report["passed"] else EXIT_ORACLE


def _cmd_report(args):
    if not args.out:
        raise InvalidArgument("report needs --out pointing at an artifact directory")
    path = Path(args.out) / "summary.json"
    if not path.is_file():
        raise InvalidArgument(f"{path} not found")
    summary = json.loads(path.read_text())
    print(f"{summary['name']} ({summary['kind']}), code {summary['code_version']}, "
          f"config {summary['config_hash'][:12]}, {summary['wall_time_s']:.1f} s")
    for key, val in summary["results"].items():
        print(f"  {key}: {json.dumps(val)[:200]}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {"run": _cmd_run, "oracle": _cmd_oracle, "report": _cmd_report}
    try:
        return handlers[args.command](args)
    except (InvalidArgument, FormatError, InconsistentData) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Diverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CapabilityError as exc:
        print(f"capability: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY


if __name__ == "__main__":
    sys.exit(main())
