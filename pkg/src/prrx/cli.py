"""Command line: ``prrx run|sweep|validate|report``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
``PRRX_OUTPUT_ROOT`` (or ``--output-root``) relocates relative output
directories.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from .pipeline import ConfigError, load_capture, load_config, run_experiment, run_sweep

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
OUTPUT_ROOT_ENV = "PRRX_OUTPUT_ROOT"


def bundled_configs() -> dict[str, Path]:
    root = resources.files("prrx") / "configs"
    return {p.name.removesuffix(".toml"): Path(str(p)) for p in root.iterdir() if p.name.endswith(".toml")}


def _resolve_config(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = bundled_configs()
    if name in bundled:
        return bundled[name]
    raise ConfigError(f"{name}: no such file or bundled config ({', '.join(sorted(bundled))})")


def _output_dir(cfg, root: str | None) -> Path:
    out = Path(cfg.output_dir)
    if out.is_absolute():
        return out
    base = root or os.environ.get(OUTPUT_ROOT_ENV) or "."
    return Path(base) / out


def _cmd_validate(args) -> int:
    cfg = load_config(_resolve_config(args.config))
    print(json.dumps(cfg.resolved(), indent=2, sort_keys=True, default=str))
    print(f"ok\t{cfg.digest()}", file=sys.stderr)
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = load_config(_resolve_config(args.config))
    out = _output_dir(cfg, args.output_root)
    capture = None if args.from_waveforms is None else load_capture(cfg, args.from_waveforms)
    man = run_experiment(cfg, out, capture)
    for k, v in sorted(man["metrics"].items()):
        print(f"{k}\t{v}")
    print(f"manifest\t{out / 'manifest.json'}")
    if man["status"] != "ok":
        print(f"error\t{man['failed_stage']}: {man['error']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = load_config(_resolve_config(args.config))
    out = _output_dir(cfg, args.output_root)
    summary = run_sweep(cfg, out, workers=args.workers)
    print((out / "summary.csv").read_text(), end="")
    for label, pen in summary.get("osnr_penalty_db_at_2e-2", {}).items():
        print(f"osnr_penalty_db\t{label}\t{pen}")
    return EXIT_RUNTIME if summary["failed"] else EXIT_OK


def _cmd_report(args) -> int:
    from .report import report

    try:
        figures, rows = report(args.manifest_dir)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for k, v in rows:
        print(f"{k}\t{v}")
    for f in figures:
        print(f"figure\t{f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prrx", description="Phase-retrieval direct-detection receiver simulator")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, hlp in (("run", _cmd_run, "run one experiment"),
                          ("sweep", _cmd_sweep, "run the config's parameter grid"),
                          ("validate", _cmd_validate, "check a config and print it resolved")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("config", help="TOML file or bundled config name")
        if name != "validate":
            s.add_argument("--output-root", help=f"base for relative output_dir (env {OUTPUT_ROOT_ENV})")
        if name == "run":
            s.add_argument("--from-waveforms", metavar="DIR",
                           help="process the waveforms/ dump of an earlier run instead of simulating")
        if name == "sweep":
            s.add_argument("--workers", type=int, default=1, help="parallel sweep points")
        s.set_defaults(func=fn)
    s = sub.add_parser("report", help="render figures and a summary for a run or sweep directory")
    s.add_argument("manifest_dir")
    s.set_defaults(func=_cmd_report)
    sub.add_parser("configs", help="list bundled configs").set_defaults(
        func=lambda a: print("\n".join(f"{k}\t{v}" for k, v in sorted(bundled_configs().items()))) or EXIT_OK)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything else is a runtime failure
        logging.getLogger("prrx").debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
