"""Command-line entry point: ``mshe <subcommand> [--config FILE] [--set path=value ...]``."""
from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import EXPERIMENT_KINDS, ConfigError, RunConfig, build_config, config_schema
from .experiments import RUNNERS
from .io import OutputSink


def execute(cfg: RunConfig) -> Path:
    """Run the configured experiment; returns the manifest path.

    Outputs written before a failure are removed and the error re-raised.
    """
    kind = cfg.experiment.kind
    sink = OutputSink(cfg.output_dir, cfg.run_id(), cfg.regime_stamp())
    start = time.perf_counter()
    try:
        if cfg.workers > 1:
            with ProcessPoolExecutor(cfg.workers) as pool:
                anomalies = RUNNERS[kind](cfg, sink, pool.map)
        else:
            anomalies = RUNNERS[kind](cfg, sink, map)
        if cfg.regime_stamp():
            anomalies["regime"] = cfg.regime_stamp()
        return sink.write_manifest(cfg.model_dump(mode="json"), time.perf_counter() - start, anomalies)
    except BaseException:
        sink.cleanup()
        raise


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mshe", description=__doc__)
    ap.add_argument("--print-schema", action="store_true", help="print the config JSON schema and exit")
    sub = ap.add_subparsers(dest="command")
    for kind in EXPERIMENT_KINDS:
        sp = sub.add_parser(kind, help=f"run the {kind} experiment")
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config leaf by dotted path (repeatable)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--workers", type=int, help="worker processes (overrides workers)")
        if kind == "paper-suite":
            sp.add_argument("--scale", choices=["full", "smoke"], help="suite scale")
    return ap


def config_from_args(args: argparse.Namespace) -> RunConfig:
    data = json.loads(args.config.read_text()) if args.config else {}
    exp = data.get("experiment") or {}
    if exp.get("kind", args.command) != args.command:
        raise ConfigError(f"experiment.kind: config says {exp['kind']!r} but subcommand is {args.command!r}")
    data["experiment"] = {**exp, "kind": args.command}
    extra = []
    if args.out:
        extra.append(f"output_dir={json.dumps(args.out)}")
    if args.workers:
        extra.append(f"workers={args.workers}")
    if getattr(args, "scale", None):
        extra.append(f"experiment.scale={json.dumps(args.scale)}")
    return build_config(data, list(args.overrides) + extra)


def main(argv: list[str] | None = None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    if args.print_schema:
        print(json.dumps(config_schema(), indent=2))
        return 0
    if not args.command:
        ap.print_help()
        return 2
    try:
        cfg = config_from_args(args)
    except ConfigError as e:
        print(f"invalid configuration:\n{e}", file=sys.stderr)
        return 2
    try:
        manifest = execute(cfg)
    except ValueError as e:
        # parameter combinations only detectable at run time (sample counts, file shapes)
        print(f"run failed: {e}", file=sys.stderr)
        return 2
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
