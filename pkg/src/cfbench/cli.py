"""Command line entry point: ``cfbench run | scenario | verify``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench
from .errors import CFBenchError


def _write_outputs(obj, out: Path, stem: str, fmt: str) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    ext = {"csv": ".csv", "json-lines": ".jsonl", "pretty": ".txt"}[fmt]
    written = bench.emit_report(obj, fmt, out / (stem + ext))
    if fmt != "pretty":
        written += bench.emit_report(obj, "pretty", out / (stem + ".txt"))
    written += bench.write_audit(obj, out)
    return written


def cmd_run(args) -> int:
    cfg = bench.load_config(args.config)
    report = bench.run_experiment(cfg, args.data, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n",
                                     encoding="utf-8")
    _write_outputs(report, out, "report", args.format)
    sys.stdout.write(bench.render_pretty(report))
    return 0


def cmd_scenario(args) -> int:
    table = bench.run_scenario(args.name, args.data, seed=args.seed, large=args.large, jobs=args.jobs)
    _write_outputs(table, Path(args.out), table.name, args.format)
    sys.stdout.write(bench.render_pretty(table))
    return 0


def cmd_verify(args) -> int:
    bad = bench.verify_tables(args.table, args.against, args.tol)
    for m in bad:
        print(f"MISMATCH {m}")
    print(f"{'OK' if not bad else 'FAILED'}: {len(bad)} value(s) outside tolerance {args.tol}")
    return 0 if not bad else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfbench", description="MF vs RWR ranking benchmark")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--data", default=None,
                        help=f"data directory (default: ${bench.DATA_ENV} or ./data)")
        sp.add_argument("--format", choices=bench.FORMATS, default="csv")
        sp.add_argument("--jobs", type=int, default=1, help="parallel fold workers")

    r = sub.add_parser("run", help="run one experiment from a JSON config")
    r.add_argument("--config", required=True)
    common(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("scenario", help="run one comparison scenario")
    s.add_argument("--name", required=True, choices=sorted(bench.SCENARIOS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--large", action="store_true", help="include Epinions")
    common(s)
    s.set_defaults(func=cmd_scenario)

    v = sub.add_parser("verify", help="compare a result CSV with a reference CSV")
    v.add_argument("--table", required=True)
    v.add_argument("--against", required=True)
    v.add_argument("--tol", type=float, required=True)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CFBenchError as exc:
        print(f"cfbench: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cfbench: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
