"""Command-line entry point: ``statebench backends | bench | inspect``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

from statebench.backends import StoreProvider, get_backend, registry_list
from statebench.config import DATA_ROOT_ENV, DEFAULT_DATA_ROOT, load_config
from statebench.errors import ConfigError, StateError

log = logging.getLogger("statebench")


def cmd_backends(args, out=None) -> int:
    out = out or sys.stdout
    rows = [(d.name, d.family.value, "yes" if d.durable else "no") for d in registry_list()]
    widths = [max(len(r[i]) for r in rows + [("name", "family", "durable")]) for i in range(3)]
    fmt = "{:<%d}  {:<%d}  {}" % (widths[0], widths[1])
    print(fmt.format("name", "family", "durable"), file=out)
    for row in rows:
        print(fmt.format(*row), file=out)
    return 0


def _progress(report) -> None:
    w = report.workload
    status = "FAILED " + report.error if report.error else f"{report.tps:.1f} tps"
    print(
        f"{report.backend:<8} {w.kind.value:<12} {w.value_size:>6} B  "
        f"committed={report.committed} invalid={report.invalid}  {status}",
        file=sys.stderr,
    )


def cmd_bench(args, out=None) -> int:
    out = out or sys.stdout
    from statebench.bench import run_sweep
    from statebench.report import write_outputs

    try:
        config = load_config(args.config).with_overrides(duration=args.duration, seed=args.seed)
    except ConfigError as exc:
        print(f"config error in {args.config}: {exc}", file=sys.stderr)
        return 2
    reports = run_sweep(config, on_report=None if args.quiet else _progress)
    paths = write_outputs(reports, config.output_dir)
    failed = [r for r in reports if r.error]
    print(f"wrote {paths['csv']}, {paths['json']}, {paths['svg']}", file=out)
    if failed:
        print(f"{len(failed)} of {len(reports)} cells failed", file=sys.stderr)
        return 1
    return 0


def _parse_hex(value: Optional[str], name: str) -> Optional[bytes]:
    if value is None:
        return None
    try:
        return bytes.fromhex(value)
    except ValueError:
        raise ConfigError(f"--{name} must be hex, got {value!r}") from None


def _show_key(key: bytes) -> str:
    if key and all(32 < b < 127 for b in key):
        return key.decode("ascii")
    return "0x" + key.hex()


def cmd_inspect(args, out=None) -> int:
    out = out or sys.stdout
    try:
        descriptor = get_backend(args.backend)
        start = _parse_hex(args.start, "start") or b""
        end = _parse_hex(args.end, "end")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    provider = StoreProvider(descriptor, args.root)
    if not provider.exists(args.ledger):
        print(f"error: no {descriptor.name} store for ledger {args.ledger!r} under {args.root}", file=sys.stderr)
        return 1
    try:
        with provider.open(args.ledger, sync=False) as store:
            for key, vv in store.range(args.ns, start, end):
                print(f"{_show_key(key)}  {len(vv.value)}  {vv.version}", file=out)
            sp = store.savepoint()
            print(f"savepoint: {sp if sp is not None else '<absent>'}", file=out)
    except StateError as exc:
        print(f"error: cannot read store: {exc}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="statebench", description="Versioned state database benchmark")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("backends", help="list registered backends")
    p.set_defaults(func=cmd_backends)

    p = sub.add_parser("bench", help="run a benchmark sweep from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--duration", type=float, help="seconds per cell (replaces tx_count)")
    p.add_argument("--seed", type=int)
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="list keys of a stored ledger")
    p.add_argument("--root", default=os.environ.get(DATA_ROOT_ENV, DEFAULT_DATA_ROOT))
    p.add_argument("--backend", required=True)
    p.add_argument("--ledger", required=True)
    p.add_argument("--ns", default="fixedasset")
    p.add_argument("--start", help="first key, hex")
    p.add_argument("--end", help="end key (exclusive), hex")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
