"""Command line entry point.

Exit codes: 0 clean, 1 invariant violation, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checks
from .harness import ConfigError, ScenarioConfig, run_scenario
from .model import EventFormatError
from .sinks import read_events
from .workload import oracle_final_state, read_workload

EXIT_OK, EXIT_VIOLATION, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump_at(text: str):
    return None if text.lower() == "none" else int(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wmcdc", description="Watermark-based change-data-capture simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a scenario and verify it")
    run.add_argument("--config", help="scenario config file (JSON); flags override it")
    run.add_argument("--seed", type=int)
    run.add_argument("--tables", type=int)
    run.add_argument("--initial-rows", type=int)
    run.add_argument("--ops", type=int)
    run.add_argument("--writers", type=int)
    run.add_argument("--chunk-size", type=int)
    run.add_argument("--throttle", type=int)
    run.add_argument("--dump-at", type=_dump_at, default=argparse.SUPPRESS,
                     help="writes before the dump starts, or 'none'")
    run.add_argument("--scope", help="all | table:<name> | keys:<name>:<k>,<k>,...")
    run.add_argument("--mode", choices=("deterministic", "free"))
    run.add_argument("--standbys", type=int)
    run.add_argument("--adversary", action="append", default=[], metavar="SPEC",
                     help="read-lag | crash:<chunk>:<close|partial|checkpoint> | sink-fault:<seq>")
    run.add_argument("--out", help="events file (one JSON line per event)")
    run.add_argument("--report", help="machine-readable report file (JSON)")
    run.add_argument("--figures", help="directory for report figures")
    run.add_argument("--workload-out", help="write the generated workload here")
    run.add_argument("--control-socket", help="serve dump control commands on this socket path")
    run.add_argument("--linger", type=float, default=0.0,
                     help="seconds to keep serving control commands once idle")
    run.add_argument("--write-interval", type=float, default=0.0,
                     help="pause between writes of one writer thread (free mode)")

    for verb in ("dump", "pause", "resume", "status"):
        c = sub.add_parser(verb, help=f"{verb} against a live run")
        c.add_argument("--control-socket", required=True)
        if verb == "dump":
            g = c.add_mutually_exclusive_group(required=True)
            g.add_argument("--all", action="store_true")
            g.add_argument("--table")
            g.add_argument("--keys", nargs=2, metavar=("TABLE", "K1,K2,..."))
            c.add_argument("--chunk-size", type=int, default=1000)
            c.add_argument("--throttle", type=int, default=0)
        else:
            c.add_argument("--dump-id")

    v = sub.add_parser("verify", help="check a recorded events file")
    v.add_argument("--events", required=True)
    v.add_argument("--workload", help="workload file; enables the completeness check")
    return p


def _config(args) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.config) if args.config else ScenarioConfig()
    for flag, name in (("seed", "seed"), ("tables", "tables"), ("initial_rows", "initial_rows"),
                       ("ops", "ops"), ("writers", "writers"), ("chunk_size", "chunk_size"),
                       ("throttle", "throttle"), ("scope", "scope"), ("mode", "mode"),
                       ("standbys", "standbys")):
        val = getattr(args, flag)
        if val is not None:
            setattr(cfg, name, val)
    if hasattr(args, "dump_at"):
        cfg.dump_at = args.dump_at
    for spec in args.adversary:
        kind, _, rest = spec.partition(":")
        if kind == "read-lag":
            cfg.read_lag = True
        elif kind == "crash":
            chunk, _, phase = rest.partition(":")
            cfg.crash_points.append({"chunk": int(chunk), "phase": phase or "close"})
        elif kind == "sink-fault":
            cfg.sink_faults.append(int(rest))
        else:
            raise ConfigError(f"unknown adversary {spec!r}")
    if args.control_socket and cfg.mode != "free":
        raise ConfigError("--control-socket needs --mode free")
    return cfg.validate()


def cmd_run(args) -> int:
    try:
        cfg = _config(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    server = None
    ref: dict = {}
    if args.control_socket:
        from .control import ControlServer
        server = ControlServer(args.control_socket, ref).start()
    try:
        result = run_scenario(cfg, args.out, on_start=lambda sc: ref.update(scenario=sc),
                              linger=args.linger, write_interval=args.write_interval)
    finally:
        if server is not None:
            server.stop()

    report = result.report
    print(report.to_text())
    if args.report:
        Path(args.report).write_text(report.to_json())
    if args.workload_out:
        from .workload import write_workload
        write_workload(args.workload_out, result.workload)
    if args.figures:
        from .plotting import render_run
        for path in render_run(result, args.figures):
            print(f"  figure {path}")
    return EXIT_OK if report.passed else EXIT_VIOLATION


def cmd_control(args) -> int:
    from .control import send_command
    if args.verb == "dump":
        if args.all:
            scope = "all"
        elif args.table:
            scope = f"table:{args.table}"
        else:
            scope = f"keys:{args.keys[0]}:{args.keys[1]}"
        req = {"cmd": "dump", "scope": scope, "chunk_size": args.chunk_size, "throttle": args.throttle}
    else:
        req = {"cmd": args.verb}
        if args.dump_id:
            req["dump_id"] = args.dump_id
    try:
        reply = send_command(args.control_socket, req)
    except OSError as exc:
        print(f"no live run at {args.control_socket}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not reply.get("ok"):
        print(f"error: {reply.get('error')}", file=sys.stderr)
        return EXIT_USAGE
    reply.pop("ok")
    if "status" in reply:
        st = reply["status"]
        print(f"dump {st['dump_id']}: {st['state']}" + (f" (halted: {st['halted']})" if st["halted"] else ""))
        for table, cp in st["tables"].items():
            print(f"  {table}: {cp['status']} last_key={cp['last_key']}")
    else:
        print(json.dumps(reply))
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        events = read_events(args.events)
        workload = read_workload(args.workload) if args.workload else None
    except (OSError, EventFormatError, ValueError) as exc:
        print(f"cannot read input: {exc}", file=sys.stderr)
        return EXIT_USAGE

    violations = checks.check_seq_order(events) + checks.check_no_time_travel(events)
    lsns = [e.lsn for e in events if e.origin == "log"]
    for a, b in zip(lsns, lsns[1:]):
        if b <= a:
            violations.append(checks.Violation("log-order", f"lsn {b} delivered after lsn {a}"))
    if workload is not None:
        from .sinks import materialize
        oracle = oracle_final_state(workload.all_ops())
        diff = checks.diff_states(oracle, materialize(events), compare_versions=False)
        violations += [checks.Violation("completeness", f"{t} key {list(k)}: oracle {a!r}, events {b!r}")
                       for t, k, a, b in diff]
    for v in violations[:50]:
        print(f"VIOLATION {v}")
    print(f"{len(events)} events, {len(violations)} violation(s)")
    return EXIT_VIOLATION if violations else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "run":
        return cmd_run(args)
    if args.verb == "verify":
        return cmd_verify(args)
    return cmd_control(args)


if __name__ == "__main__":
    sys.exit(main())
