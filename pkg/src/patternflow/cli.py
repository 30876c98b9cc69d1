"""Command line entry point: ``patternflow run|validate|simulate|stats|indicators``.

Exit codes: 0 success, 1 flow error, 2 usage or parse/validation error.
"""

from __future__ import annotations

import argparse
import importlib
import json
import os
import sys
from pathlib import Path

from .errors import DeliveryExhausted, FlowError, MissingBinding, ParseError, PatternError, ValidationError
from .flow import parse_flow
from .runtime import Runtime

STATS_COLUMNS = ("component", "invocations", "successes", "failures", "cancellations",
                 "latency_min", "latency_max", "latency_sum")
INDICATOR_COLUMNS = ("id", "severity", "source", "raised_at", "acknowledged", "message")


class _Usage(Exception):
    pass


def _data_dir(args) -> str | None:
    return args.data_dir or os.environ.get("PATTERNFLOW_DATA_DIR")


def _pairs(items, what: str) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise _Usage(f"{what} must look like name=value, got {item!r}")
        out[key] = value
    return out


def _read_flow(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise _Usage(f"cannot read {path}: {exc.strerror}") from None
    return parse_flow(text)


def _tsv(rows, columns, out) -> None:
    out.write("\t".join(columns) + "\n")
    for row in rows:
        out.write("\t".join("" if row[c] is None else str(row[c]).replace("\t", " ") for c in columns) + "\n")


def _error_payload(err: FlowError) -> str:
    rec = err.record
    return json.dumps({"error": "FlowError", "kind": rec.kind, "message": rec.message,
                       "raisingStep": rec.raising_step, "attemptCount": rec.attempt_count})


def cmd_validate(args) -> int:
    doc = _read_flow(args.flow)
    print(f"ok\t{doc.name}\t{sum(1 for _ in doc.walk())} steps")
    return 0


def cmd_run(args) -> int:
    doc = _read_flow(args.flow)
    rt = Runtime(seed=args.seed, data_dir=_data_dir(args))
    for name in args.plugin or ():
        module = importlib.import_module(name)
        module.register(rt)
    try:
        doc = rt.register_flow(doc, _pairs(args.param, "--param"))
    except MissingBinding as exc:
        raise _Usage(str(exc)) from None
    body = Path(args.input).read_bytes() if args.input else b""
    message = rt.create_message(body, _pairs(args.header, "--header"))
    try:
        ex = rt.run_flow(doc.name, message)
    except FlowError as err:
        print(_error_payload(err), file=sys.stderr)
        return 1
    if args.output:
        Path(args.output).write_bytes(ex.message.body)
    else:
        sys.stdout.buffer.write(ex.message.body)
        sys.stdout.flush()
    if args.show_headers:
        for key, value in ex.message.headers.items():
            print(f"{key}\t{value}", file=sys.stderr)
    return 0


def cmd_simulate(args) -> int:
    doc = _read_flow(args.flow)
    try:
        faults = Path(args.faults).read_text(encoding="utf-8")
        json.loads(faults)
    except OSError as exc:
        raise _Usage(f"cannot read {args.faults}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"fault profile: {exc.msg}", exc.pos) from None
    rt = Runtime(seed=0 if args.seed is None else args.seed, data_dir=_data_dir(args))
    code = 0
    try:
        report = rt.simulate(doc, faults, seed=args.seed, messages=args.messages, raise_on_exhausted=True)
    except DeliveryExhausted as exc:
        report, code = exc.report, 1
        print(f"DeliveryExhausted: {exc}", file=sys.stderr)
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return code


def cmd_stats(args) -> int:
    rt = Runtime(data_dir=_data_dir(args))
    rows = [vars(rt.stats.query(c)) for c in rt.stats.components()]
    _tsv(rows, STATS_COLUMNS, sys.stdout)
    return 0


def cmd_indicators(args) -> int:
    rt = Runtime(data_dir=_data_dir(args))
    rows = [vars(i) for i in rt.indicators.query(args.severity, args.unacknowledged)]
    _tsv(rows, INDICATOR_COLUMNS, sys.stdout)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patternflow", description="Run integration flows against simulated endpoints.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a flow on one input message")
    run.add_argument("flow")
    run.add_argument("--input", help="file holding the message body (default: empty body)")
    run.add_argument("--output", help="write the output body here instead of stdout")
    run.add_argument("--data-dir")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--header", action="append", metavar="NAME=VALUE", help="input message header (repeatable)")
    run.add_argument("--param", action="append", metavar="NAME=VALUE", help="template binding (repeatable)")
    run.add_argument("--plugin", action="append", metavar="MODULE",
                     help="import MODULE and call its register(runtime) to add custom processors")
    run.add_argument("--show-headers", action="store_true", help="print output headers to stderr")
    run.set_defaults(fn=cmd_run)

    val = sub.add_parser("validate", help="parse and validate a flow document")
    val.add_argument("flow")
    val.set_defaults(fn=cmd_validate)

    sim = sub.add_parser("simulate", help="deliver generated messages under the flow's QoS")
    sim.add_argument("flow")
    sim.add_argument("--faults", required=True, help="fault profile document")
    sim.add_argument("--seed", type=int, default=None, help="override the fault profile's seed")
    sim.add_argument("--messages", type=int, default=None)
    sim.add_argument("--report", help="write the delivery report here instead of stdout")
    sim.add_argument("--data-dir")
    sim.set_defaults(fn=cmd_simulate)

    st = sub.add_parser("stats", help="print usage statistics as a tab-separated table")
    st.add_argument("--data-dir")
    st.set_defaults(fn=cmd_stats)

    ind = sub.add_parser("indicators", help="print raised indicators as a tab-separated table")
    ind.add_argument("--data-dir")
    ind.add_argument("--severity", choices=("info", "warn", "error"))
    ind.add_argument("--unacknowledged", action="store_true")
    ind.set_defaults(fn=cmd_indicators)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ParseError as exc:
        print(f"ParseError at position {exc.position}: {exc}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"ValidationError [{exc.rule}] at {exc.location}: {exc}", file=sys.stderr)
        return 2
    except _Usage as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except PatternError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
