"""Command-line entry point.

Exit codes: 0 ok, 1 replay divergence, 2 mission terminated, 3 unclassified
or escalation pending, 64 usage error, 65 invalid data, 66 missing input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import IO, Any, Sequence

from shielda.agentops import EventKind, read_log
from shielda.canonical import CanonicalData, load_canonical
from shielda.classifier import Classification, Origin, RawExceptionSignal, reclassify
from shielda.errors import ShieldaError
from shielda.escalation import root_cause_trace, trace_seeds
from shielda.registry import load_registry
from shielda.replay import replay
from shielda.simharness import BUILTIN_SCENARIOS, RunConfig, builtin_scenario, load_scenario, run_scenario
from shielda.taxonomy import ArtifactKind, Phase

EXIT_OK = 0
EXIT_DIVERGENCE = 1
EXIT_TERMINATED = 2
EXIT_PENDING = 3
EXIT_USAGE = 64
EXIT_DATAERR = 65
EXIT_NOINPUT = 66


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _emit(out: IO[str], fmt: str, doc: Any, human: str) -> None:
    if fmt == "json":
        out.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    else:
        out.write(human.rstrip("\n") + "\n")


# ------------------------------------------------------------ subcommands


def _taxonomy_list(args, data: CanonicalData, out: IO[str]) -> int:
    phase = Phase(args.phase) if args.phase else None
    artifact = ArtifactKind(args.artifact) if args.artifact else None
    entries = data.taxonomy.query(phase=phase, artifact=artifact)
    rows = [f"{e.id:<42} {e.artifact.value:<15} {e.phase.value:<5} {e.display_name}" for e in entries]
    _emit(out, args.format, [e.to_dict() for e in entries], "\n".join(rows) or "(no entries)")
    return EXIT_OK


def _patterns_list(args, data: CanonicalData, out: IO[str]) -> int:
    patterns = list(data.registry.patterns.values())
    rows = [f"{p.pattern_id}  {p.local_label:<32} {p.flow.value:<9} {p.recovery.value}" for p in patterns]
    _emit(out, args.format, [p.to_dict() for p in patterns], "\n".join(rows))
    return EXIT_OK


def _patterns_show(args, data: CanonicalData, out: IO[str]) -> int:
    pattern = data.registry.get(args.pattern_id)
    if pattern is None:
        sys.stderr.write(f"no pattern {args.pattern_id!r}\n")
        return EXIT_DATAERR
    mapped = sorted(k for k, v in data.registry.mapping.items() if v == pattern.pattern_id)
    human = (
        f"{pattern.pattern_id}: {pattern.local_label} / {pattern.flow.value} / {pattern.recovery.value}\n"
        f"  {pattern.local.description}\n"
        f"  default for: {', '.join(mapped) or '-'}"
    )
    _emit(out, args.format, pattern.to_dict(), human)
    return EXIT_OK


def _patterns_validate(args, data: CanonicalData, out: IO[str]) -> int:
    try:
        with open(args.file, "rb") as fh:
            registry = load_registry(fh, data.taxonomy)
    except ShieldaError as exc:
        _emit(out, args.format, {"valid": False, "error": str(exc)}, f"invalid: {exc}")
        return EXIT_DATAERR
    doc = {"valid": True, "patterns": len(registry), "mappings": len(registry.mapping)}
    _emit(out, args.format, doc, f"valid: {len(registry)} patterns, {len(registry.mapping)} mappings")
    return EXIT_OK


def _parse_field(raw: str) -> tuple[str, str]:
    key, sep, value = raw.partition("=")
    if not sep or not key:
        raise UsageError(f"--field expects key=value, got {raw!r}")
    return key, value


def _classify(args, data: CanonicalData, out: IO[str]) -> int:
    if not args.message:
        raise UsageError("--message must be non-empty")
    signal = RawExceptionSignal(
        message=args.message,
        origin=Origin(args.origin),
        source_phase_hint=Phase(args.phase_hint) if args.phase_hint else None,
        structured_fields=dict(_parse_field(f) for f in args.field),
    )
    result = data.rules.classify(signal)
    # classification output is always JSON
    out.write(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK if result.is_classified else EXIT_PENDING


def _run(args, data: CanonicalData, out: IO[str]) -> int:
    if args.scenario in BUILTIN_SCENARIOS:
        scenario = builtin_scenario(args.scenario)
    elif Path(args.scenario).is_file():
        scenario = load_scenario(args.scenario)
    else:
        raise UsageError(
            f"unknown scenario {args.scenario!r}; built-ins: {', '.join(sorted(BUILTIN_SCENARIOS))}"
        )
    config = RunConfig(
        seed=args.seed,
        sink=args.sink,
        max_escalation_depth=args.max_depth,
        log_path=args.log,
        queue_path=args.queue,
        data=data,
    )
    report = run_scenario(scenario, config)
    doc = report.to_dict()
    if scenario.expected_trace is not None:
        doc["matches_expected_trace"] = tuple(report.event_kinds) == tuple(scenario.expected_trace)
    lines = [
        f"scenario {scenario.name}: {report.final_status.value} after {len(report.events)} events",
        f"escalation depth reached: {report.max_depth}",
    ]
    lines += [f"outcome {o.pattern_id}: {o.status.value}" for o in report.outcomes]
    lines += [f"directive:\n{d.text}" for d in report.directives]
    if "matches_expected_trace" in doc:
        lines.append(f"matches expected trace: {doc['matches_expected_trace']}")
    if report.log_path:
        lines.append(f"log written to {report.log_path}")
    _emit(out, args.format, doc, "\n".join(lines))
    return report.exit_code


def _trace(args, data: CanonicalData, out: IO[str]) -> int:
    events = read_log(args.log)
    if not 1 <= args.event <= len(events):
        sys.stderr.write(f"log has no event {args.event}\n")
        return EXIT_DATAERR
    symptom = events[args.event - 1]
    signal = None
    prior: Classification | None = None
    if symptom.kind is EventKind.EXCEPTION_RAISED:
        signal = RawExceptionSignal.from_dict(symptom.payload["signal"])
        recorded = next(
            (
                e
                for e in events
                if e.kind is EventKind.CLASSIFIED and e.payload.get("exception_seq") == symptom.seq
            ),
            None,
        )
        prior = (
            Classification.from_dict(recorded.payload["classification"])
            if recorded is not None
            else data.rules.classify(signal)
        )
    chain = root_cause_trace(events, symptom.seq, trace_seeds(symptom, signal))
    doc: dict[str, Any] = {"chain": chain.to_dict(), "root_seq": chain.root.seq}
    lines = [f"chain from event {symptom.seq} ({len(chain)} links):"]
    for link in chain.links:
        shared = ", ".join(str(e) for e in sorted(link.shared_entities))
        lines.append(f"  #{link.seq} {link.event.kind.value} [{link.event.phase.value}] via {shared or '-'}")
    if prior is not None:
        new = reclassify(data.rules, prior, chain)
        doc["prior"] = prior.to_dict()
        doc["reclassification"] = new.to_dict()
        lines.append(f"classification: {prior.exception_id} -> {new.exception_id}")
    _emit(out, args.format, doc, "\n".join(lines))
    return EXIT_OK


def _replay(args, data: CanonicalData, out: IO[str]) -> int:
    report = replay(read_log(args.log), data.registry, data.rules)
    lines = [f"replayed {len(report.decisions)} decisions, {len(report.divergences)} divergences"]
    for d in report.divergences:
        lines.append(f"  #{d.seq} {d.kind.value}: recorded {d.recorded!r}, derived {d.derived!r}")
    _emit(out, args.format, report.to_dict(), "\n".join(lines))
    return EXIT_OK if report.clean else EXIT_DIVERGENCE


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=["human", "json"], default=argparse.SUPPRESS)
    common.add_argument("--data-dir", default=argparse.SUPPRESS, help="directory holding the data files")

    parser = _Parser(prog="shielda", description="Exception handling engine for agentic workflows.")
    parser.add_argument("--format", choices=["human", "json"], default="human")
    parser.add_argument("--data-dir", default=None, help="overrides SHIELDA_DATA_DIR")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    tax = sub.add_parser("taxonomy", help="inspect the exception taxonomy").add_subparsers(
        dest="action", parser_class=_Parser
    )
    tax.required = True
    p = tax.add_parser("list", parents=[common])
    p.add_argument("--phase", choices=[ph.value for ph in Phase])
    p.add_argument("--artifact", choices=[a.value for a in ArtifactKind])
    p.set_defaults(func=_taxonomy_list)

    pat = sub.add_parser("patterns", help="inspect handler patterns").add_subparsers(
        dest="action", parser_class=_Parser
    )
    pat.required = True
    pat.add_parser("list", parents=[common]).set_defaults(func=_patterns_list)
    p = pat.add_parser("show", parents=[common])
    p.add_argument("pattern_id")
    p.set_defaults(func=_patterns_show)
    p = pat.add_parser("validate", parents=[common])
    p.add_argument("file")
    p.set_defaults(func=_patterns_validate)

    p = sub.add_parser("classify", parents=[common], help="classify one exception signal")
    p.add_argument("--message", required=True)
    p.add_argument("--origin", choices=[o.value for o in Origin], default=Origin.INTERNAL.value)
    p.add_argument("--phase-hint", choices=[Phase.REASONING_PLANNING.value, Phase.EXECUTION.value])
    p.add_argument("--field", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=_classify)

    p = sub.add_parser("run", parents=[common], help="run a scenario")
    p.add_argument("--scenario", required=True, help="built-in name or scenario JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="write the event log here (JSONL)")
    p.add_argument("--sink", choices=["human", "drop"], default="human")
    p.add_argument("--queue", help="escalation queue file for the human sink (JSONL)")
    p.add_argument("--max-depth", type=int, default=3)
    p.set_defaults(func=_run)

    p = sub.add_parser("trace", parents=[common], help="trace the root cause of a logged event")
    p.add_argument("--log", required=True)
    p.add_argument("--event", type=int, required=True)
    p.set_defaults(func=_trace)

    p = sub.add_parser("replay", parents=[common], help="re-derive logged decisions")
    p.add_argument("--log", required=True)
    p.set_defaults(func=_replay)
    return parser


def dispatch(argv: Sequence[str], out: IO[str] | None = None, err: IO[str] | None = None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        data = load_canonical(args.data_dir)
        return args.func(args, data, out)
    except UsageError as exc:
        err.write(f"{exc}\n")
        if not str(exc).startswith("usage:"):
            err.write(parser.format_usage())
        return EXIT_USAGE
    except FileNotFoundError as exc:
        err.write(f"shielda: {exc}\n")
        return EXIT_NOINPUT
    except ShieldaError as exc:
        err.write(f"shielda: {type(exc).__name__}: {exc}\n")
        return EXIT_DATAERR


def main(argv: Sequence[str] | None = None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
