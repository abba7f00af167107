"""Operator entry points.

    sopflow bootstrap <manifest> [--config C] [--store DIR]
    sopflow run "<query>" [flags]
    sopflow replay <transcript.jsonl>
    sopflow inspect <store-dir> [--show ID]

Exit codes: 0 success, 1 execution failure (a transcript is still written),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .domain import ParseError, Query, SOPCase, TaskKind, ValidationFailed
from .engine import TranscriptFormatError, load_transcript, validate_transcript, write_jsonl
from .gateway import ModelError
from .pipeline import ConfigError, Runtime, load_config
from .reflection import bootstrap_repository, load_task_manifest
from .repository import StorageError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sopflow")
    sub = parser.add_subparsers(dest="command", required=True)

    boot = sub.add_parser("bootstrap", help="populate the stores from a training manifest")
    boot.add_argument("manifest")
    boot.add_argument("--config")
    boot.add_argument("--store")
    boot.add_argument("--backend", choices=["scripted", "http"])
    boot.add_argument("--script", help="scripted rules JSON")

    run = sub.add_parser("run", help="run one query through the full pipeline")
    run.add_argument("query")
    run.add_argument("--task-kind", choices=[k.value for k in TaskKind], default=TaskKind.OTHER.value)
    run.add_argument("--config")
    run.add_argument("--store")
    run.add_argument("--transcript", default="transcript.jsonl")
    run.add_argument("--backend", choices=["scripted", "http"])
    run.add_argument("--script")
    run.add_argument("--k", type=int)
    run.add_argument("--lambda", dest="lam", type=float)
    run.add_argument("--mode", choices=["hybrid", "query", "need"])
    run.add_argument("--no-sop-rag", action="store_true")
    run.add_argument("--fixed-sop", metavar="CASE_ID")
    run.add_argument("--no-watcher", action="store_true")
    run.add_argument("--no-pep", action="store_true")
    run.add_argument("--interval", type=int)
    run.add_argument("--env-threshold", type=int)
    run.add_argument("--cap", type=int)
    run.add_argument("--max-rounds", type=int)
    run.add_argument("--seed", type=int)

    replay = sub.add_parser("replay", help="re-validate the invariants of a transcript")
    replay.add_argument("transcript")

    inspect = sub.add_parser("inspect", help="list or pretty-print store entries")
    inspect.add_argument("store")
    inspect.add_argument("--show", metavar="ENTRY_ID")
    inspect.add_argument("--kind", choices=["sop", "pep"])

    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    if getattr(args, "backend", None):
        overrides["backend"] = args.backend
    if getattr(args, "script", None):
        overrides["script"] = args.script
    retrieval = {}
    if getattr(args, "k", None) is not None:
        retrieval["k"] = args.k
    if getattr(args, "lam", None) is not None:
        retrieval["lambda"] = args.lam
    if getattr(args, "mode", None):
        retrieval["mode"] = args.mode
    if retrieval:
        overrides["retrieval"] = retrieval
    watcher = {}
    if getattr(args, "no_watcher", False):
        watcher["enabled"] = False
    if getattr(args, "no_pep", False):
        watcher["use_pep"] = False
    if getattr(args, "interval", None) is not None:
        watcher["interval"] = args.interval
    if getattr(args, "env_threshold", None) is not None:
        watcher["env_threshold"] = args.env_threshold
    if getattr(args, "cap", None) is not None:
        watcher["cap"] = args.cap
    if watcher:
        overrides["watcher"] = watcher
    engine = {}
    if getattr(args, "max_rounds", None) is not None:
        engine["max_rounds"] = args.max_rounds
    if getattr(args, "seed", None) is not None:
        engine["seed"] = args.seed
    if engine:
        overrides["engine"] = engine
    return overrides


def cmd_bootstrap(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    if not manifest_path.is_file():
        print(f"manifest not found: {manifest_path}", file=sys.stderr)
        return 2
    try:
        tasks = load_task_manifest(manifest_path)
        config = load_config(args.config, _overrides_from_args(args))
        runtime = Runtime.from_config(config, store_dir=args.store)
    except (ConfigError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    report = bootstrap_repository(tasks, runtime)
    print(f"+{report.cases_added} SOP, +{report.peps_added} PEP")
    print(
        f"tasks passed: {report.tasks_passed}, failed: {report.tasks_failed}",
        file=sys.stderr,
    )
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config, _overrides_from_args(args))
        runtime = Runtime.from_config(config, store_dir=args.store)
        query = Query(text=args.query, task_kind=TaskKind(args.task_kind))
        if args.fixed_sop is not None:
            runtime.case_store.get(args.fixed_sop)  # fail fast on unknown ids
    except (ConfigError, StorageError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        outcome = runtime.run_query(
            query, no_sop_rag=args.no_sop_rag, fixed_sop=args.fixed_sop
        )
    except (ModelError, ParseError, ValidationFailed) as exc:
        # Failed before the engine could run; write whatever exists.
        if runtime.last_engine is not None and runtime.last_engine.records:
            write_jsonl(args.transcript, runtime.last_engine.records)
        print(f"execution failed: {exc}", file=sys.stderr)
        return 1
    write_jsonl(args.transcript, outcome.records)
    transcript = outcome.transcript
    tokens = runtime.gateway.total_tokens or "n/a"
    print(
        f"wall_time={outcome.wall_time:.3f}s gateway_calls={outcome.gateway_calls}"
        f" tokens={tokens} rounds={transcript.rounds_used}"
        f" terminated_by={transcript.terminated_by.value} transcript={args.transcript}",
        file=sys.stderr,
    )
    if transcript.terminated_by.value == "fatal_error":
        print("execution failed; see transcript", file=sys.stderr)
        return 1
    if transcript.final_answer is not None:
        print(transcript.final_answer)
    else:
        print("(no final answer; terminated by " + transcript.terminated_by.value + ")")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    path = Path(args.transcript)
    if not path.is_file():
        print(f"transcript not found: {path}", file=sys.stderr)
        return 2
    try:
        loaded = load_transcript(path)
    except TranscriptFormatError as exc:
        print(f"unreadable transcript: {exc}", file=sys.stderr)
        return 2
    failed = False
    for check in validate_transcript(loaded):
        status = "PASS" if check.passed else "FAIL"
        detail = f" ({check.detail})" if check.detail else ""
        print(f"{check.name}: {status}{detail}")
        failed = failed or not check.passed
    return 1 if failed else 0


def _load_store_entries(store_dir: Path, kind: str) -> list[dict]:
    sub = store_dir / kind
    manifest = sub / "manifest.json"
    if not manifest.is_file():
        return []
    order = json.loads(manifest.read_text(encoding="utf-8")).get("order", [])
    entries = []
    for entry_id in order:
        entries.append(json.loads((sub / f"{entry_id}.json").read_text(encoding="utf-8")))
    return entries


def cmd_inspect(args: argparse.Namespace) -> int:
    store_dir = Path(args.store)
    if not store_dir.is_dir():
        print(f"store not found: {store_dir}", file=sys.stderr)
        return 2
    try:
        sop_entries = _load_store_entries(store_dir, "sop")
        pep_entries = _load_store_entries(store_dir, "pep")
    except (OSError, json.JSONDecodeError) as exc:
        print(f"unreadable store: {exc}", file=sys.stderr)
        return 2

    if args.show:
        for entry in sop_entries:
            if entry.get("id") == args.show:
                _print_case(entry)
                return 0
        for entry in pep_entries:
            if entry.get("id") == args.show:
                print(json.dumps(entry, ensure_ascii=False, indent=2))
                return 0
        print(f"no entry with id {args.show!r}", file=sys.stderr)
        return 2

    if args.kind in (None, "sop"):
        for entry in sop_entries:
            case = SOPCase.from_dict(entry)
            tools = sorted({t for a in case.sop.agents for t in a.tools})
            print(
                f"{case.id}  team={len(case.sop.team)}  tools={','.join(tools) or '-'}"
                f"  query={case.query.text[:60]}"
            )
        if not sop_entries:
            print("(no SOP cases)")
    if args.kind in (None, "pep"):
        for entry in pep_entries:
            agents = ",".join(e.get("agent", "?") for e in entry.get("experiences", []))
            print(
                f"{entry.get('id')}  agents={agents or '-'}"
                f"  cause={str(entry.get('failure_cause', ''))[:60]}"
            )
    return 0


def _print_case(entry: dict) -> None:
    case = SOPCase.from_dict(entry)
    print(f"id: {case.id}")
    print(f"query ({case.query.task_kind.value}): {case.query.text}")
    print(f"need: {case.need.text}")
    print(f"team: {', '.join(case.sop.team)}")
    print("agents:")
    for agent in case.sop.agents:
        tools = ", ".join(agent.tools) or "-"
        print(f"  - {agent.name} [tools: {tools}]: {agent.responsibility}")
    print("communication structure:")
    for edge in case.sop.structure.edges:
        print(f"  {edge.pretty()}")
    if case.sop.structure.description:
        print(f"description: {case.sop.structure.description}")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "bootstrap":
        return cmd_bootstrap(args)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "replay":
        return cmd_replay(args)
    if args.command == "inspect":
        return cmd_inspect(args)
    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
