"""Transcript stream: one JSONL record per message, tool call and
intervention in commit order, framed by a header (the procedure and the
policies) and a trailing summary.

Timing is deliberately kept out of the stream so two runs of the same
scripted scenario produce byte-identical files; wall time is reported on
the side. ``validate_transcript`` re-checks the run invariants offline:
causality, reachability, the intervention cap, purge completeness after
replacements, and the round cap.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from ..domain import (
    END_NODE,
    USER_NODE,
    WATCHER_NODE,
    Intervention,
    InterventionKind,
    Message,
    MessageKind,
    ToolCallRecord,
    json_line,
)


class TranscriptFormatError(Exception):
    pass


@dataclass(frozen=True)
class InvariantCheck:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class LoadedTranscript:
    header: dict
    events: list[dict]
    summary: dict


def build_records(
    header: dict,
    messages: list[tuple[Message, str]],
    tool_calls: list[tuple[int, ToolCallRecord]],
    interventions: list[tuple[int, Intervention]],
    summary: dict,
) -> list[dict]:
    """Merge the three event kinds into one commit-ordered record list."""
    events: list[tuple[int, dict]] = []
    for message, origin in messages:
        record = {"type": "message", "seq": message.id}
        record.update(message.to_dict())
        record["origin"] = origin
        events.append((message.id, record))
    for seq, call in tool_calls:
        record = {"type": "tool_call", "seq": seq}
        record.update(call.to_dict())
        events.append((seq, record))
    for seq, intervention in interventions:
        record = {"type": "intervention", "seq": seq}
        record.update(intervention.to_dict())
        events.append((seq, record))
    events.sort(key=lambda item: item[0])
    return [{"type": "header", **header}, *[r for _, r in events], {"type": "summary", **summary}]


def write_jsonl(path: str | Path, records: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json_line(r) + "\n" for r in records), encoding="utf-8")


def load_transcript(path: str | Path) -> LoadedTranscript:
    import json

    text = Path(path).read_text(encoding="utf-8")
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise TranscriptFormatError("transcript file is empty")
    try:
        records = [json.loads(line) for line in lines]
    except json.JSONDecodeError as exc:
        raise TranscriptFormatError(f"unparseable transcript line: {exc}")
    if records[0].get("type") != "header" or records[-1].get("type") != "summary":
        raise TranscriptFormatError("transcript must start with a header and end with a summary")
    return LoadedTranscript(header=records[0], events=records[1:-1], summary=records[-1])


def _edges(header: dict) -> list[tuple[str, str]]:
    structure = header.get("op", {}).get("communication_structure", {})
    pairs = []
    for edge in structure.get("edges", []):
        if isinstance(edge, dict):
            pairs.append((edge.get("from", ""), edge.get("to", "")))
    return pairs


def validate_transcript(loaded: LoadedTranscript) -> list[InvariantCheck]:
    checks = [
        _check_causality(loaded),
        _check_reachability(loaded),
        _check_intervention_cap(loaded),
        _check_purge(loaded),
        _check_round_cap(loaded),
    ]
    return checks


def _check_causality(loaded: LoadedTranscript) -> InvariantCheck:
    seen: dict[int, int] = {}
    for record in loaded.events:
        if record.get("type") != "message":
            continue
        mid, round_ = int(record["id"]), int(record["round"])
        cause = record.get("cause")
        if cause is not None:
            if cause not in seen:
                return InvariantCheck("causality", False, f"message {mid} cites missing cause {cause}")
            if cause >= mid:
                return InvariantCheck("causality", False, f"message {mid} cites later cause {cause}")
            if seen[cause] > round_:
                return InvariantCheck(
                    "causality", False, f"message {mid} cites cause from a later round"
                )
        seen[mid] = round_
    return InvariantCheck("causality", True)


def _check_reachability(loaded: LoadedTranscript) -> InvariantCheck:
    edges = set(_edges(loaded.header))
    prior: dict[str, set[str]] = {}
    for record in loaded.events:
        if record.get("type") != "message":
            continue
        sender, recipient, kind = record["sender"], record["recipient"], record["kind"]
        ok = False
        if kind == MessageKind.WATCHER_GUIDANCE.value:
            ok = sender == WATCHER_NODE
        elif kind == MessageKind.FINAL_ANSWER.value:
            ok = recipient == END_NODE and (sender, END_NODE) in edges
        elif sender == USER_NODE:
            ok = (USER_NODE, recipient) in edges
        else:
            # Legal when the workflow has the edge, or as an upward reply to
            # an agent that previously messaged the sender.
            ok = (sender, recipient) in edges or recipient in prior.get(sender, set())
        if not ok:
            return InvariantCheck(
                "reachability",
                False,
                f"message {record['id']}: {sender} -> {recipient} was not legal",
            )
        prior.setdefault(recipient, set()).add(sender)
    return InvariantCheck("reachability", True)


def _check_intervention_cap(loaded: LoadedTranscript) -> InvariantCheck:
    watcher = loaded.header.get("watcher", {})
    count = sum(1 for r in loaded.events if r.get("type") == "intervention")
    if not watcher.get("enabled", False):
        if count:
            return InvariantCheck("intervention_cap", False, "interventions present with supervision off")
        return InvariantCheck("intervention_cap", True)
    cap = watcher.get("cap")
    if cap is not None and count > cap:
        return InvariantCheck("intervention_cap", False, f"{count} interventions exceed cap {cap}")
    return InvariantCheck("intervention_cap", True)


def _check_purge(loaded: LoadedTranscript) -> InvariantCheck:
    for index, record in enumerate(loaded.events):
        if record.get("type") != "intervention":
            continue
        if record.get("kind") != InterventionKind.REPLACEMENT.value:
            continue
        target = record["target"]
        for earlier in loaded.events[:index]:
            kind = earlier.get("type")
            if kind == "message" and target in (earlier["sender"], earlier["recipient"]):
                return InvariantCheck(
                    "purge_completeness",
                    False,
                    f"message {earlier['id']} referencing {target!r} survived its replacement",
                )
            if kind == "tool_call" and earlier["agent"] == target:
                return InvariantCheck(
                    "purge_completeness",
                    False,
                    f"tool record (seq {earlier['seq']}) of {target!r} survived its replacement",
                )
    return InvariantCheck("purge_completeness", True)


def _check_round_cap(loaded: LoadedTranscript) -> InvariantCheck:
    max_rounds = loaded.header.get("policy", {}).get("max_rounds")
    rounds_used = loaded.summary.get("rounds_used", 0)
    if max_rounds is not None and rounds_used > max_rounds:
        return InvariantCheck("round_cap", False, f"{rounds_used} rounds exceed cap {max_rounds}")
    for record in loaded.events:
        round_ = record.get("round")
        if round_ is not None and round_ > rounds_used:
            return InvariantCheck(
                "round_cap", False, f"record seq {record.get('seq')} cites round beyond the summary"
            )
    return InvariantCheck("round_cap", True)
