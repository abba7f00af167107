"""Shared data model: queries, collaboration patterns (SOPs), bound operating
procedures, transcript records, and their validation and canonical JSON forms.

Every type serializes to a stable dict layout so repository files and
transcript streams are byte-reproducible. Ingest tolerates the historical
field spellings found in older pattern files ("Team", "Agent Specifications",
"Communication Sturcture"); output always uses canonical lowercase keys.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Sequence

USER_NODE = "User"
END_NODE = "End"
WATCHER_NODE = "Watcher"

_MISSING = object()


class DomainError(Exception):
    """Base class for errors raised by the data model."""


class UnknownNodeError(DomainError):
    pass


class ParseError(DomainError):
    """Structured ingest failure: no JSON, a missing field, or a bad type.

    ``code`` is one of ``no_json``, ``missing_field``, ``type_mismatch``;
    ``path`` points at the offending element (e.g. ``agents[1].tools``).
    """

    def __init__(self, code: str, path: str = "", message: str = ""):
        self.code = code
        self.path = path
        super().__init__(message or f"{code}: {path}")


class ValidationFailed(DomainError):
    def __init__(self, diagnostics: Sequence["Diagnostic"]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics) or "validation failed")


class TaskKind(str, Enum):
    PLANNING = "planning"
    QA = "qa"
    CODING = "coding"
    OTHER = "other"


class MessageKind(str, Enum):
    TASK = "task"
    CLARIFICATION = "clarification"
    FEEDBACK = "feedback"
    WATCHER_GUIDANCE = "watcher_guidance"
    FINAL_ANSWER = "final_answer"


class ToolOutcome(str, Enum):
    OK = "ok"
    ERROR = "error"


class TerminationReason(str, Enum):
    FINAL_ANSWER = "final_answer"
    ROUND_CAP = "round_cap"
    FATAL_ERROR = "fatal_error"


class InterventionKind(str, Enum):
    GUIDANCE = "guidance"
    REPLACEMENT = "replacement"


def _stable_query_id(text: str) -> str:
    return "q-" + hashlib.sha1(text.encode("utf-8")).hexdigest()[:10]


@dataclass(frozen=True)
class Query:
    text: str
    task_kind: TaskKind = TaskKind.OTHER
    id: str = ""

    def __post_init__(self):
        if not self.text:
            raise ValueError("query text must be non-empty")
        if not self.id:
            object.__setattr__(self, "id", _stable_query_id(self.text))

    def to_dict(self) -> dict:
        return {"id": self.id, "text": self.text, "task_kind": self.task_kind.value}

    @classmethod
    def from_dict(cls, obj: Any, path: str = "query") -> "Query":
        if isinstance(obj, str):
            if not obj:
                raise ParseError("missing_field", f"{path}.text")
            return cls(text=obj)
        if not isinstance(obj, dict):
            raise ParseError("type_mismatch", path, "query must be a string or object")
        text = _alias(obj, "text", "Text")
        if not isinstance(text, str) or not text:
            raise ParseError("missing_field", f"{path}.text")
        kind_raw = _alias(obj, "task_kind", "kind", default=TaskKind.OTHER.value)
        try:
            kind = TaskKind(kind_raw)
        except ValueError:
            raise ParseError("type_mismatch", f"{path}.task_kind", f"unknown task kind {kind_raw!r}")
        return cls(text=text, task_kind=kind, id=str(obj.get("id", "") or ""))


@dataclass(frozen=True)
class NeedAnalysis:
    """Model-produced summary of a query's objective and required capabilities.

    Empty text is legal only on pipeline paths that skip the analysis step.
    """

    text: str = ""

    def to_dict(self) -> str:
        return self.text

    @classmethod
    def from_dict(cls, obj: Any, path: str = "need") -> "NeedAnalysis":
        if obj is None:
            return cls("")
        if isinstance(obj, str):
            return cls(obj)
        if isinstance(obj, dict) and isinstance(obj.get("text"), str):
            return cls(obj["text"])
        raise ParseError("type_mismatch", path, "need analysis must be a string")


@dataclass(frozen=True)
class AgentSpec:
    name: str
    responsibility: str = ""
    instruction: str = ""
    tools: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "responsibility": self.responsibility,
            "instruction": self.instruction,
            "tools": list(self.tools),
        }

    @classmethod
    def from_dict(cls, obj: Any, path: str = "agent") -> "AgentSpec":
        if not isinstance(obj, dict):
            raise ParseError("type_mismatch", path, "agent spec must be an object")
        name = _alias(obj, "name", "Name")
        if not isinstance(name, str) or not name:
            raise ParseError("missing_field", f"{path}.name")
        tools = _alias(obj, "tools", "Tools", default=[])
        if not isinstance(tools, list) or not all(isinstance(t, str) for t in tools):
            raise ParseError("type_mismatch", f"{path}.tools", "tools must be a list of names")
        return cls(
            name=name,
            responsibility=str(_alias(obj, "responsibility", "Responsibility", default="")),
            instruction=str(_alias(obj, "instruction", "Instruction", default="")),
            tools=tuple(tools),
        )


_EDGE_RE = re.compile(r"^\s*(.+?)\s*->\s*(.+?)\s*(?:\(\s*(?:if\s+)?([^)]+?)\s*\))?\s*$")


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    condition: str | None = None

    def to_dict(self) -> dict:
        d = {"from": self.src, "to": self.dst}
        if self.condition is not None:
            d["condition"] = self.condition
        return d

    def pretty(self) -> str:
        if self.condition is not None:
            return f"{self.src} -> {self.dst} (if {self.condition})"
        return f"{self.src} -> {self.dst}"

    @classmethod
    def from_obj(cls, obj: Any, path: str = "edge") -> "Edge":
        if isinstance(obj, str):
            m = _EDGE_RE.match(obj)
            if not m:
                raise ParseError("type_mismatch", path, f"unparseable edge {obj!r}")
            return cls(m.group(1), m.group(2), m.group(3))
        if isinstance(obj, dict):
            src = _alias(obj, "from", "From", "src")
            dst = _alias(obj, "to", "To", "dst")
            if not isinstance(src, str) or not src:
                raise ParseError("missing_field", f"{path}.from")
            if not isinstance(dst, str) or not dst:
                raise ParseError("missing_field", f"{path}.to")
            cond = _alias(obj, "condition", "Condition", default=None)
            if cond is not None and not isinstance(cond, str):
                raise ParseError("type_mismatch", f"{path}.condition")
            return cls(src, dst, cond)
        raise ParseError("type_mismatch", path, "edge must be a string or object")


@dataclass(frozen=True)
class CommunicationStructure:
    edges: tuple[Edge, ...] = ()
    description: str = ""

    def nodes(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.edges:
            seen.setdefault(e.src)
            seen.setdefault(e.dst)
        return list(seen)

    def to_dict(self) -> dict:
        return {
            "edges": [e.to_dict() for e in self.edges],
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, obj: Any, path: str = "communication_structure") -> "CommunicationStructure":
        if not isinstance(obj, dict):
            raise ParseError("type_mismatch", path, "communication structure must be an object")
        edges_raw = _alias(obj, "edges", "Edges")
        if edges_raw is _MISSING:
            raise ParseError("missing_field", f"{path}.edges")
        if not isinstance(edges_raw, list):
            raise ParseError("type_mismatch", f"{path}.edges", "edges must be a list")
        edges = tuple(
            Edge.from_obj(e, f"{path}.edges[{i}]") for i, e in enumerate(edges_raw)
        )
        desc = _alias(obj, "description", "Description", default="")
        if not isinstance(desc, str):
            raise ParseError("type_mismatch", f"{path}.description")
        return cls(edges=edges, description=desc)


def successors(
    structure: CommunicationStructure, node: str, outcome: str | None = None
) -> list[str]:
    """Targets of ``node``'s matching edges, in edge order.

    Unconditioned edges always match; a conditioned edge matches only when
    ``outcome`` equals its label verbatim.
    """
    known = set(structure.nodes()) | {USER_NODE, END_NODE}
    if node not in known:
        raise UnknownNodeError(f"node {node!r} is not part of the structure")
    result = []
    for e in structure.edges:
        if e.src != node:
            continue
        if e.condition is None or (outcome is not None and e.condition == outcome):
            result.append(e.dst)
    return result


@dataclass(frozen=True)
class SOP:
    team: tuple[str, ...]
    agents: tuple[AgentSpec, ...]
    structure: CommunicationStructure

    def agent(self, name: str) -> AgentSpec:
        for a in self.agents:
            if a.name == name:
                return a
        raise UnknownNodeError(f"no agent named {name!r}")

    def to_dict(self) -> dict:
        return {
            "team": list(self.team),
            "agents": [a.to_dict() for a in self.agents],
            "communication_structure": self.structure.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: Any, path: str = "") -> "SOP":
        if not isinstance(obj, dict):
            raise ParseError("type_mismatch", path or "sop", "SOP must be an object")
        p = (path + ".") if path else ""
        team = _alias(obj, "team", "Team")
        if team is _MISSING:
            raise ParseError("missing_field", f"{p}team")
        if not isinstance(team, list) or not all(isinstance(t, str) for t in team):
            raise ParseError("type_mismatch", f"{p}team", "team must be a list of names")
        agents_raw = _alias(obj, "agents", "Agent Specifications", "agent_specifications")
        if agents_raw is _MISSING:
            raise ParseError("missing_field", f"{p}agents")
        if not isinstance(agents_raw, list):
            raise ParseError("type_mismatch", f"{p}agents", "agents must be a list")
        agents = tuple(
            AgentSpec.from_dict(a, f"{p}agents[{i}]") for i, a in enumerate(agents_raw)
        )
        structure_raw = _alias(
            obj, "communication_structure", "Communication Structure", "Communication Sturcture"
        )
        if structure_raw is _MISSING:
            raise ParseError("missing_field", f"{p}communication_structure")
        structure = CommunicationStructure.from_dict(structure_raw, f"{p}communication_structure")
        return cls(team=tuple(team), agents=agents, structure=structure)


@dataclass(frozen=True)
class SOPCase:
    """One repository entry: a query, its need analysis, and the SOP that solved it."""

    id: str
    query: Query
    need: NeedAnalysis
    sop: SOP
    query_embedding: tuple[float, ...] | None = None
    need_embedding: tuple[float, ...] | None = None
    created_at: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "query": self.query.to_dict(),
            "need": self.need.to_dict(),
            "sop": self.sop.to_dict(),
            "query_embedding": list(self.query_embedding) if self.query_embedding is not None else None,
            "need_embedding": list(self.need_embedding) if self.need_embedding is not None else None,
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, obj: Any) -> "SOPCase":
        if not isinstance(obj, dict):
            raise ParseError("type_mismatch", "case", "case must be an object")
        query_raw = _alias(obj, "query", "Query", "User Query", "user_query")
        if query_raw is _MISSING:
            raise ParseError("missing_field", "query")
        need_raw = _alias(obj, "need", "Need", "Need Analysis", "need_analysis", default="")
        sop_raw = _alias(obj, "sop", "SOP")
        if sop_raw is _MISSING:
            raise ParseError("missing_field", "sop")
        qe = obj.get("query_embedding")
        ne = obj.get("need_embedding")
        return cls(
            id=str(obj.get("id", "") or ""),
            query=Query.from_dict(query_raw),
            need=NeedAnalysis.from_dict(need_raw),
            sop=SOP.from_dict(sop_raw, "sop"),
            query_embedding=_embedding(qe, "query_embedding"),
            need_embedding=_embedding(ne, "need_embedding"),
            created_at=obj.get("created_at"),
        )


@dataclass(frozen=True)
class OperatingProcedure:
    """An SOP bound to one concrete query; the executable blueprint of a run."""

    sop: SOP
    bound_query: Query
    provenance: tuple[str, ...] = ()

    @property
    def team(self) -> tuple[str, ...]:
        return self.sop.team

    @property
    def agents(self) -> tuple[AgentSpec, ...]:
        return self.sop.agents

    @property
    def structure(self) -> CommunicationStructure:
        return self.sop.structure

    def agent(self, name: str) -> AgentSpec:
        return self.sop.agent(name)

    def to_dict(self) -> dict:
        d = self.sop.to_dict()
        d["bound_query"] = self.bound_query.to_dict()
        d["provenance"] = list(self.provenance)
        return d

    @classmethod
    def from_dict(cls, obj: Any, bound_query: Query | None = None) -> "OperatingProcedure":
        sop = SOP.from_dict(obj)
        if bound_query is None:
            query_raw = obj.get("bound_query") if isinstance(obj, dict) else None
            if query_raw is None:
                raise ParseError("missing_field", "bound_query")
            bound_query = Query.from_dict(query_raw, "bound_query")
        provenance = obj.get("provenance", []) if isinstance(obj, dict) else []
        if not isinstance(provenance, list):
            raise ParseError("type_mismatch", "provenance")
        return cls(sop=sop, bound_query=bound_query, provenance=tuple(str(p) for p in provenance))


@dataclass(frozen=True)
class Message:
    id: int
    sender: str
    recipient: str
    round: int
    kind: MessageKind
    content: str
    cause: int | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "sender": self.sender,
            "recipient": self.recipient,
            "round": self.round,
            "kind": self.kind.value,
            "content": self.content,
            "cause": self.cause,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Message":
        return cls(
            id=int(obj["id"]),
            sender=obj["sender"],
            recipient=obj["recipient"],
            round=int(obj["round"]),
            kind=MessageKind(obj["kind"]),
            content=obj["content"],
            cause=obj.get("cause"),
        )


@dataclass(frozen=True)
class ToolCallRecord:
    agent: str
    tool: str
    arguments: str
    observation: str
    step: int
    outcome: ToolOutcome = ToolOutcome.OK

    def to_dict(self) -> dict:
        return {
            "agent": self.agent,
            "tool": self.tool,
            "arguments": self.arguments,
            "observation": self.observation,
            "step": self.step,
            "outcome": self.outcome.value,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ToolCallRecord":
        return cls(
            agent=obj["agent"],
            tool=obj["tool"],
            arguments=obj["arguments"],
            observation=obj["observation"],
            step=int(obj["step"]),
            outcome=ToolOutcome(obj["outcome"]),
        )


@dataclass(frozen=True)
class AgentExperience:
    agent: str
    error_attribution: str
    improvement_strategy: str

    def __post_init__(self):
        if not self.agent or not self.error_attribution or not self.improvement_strategy:
            raise ValueError("agent experience fields must be non-empty")

    def to_dict(self) -> dict:
        return {
            "agent": self.agent,
            "error_attribution": self.error_attribution,
            "improvement_strategy": self.improvement_strategy,
        }

    @classmethod
    def from_dict(cls, obj: Any, path: str = "experience") -> "AgentExperience":
        if not isinstance(obj, dict):
            raise ParseError("type_mismatch", path)
        try:
            return cls(
                agent=str(obj.get("agent", "")),
                error_attribution=str(obj.get("error_attribution", "")),
                improvement_strategy=str(obj.get("improvement_strategy", "")),
            )
        except ValueError as exc:
            raise ParseError("missing_field", path, str(exc))


@dataclass(frozen=True)
class PEPRecord:
    """One experience-pool entry: a failed query, its cause, and what each agent should learn."""

    query: Query
    failure_cause: str
    experiences: tuple[AgentExperience, ...]
    query_embedding: tuple[float, ...] | None = None
    id: str | None = None

    def __post_init__(self):
        if not self.experiences:
            raise ValueError("a PEP record requires at least one agent experience")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "query": self.query.to_dict(),
            "failure_cause": self.failure_cause,
            "experiences": [e.to_dict() for e in self.experiences],
            "query_embedding": list(self.query_embedding) if self.query_embedding is not None else None,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PEPRecord":
        if not isinstance(obj, dict):
            raise ParseError("type_mismatch", "record")
        query_raw = _alias(obj, "query", "Query", "User Query")
        if query_raw is _MISSING:
            raise ParseError("missing_field", "query")
        exps_raw = _alias(obj, "experiences", "Experiences", "Agent-Wise Experiences", default=[])
        if not isinstance(exps_raw, list) or not exps_raw:
            raise ParseError("missing_field", "experiences", "at least one experience required")
        exps = tuple(
            AgentExperience.from_dict(e, f"experiences[{i}]") for i, e in enumerate(exps_raw)
        )
        return cls(
            query=Query.from_dict(query_raw),
            failure_cause=str(_alias(obj, "failure_cause", "Failure Cause", default="")),
            experiences=exps,
            query_embedding=_embedding(obj.get("query_embedding"), "query_embedding"),
            id=obj.get("id"),
        )


@dataclass(frozen=True)
class Intervention:
    kind: InterventionKind
    target: str
    payload: dict
    round: int
    pep_refs: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "target": self.target,
            "payload": self.payload,
            "round": self.round,
            "pep_refs": list(self.pep_refs),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Intervention":
        return cls(
            kind=InterventionKind(obj["kind"]),
            target=obj["target"],
            payload=obj.get("payload", {}),
            round=int(obj["round"]),
            pep_refs=tuple(obj.get("pep_refs", [])),
        )


@dataclass(frozen=True)
class Verdict:
    passed: bool
    detail: str = ""
    evaluator: str = "checker"

    def to_dict(self) -> dict:
        return {"passed": self.passed, "detail": self.detail, "evaluator": self.evaluator}


@dataclass
class ExecutionTranscript:
    """Everything one run produced, in commit order inside the JSONL stream."""

    op: OperatingProcedure
    messages: list[Message] = field(default_factory=list)
    tool_calls: list[ToolCallRecord] = field(default_factory=list)
    interventions: list[Intervention] = field(default_factory=list)
    final_answer: str | None = None
    rounds_used: int = 0
    wall_time: float = 0.0
    terminated_by: TerminationReason = TerminationReason.ROUND_CAP


@dataclass(frozen=True)
class Diagnostic:
    """A named invariant violation produced by ``validate_sop``."""

    code: str
    subject: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.code}({self.subject})" + (f": {self.detail}" if self.detail else "")


def validate_sop(sop: SOP, registry_tools: Iterable[str]) -> list[Diagnostic]:
    """Check every structural invariant of an SOP against a tool registry.

    Pure and idempotent; an empty list means the SOP is well formed.
    """
    registry = set(registry_tools)
    diags: list[Diagnostic] = []

    names = [a.name for a in sop.agents]
    if list(sop.team) != names:
        diags.append(
            Diagnostic(
                "team_mismatch",
                ",".join(sop.team),
                "team list must equal the agent names, in order",
            )
        )
    seen: set[str] = set()
    for a in sop.agents:
        if not a.name:
            diags.append(Diagnostic("empty_name", "", "agent name must be non-empty"))
            continue
        if a.name in seen:
            diags.append(Diagnostic("duplicate_agent", a.name, "agent names must be unique"))
        seen.add(a.name)
        for t in a.tools:
            if t not in registry:
                diags.append(
                    Diagnostic("unknown_tool", t, f"agent {a.name!r} references unregistered tool {t!r}")
                )

    team = set(sop.team)
    valid_nodes = team | {USER_NODE, END_NODE}
    edges = sop.structure.edges
    for i, e in enumerate(edges):
        for endpoint in (e.src, e.dst):
            if endpoint not in valid_nodes:
                diags.append(Diagnostic("unknown_node", endpoint, f"edge {i}: {e.pretty()}"))
    if not any(e.src == USER_NODE for e in edges):
        diags.append(Diagnostic("no_entry", USER_NODE, "at least one edge must leave User"))
    if not any(e.dst == END_NODE for e in edges):
        diags.append(Diagnostic("no_exit", END_NODE, "at least one edge must reach End"))
    if any(e.dst == USER_NODE for e in edges):
        diags.append(Diagnostic("user_inbound", USER_NODE, "User cannot receive edges"))
    if any(e.src == END_NODE for e in edges):
        diags.append(Diagnostic("end_outbound", END_NODE, "End cannot emit edges"))

    for cycle in _unconditioned_cycles(list(sop.team), edges):
        diags.append(
            Diagnostic(
                "unconditioned_cycle",
                ",".join(cycle),
                "a cycle must be guarded by at least one conditioned edge",
            )
        )
    return diags


def _unconditioned_cycles(team: list[str], edges: Sequence[Edge]) -> list[list[str]]:
    # A loop is only a livelock risk when it can be traversed without ever
    # taking a conditioned edge, so cycles are searched in the unconditioned
    # subgraph (Tarjan SCC; self-loops included).
    adj: dict[str, list[str]] = {n: [] for n in team}
    for e in edges:
        if e.condition is None and e.src in adj and e.dst in adj:
            adj[e.src].append(e.dst)

    index: dict[str, int] = {}
    low: dict[str, int] = {}
    stack: list[str] = []
    on_stack: set[str] = set()
    counter = [0]
    cycles: list[list[str]] = []

    def strong(v: str) -> None:
        index[v] = low[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on_stack.add(v)
        for w in adj[v]:
            if w not in index:
                strong(w)
                low[v] = min(low[v], low[w])
            elif w in on_stack:
                low[v] = min(low[v], index[w])
        if low[v] == index[v]:
            comp = []
            while True:
                w = stack.pop()
                on_stack.discard(w)
                comp.append(w)
                if w == v:
                    break
            if len(comp) > 1 or v in adj[v]:
                cycles.append(sorted(comp, key=team.index))

    for v in team:
        if v not in index:
            strong(v)
    return cycles


def _alias(obj: dict, *keys: str, default: Any = _MISSING) -> Any:
    for k in keys:
        if k in obj:
            return obj[k]
    return default


def _embedding(value: Any, path: str) -> tuple[float, ...] | None:
    if value is None:
        return None
    if not isinstance(value, list) or not all(isinstance(x, (int, float)) for x in value):
        raise ParseError("type_mismatch", path, "embedding must be a list of numbers")
    return tuple(float(x) for x in value)


def canonical_json(data: Any) -> str:
    """Pretty canonical form used for files the repository owns."""
    return json.dumps(data, ensure_ascii=False, indent=2) + "\n"


def json_line(data: Any) -> str:
    """Compact single-line form used for JSONL streams."""
    return json.dumps(data, ensure_ascii=False, separators=(",", ":"))
