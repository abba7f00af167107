"""Shared builders for scripted scenarios."""

from __future__ import annotations

import json
import re

import pytest

from sopflow.domain import (
    NeedAnalysis,
    OperatingProcedure,
    Query,
    SOP,
    SOPCase,
    TaskKind,
)
from sopflow.engine import ToolRegistry, build_default_registry
from sopflow.gateway import ModelGateway, ScriptedBackend, ScriptRule


def rule(*markers: str, response: str, max_uses: int | None = None) -> ScriptRule:
    """Rule matching prompts that contain all markers, in order."""
    pattern = "(?s)" + ".*".join(re.escape(m) for m in markers)
    return ScriptRule(matcher=pattern, response=response, max_uses=max_uses, regex=True)


def gateway_for(rules, dim: int = 256, **kwargs) -> ModelGateway:
    return ModelGateway(ScriptedBackend(list(rules)), embed_dim=dim, **kwargs)


def sop_from(raw: dict) -> SOP:
    return SOP.from_dict(raw)


def chain_op(query: Query, *names: str, tools: dict[str, list[str]] | None = None) -> OperatingProcedure:
    """User -> names[0] -> ... -> names[-1] -> End."""
    tools = tools or {}
    agents = [
        {
            "name": n,
            "responsibility": f"{n} does its part",
            "instruction": f"You are {n}.",
            "tools": tools.get(n, []),
        }
        for n in names
    ]
    edges = ["User -> " + names[0]]
    edges += [f"{a} -> {b}" for a, b in zip(names, names[1:])]
    edges += [f"{names[-1]} -> End"]
    sop = SOP.from_dict(
        {
            "team": list(names),
            "agents": agents,
            "communication_structure": {"edges": edges, "description": "a simple chain"},
        }
    )
    return OperatingProcedure(sop=sop, bound_query=query)


def solver_op(query: Query, tools: list[str] | None = None, instruction: str = "Solve the task.") -> OperatingProcedure:
    sop = SOP.from_dict(
        {
            "team": ["Solver"],
            "agents": [
                {
                    "name": "Solver",
                    "responsibility": "Solve the task end to end",
                    "instruction": instruction,
                    "tools": tools or [],
                }
            ],
            "communication_structure": {
                "edges": ["User -> Solver", "Solver -> End"],
                "description": "a single solver",
            },
        }
    )
    return OperatingProcedure(sop=sop, bound_query=query)


def simple_case(text: str, need: str, case_id: str = "") -> SOPCase:
    return SOPCase(
        id=case_id,
        query=Query(text=text, task_kind=TaskKind.OTHER),
        need=NeedAnalysis(need),
        sop=SOP.from_dict(
            {
                "team": ["Solver"],
                "agents": [
                    {
                        "name": "Solver",
                        "responsibility": "solve",
                        "instruction": "Solve the task.",
                        "tools": [],
                    }
                ],
                "communication_structure": {
                    "edges": ["User -> Solver", "Solver -> End"],
                    "description": "single solver",
                },
            }
        ),
    )


@pytest.fixture
def registry() -> ToolRegistry:
    reg = ToolRegistry()
    reg.register("noop", "tool: noop | args: <anything>", lambda args: f"noop saw {args}")
    return reg


@pytest.fixture
def default_registry(tmp_path) -> ToolRegistry:
    corpus = tmp_path / "corpus.json"
    corpus.write_text(
        json.dumps([{"query": "capital of France", "snippet": "Paris is the capital of France."}]),
        encoding="utf-8",
    )
    return build_default_registry(
        sandbox_dir=tmp_path / "sandbox", file_root=tmp_path, search_corpus=corpus
    )


def bootstrap_rules() -> list[ScriptRule]:
    """Scripted rules for the five-task bootstrap: alpha/bravo/charlie pass
    first try, delta/echo pass after one diagnosed revision."""
    rules = [
        rule("[need-analysis]", response="Needs a single solver agent and no tools."),
    ]
    op_json = json.dumps(
        {
            "team": ["Solver"],
            "agents": [
                {
                    "name": "Solver",
                    "responsibility": "Solve the task end to end",
                    "instruction": "Solve the task and submit the answer.",
                    "tools": [],
                }
            ],
            "communication_structure": {
                "edges": ["User -> Solver", "Solver -> End"],
                "description": "a single solver",
            },
        }
    )
    revised_instruction = "Solve the task carefully, double-checking the token before submitting."
    revised_op = json.loads(op_json)
    revised_op["agents"][0]["instruction"] = revised_instruction
    distilled = json.loads(op_json)
    distilled["agents"][0]["instruction"] = "Solve whatever task arrives and submit the answer."
    rules.append(rule("[instantiate]", response=op_json))
    for name in ("alpha", "bravo", "charlie"):
        rules.append(
            rule(
                "[agent:Solver]",
                f"task {name}",
                response=f"Thought: straightforward.\nAction: final: answer {name}",
            )
        )
    for name in ("delta", "echo"):
        rules.append(
            rule(
                "[agent:Solver]",
                revised_instruction,
                f"task {name}",
                response=f"Thought: corrected.\nAction: final: answer {name}",
            )
        )
        rules.append(
            rule(
                "[agent:Solver]",
                f"task {name}",
                response="Thought: guessing.\nAction: final: wrong answer",
                max_uses=1,
            )
        )
        rules.append(
            rule(
                "[diagnose-failure]",
                f"task {name}",
                response=json.dumps(
                    {
                        "failure_cause": "the solver guessed instead of checking the expected token",
                        "experiences": [
                            {
                                "agent": "Solver",
                                "error_attribution": "submitted an unchecked guess",
                                "improvement_strategy": "verify the expected token before finalizing",
                            }
                        ],
                        "revised_op": revised_op,
                    }
                ),
            )
        )
    rules.append(rule("[distill-sop]", response=json.dumps(distilled)))
    rules.append(rule("[watcher-review]", response="VERDICT: NORMAL"))
    return rules


def ring_op(query: Query, n: int) -> OperatingProcedure:
    """n agents passing work around a loop guarded by a conditioned edge."""
    names = [f"A{i}" for i in range(1, n + 1)]
    agents = [
        {"name": name, "responsibility": "relay", "instruction": f"You are {name}.", "tools": []}
        for name in names
    ]
    edges = ["User -> A1"]
    edges += [f"A{i} -> A{i + 1}" for i in range(1, n)]
    edges += [f"A{n} -> A1 (if loop)", f"A{n} -> End"]
    sop = SOP.from_dict(
        {
            "team": names,
            "agents": agents,
            "communication_structure": {"edges": edges, "description": "a guarded relay ring"},
        }
    )
    return OperatingProcedure(sop=sop, bound_query=query)


def ring_rules(n: int, hops: int = 30) -> list[ScriptRule]:
    """Distinct budgeted replies so the repeated-message rule stays quiet."""
    rules = []
    for hop in range(hops):
        for i in range(1, n + 1):
            target = f"A{i + 1}" if i < n else "A1"
            response = f"Thought: relay {hop}.\nAction: message: {target} | ping {hop} from A{i}"
            if i == n:
                response += "\noutcome: loop"
            rules.append(rule(f"[agent:A{i}]", response=response, max_uses=1))
    rules.append(rule("[watcher-review]", response="VERDICT: NORMAL"))
    return rules


def write_rules(path, rules) -> None:
    payload = [
        {
            "match": r.matcher,
            "response": r.response,
            "max_uses": r.max_uses,
            "regex": r.regex,
        }
        for r in rules
    ]
    path.write_text(json.dumps(payload, ensure_ascii=False, indent=1), encoding="utf-8")


def bootstrap_manifest() -> list[dict]:
    return [
        {
            "query": f"task {name}",
            "task_kind": "other",
            "checker": {"kind": "contains", "value": f"answer {name}"},
            "max_iterations": 3,
        }
        for name in ("alpha", "bravo", "charlie", "delta", "echo")
    ]
