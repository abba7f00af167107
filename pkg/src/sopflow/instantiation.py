"""Query to operating procedure: need analysis, exemplar-guided generation,
and tolerant parse/repair of model output.

Prompt wording lives in versioned assets under ``prompts/`` so it can be
tuned without code changes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from string import Template
from typing import Sequence

from .domain import (
    NeedAnalysis,
    OperatingProcedure,
    ParseError,
    Query,
    SOPCase,
    ValidationFailed,
    validate_sop,
)
from .gateway import EmptyReply, ModelGateway, prompt

REPAIR_BUDGET = 2

STRATEGY_MINIMAL = (
    "Start with the smallest team that can solve the task; a single agent is"
    " acceptable. Add roles only when a simpler team has already failed."
)
STRATEGY_DIVERSE = (
    "Create diverse specialist roles, each responsible for distinct tools,"
    " plus a dedicated final-answer submitter."
)


@dataclass(frozen=True)
class InstantiateResult:
    op: OperatingProcedure
    repairs: int = 0
    gateway_calls: int = 0


def load_template(name: str) -> Template:
    text = resources.files("sopflow").joinpath(f"prompts/{name}.txt").read_text(encoding="utf-8")
    return Template(text)


def analyze_need(query: Query, gateway: ModelGateway) -> NeedAnalysis:
    """Ask the model what the query requires; retries once on an empty reply."""
    chat = prompt(
        ("user", load_template("need_analysis").substitute(query=query.text)),
        temperature=gateway.temperature,
    )
    for attempt in range(2):
        reply = gateway.complete(chat)
        text = reply.text.strip()
        if text:
            return NeedAnalysis(text)
    raise EmptyReply("need analysis came back empty twice")


_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*\n(.*?)```", re.DOTALL)


def extract_json(text: str) -> dict:
    """First JSON object in ``text``, tolerating prose and code fences."""
    candidates = [m.group(1) for m in _FENCE_RE.finditer(text)]
    candidates.append(text)
    decoder = json.JSONDecoder()
    for chunk in candidates:
        idx = chunk.find("{")
        while idx != -1:
            try:
                obj, _ = decoder.raw_decode(chunk[idx:])
            except json.JSONDecodeError:
                idx = chunk.find("{", idx + 1)
                continue
            if isinstance(obj, dict):
                return obj
            idx = chunk.find("{", idx + 1)
    raise ParseError("no_json", "", "reply contains no JSON object")


def parse_op(text: str, query: Query) -> OperatingProcedure:
    """Map a model reply onto an operating procedure bound to ``query``."""
    return OperatingProcedure.from_dict(extract_json(text), bound_query=query)


def _render_exemplars(retrieved: Sequence[SOPCase]) -> str:
    if not retrieved:
        return "No reference procedures are available; rely on your own knowledge."
    blocks = ["Reference procedures from similar past cases:"]
    for case in retrieved:
        blocks.append(json.dumps(case.sop.to_dict(), ensure_ascii=False, indent=2))
    return "\n".join(blocks)


def instantiate(
    query: Query,
    need: NeedAnalysis,
    retrieved: Sequence[SOPCase],
    gateway: ModelGateway,
    registry_tools: Sequence[str],
    *,
    fixed_case: SOPCase | None = None,
    strategy_hint: str = "",
    repair_budget: int = REPAIR_BUDGET,
) -> InstantiateResult:
    """Produce a validated operating procedure for ``query``.

    ``fixed_case`` binds a stored SOP verbatim without any model call. An
    empty ``retrieved`` list simply omits the exemplar section. On parse or
    validation failure the model is re-prompted with the diagnostics, at most
    ``repair_budget`` times beyond the first call.
    """
    if fixed_case is not None:
        op = OperatingProcedure(
            sop=fixed_case.sop, bound_query=query, provenance=(fixed_case.id,)
        )
        diags = validate_sop(op.sop, registry_tools)
        if diags:
            raise ValidationFailed(diags)
        return InstantiateResult(op=op, repairs=0, gateway_calls=0)

    base = load_template("instantiate").substitute(
        tools=", ".join(sorted(registry_tools)) or "(none)",
        strategy=(strategy_hint + "\n") if strategy_hint else "",
        query=query.text,
        need=need.text or "(not available)",
        exemplars=_render_exemplars(retrieved),
    )
    provenance = tuple(case.id for case in retrieved)

    feedback = ""
    calls = 0
    last_error: Exception | None = None
    for attempt in range(1 + repair_budget):
        chat = prompt(("user", base + feedback), temperature=gateway.temperature)
        reply = gateway.complete(chat)
        calls += 1
        try:
            op = parse_op(reply.text, query)
            diags = validate_sop(op.sop, registry_tools)
            if diags:
                raise ValidationFailed(diags)
        except (ParseError, ValidationFailed) as exc:
            last_error = exc
            feedback = (
                "\n[repair] Your previous reply was rejected: "
                f"{exc}. Reply again with one corrected JSON object."
            )
            continue
        op = OperatingProcedure(sop=op.sop, bound_query=query, provenance=provenance)
        return InstantiateResult(op=op, repairs=attempt, gateway_calls=calls)
    raise last_error  # type: ignore[misc]
