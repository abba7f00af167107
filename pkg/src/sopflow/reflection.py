"""Training-time loop: judge outcomes against checkers or a model judge,
distill successful procedures into reusable patterns, diagnose failures into
experience records plus a revised procedure, and bootstrap the stores.

Nothing in this module runs at test time; stores are only ever mutated here.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .domain import (
    AgentExperience,
    ExecutionTranscript,
    NeedAnalysis,
    OperatingProcedure,
    ParseError,
    PEPRecord,
    Query,
    SOPCase,
    TaskKind,
    TerminationReason,
    ValidationFailed,
    Verdict,
    validate_sop,
)
from .gateway import ModelGateway, prompt
from .instantiation import (
    REPAIR_BUDGET,
    STRATEGY_DIVERSE,
    STRATEGY_MINIMAL,
    extract_json,
    load_template,
)

CHECKER_TIMEOUT = 10.0


class NoEvaluator(Exception):
    pass


@dataclass(frozen=True)
class CheckerSpec:
    """How to decide pass/fail for one training task.

    kind ``contains``/``equals`` test the final answer text directly;
    ``command`` writes the answer to ``answer_file`` inside a scratch
    directory and runs a shell command there (pass on exit 0, and on
    ``expected`` appearing in stdout when given).
    """

    kind: str
    value: str = ""
    command: str = ""
    expected: str = ""
    answer_file: str = "answer.txt"

    @classmethod
    def from_dict(cls, obj: dict) -> "CheckerSpec":
        kind = obj.get("kind", "")
        if kind not in ("contains", "equals", "command"):
            raise ValueError(f"unknown checker kind {kind!r}")
        return cls(
            kind=kind,
            value=str(obj.get("value", "")),
            command=str(obj.get("command", "")),
            expected=str(obj.get("expected", "")),
            answer_file=str(obj.get("answer_file", "answer.txt")),
        )


@dataclass(frozen=True)
class TrainingTask:
    query: Query
    checker: CheckerSpec | None = None
    label: str = ""
    max_iterations: int = 3

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainingTask":
        query = Query(
            text=str(obj["query"]),
            task_kind=TaskKind(obj.get("task_kind", TaskKind.OTHER.value)),
        )
        checker = CheckerSpec.from_dict(obj["checker"]) if obj.get("checker") else None
        return cls(
            query=query,
            checker=checker,
            label=str(obj.get("label", "")),
            max_iterations=int(obj.get("max_iterations", 3)),
        )


def load_task_manifest(path: str | Path) -> list[TrainingTask]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ValueError("task manifest must hold a JSON list")
    return [TrainingTask.from_dict(item) for item in raw]


def judge(
    transcript: ExecutionTranscript, task: TrainingTask, gateway: ModelGateway | None = None
) -> Verdict:
    """Checkers are authoritative; the model judge only fills their absence."""
    evaluator = "checker" if task.checker is not None else "model_judge"
    if task.checker is None and gateway is None:
        raise NoEvaluator("task carries no checker and no model judge is available")
    if transcript.terminated_by is not TerminationReason.FINAL_ANSWER or not transcript.final_answer:
        return Verdict(passed=False, detail="no deliverable", evaluator=evaluator)
    answer = transcript.final_answer

    if task.checker is not None:
        return _run_checker(task.checker, answer)

    chat = prompt(
        (
            "user",
            load_template("judge").substitute(
                query=task.query.text, label=task.label or "(none)", answer=answer
            ),
        ),
        temperature=gateway.temperature,
    )
    reply = gateway.complete(chat).text.strip()
    if reply.upper().startswith("PASS"):
        return Verdict(passed=True, detail=reply, evaluator="model_judge")
    return Verdict(passed=False, detail=reply, evaluator="model_judge")


def _run_checker(checker: CheckerSpec, answer: str) -> Verdict:
    if checker.kind == "contains":
        ok = checker.value in answer
        return Verdict(passed=ok, detail="contains check", evaluator="checker")
    if checker.kind == "equals":
        ok = answer.strip() == checker.value.strip()
        return Verdict(passed=ok, detail="equals check", evaluator="checker")
    workdir = Path(tempfile.mkdtemp(prefix="sopflow-check-"))
    (workdir / checker.answer_file).write_text(answer, encoding="utf-8")
    try:
        proc = subprocess.run(
            ["bash", "-c", checker.command],
            cwd=workdir,
            capture_output=True,
            text=True,
            timeout=CHECKER_TIMEOUT,
        )
    except subprocess.TimeoutExpired:
        return Verdict(passed=False, detail="checker timed out", evaluator="checker")
    output = (proc.stdout + proc.stderr).strip()
    passed = proc.returncode == 0 and (not checker.expected or checker.expected in proc.stdout)
    return Verdict(passed=passed, detail=output[:500], evaluator="checker")


def distill_sop(
    op: OperatingProcedure,
    query: Query,
    need: NeedAnalysis,
    gateway: ModelGateway,
    case_store,
    repair_budget: int = REPAIR_BUDGET,
) -> SOPCase:
    """Generalize a winning procedure and store it as a new case."""
    base = load_template("distill").substitute(
        op=json.dumps(op.sop.to_dict(), ensure_ascii=False, indent=2),
        query=query.text,
    )
    feedback = ""
    last_error: Exception | None = None
    for _attempt in range(1 + repair_budget):
        reply = gateway.complete(
            prompt(("user", base + feedback), temperature=gateway.temperature)
        )
        try:
            from .domain import SOP

            sop = SOP.from_dict(extract_json(reply.text))
            diags = validate_sop(sop, case_store.tool_names)
            if diags:
                raise ValidationFailed(diags)
        except (ParseError, ValidationFailed) as exc:
            last_error = exc
            feedback = (
                f"\n[repair] Your previous reply was rejected: {exc}."
                " Reply again with one corrected JSON object."
            )
            continue
        case = SOPCase(id="", query=query, need=need, sop=sop)
        case_id = case_store.add_case(case)
        return case_store.get(case_id)
    raise last_error  # type: ignore[misc]


@dataclass(frozen=True)
class Diagnosis:
    failure_cause: str
    experiences: tuple[AgentExperience, ...]
    revised_op: OperatingProcedure
    pep_id: str


def diagnose(
    transcript: ExecutionTranscript,
    verdict: Verdict,
    gateway: ModelGateway,
    pep_store,
    registry_tools: Sequence[str],
    repair_budget: int = REPAIR_BUDGET,
) -> Diagnosis:
    """Attribute a failure to agents, pool the lessons, and revise the OP."""
    op = transcript.op
    base = load_template("diagnose").substitute(
        verdict=verdict.detail or "failed",
        op=json.dumps(op.to_dict(), ensure_ascii=False, indent=2),
        trajectory=_render_trajectory(transcript),
    )
    team = set(op.team)
    feedback = ""
    last_error: Exception | None = None
    for _attempt in range(1 + repair_budget):
        reply = gateway.complete(
            prompt(("user", base + feedback), temperature=gateway.temperature)
        )
        try:
            raw = extract_json(reply.text)
            exps_raw = raw.get("experiences", [])
            if not isinstance(exps_raw, list) or not exps_raw:
                raise ParseError("missing_field", "experiences", "at least one experience required")
            experiences = tuple(
                AgentExperience.from_dict(e, f"experiences[{i}]") for i, e in enumerate(exps_raw)
            )
            unknown = [e.agent for e in experiences if e.agent not in team]
            if unknown:
                raise ParseError(
                    "type_mismatch", "experiences", f"unknown agents named: {unknown}"
                )
            revised_raw = raw.get("revised_op")
            if revised_raw is None:
                raise ParseError("missing_field", "revised_op")
            revised = OperatingProcedure.from_dict(revised_raw, bound_query=op.bound_query)
            diags = validate_sop(revised.sop, registry_tools)
            if diags:
                raise ValidationFailed(diags)
        except (ParseError, ValidationFailed) as exc:
            last_error = exc
            feedback = (
                f"\n[repair] Your previous reply was rejected: {exc}."
                " Reply again with one corrected JSON object."
            )
            continue
        revised = replace(revised, provenance=op.provenance)
        record = PEPRecord(
            query=op.bound_query,
            failure_cause=str(raw.get("failure_cause", "")),
            experiences=experiences,
        )
        pep_id = pep_store.add(record)
        return Diagnosis(
            failure_cause=record.failure_cause,
            experiences=experiences,
            revised_op=revised,
            pep_id=pep_id,
        )
    raise last_error  # type: ignore[misc]


def _render_trajectory(transcript: ExecutionTranscript) -> str:
    lines = []
    for m in transcript.messages:
        lines.append(f"{m.sender} -> {m.recipient} [{m.kind.value}]: {m.content[:300]}")
    for r in transcript.tool_calls:
        lines.append(
            f"{r.agent} used tool {r.tool} ({r.outcome.value}), step {r.step}: {r.observation[:200]}"
        )
    lines.append(f"terminated_by: {transcript.terminated_by.value}")
    return "\n".join(lines)


@dataclass
class LoopResult:
    verdict: Verdict
    executions: int = 0
    cases_added: int = 0
    peps_added: int = 0


@dataclass
class BootstrapReport:
    cases_added: int = 0
    peps_added: int = 0
    tasks_passed: int = 0
    tasks_failed: int = 0
    results: list[LoopResult] = field(default_factory=list)


def strategy_for(task: TrainingTask) -> str:
    if task.query.task_kind is TaskKind.CODING:
        return STRATEGY_MINIMAL
    if task.query.task_kind in (TaskKind.PLANNING, TaskKind.QA):
        return STRATEGY_DIVERSE
    return STRATEGY_MINIMAL


def reflective_loop(task: TrainingTask, runtime, strategy_hint: str | None = None) -> LoopResult:
    """Run, judge, and either distill (pass) or diagnose and re-run (fail),
    bounded by the task's iteration budget."""
    hint = strategy_hint if strategy_hint is not None else strategy_for(task)
    op, need = runtime.prepare(task.query, strategy_hint=hint)
    result = LoopResult(verdict=Verdict(passed=False, detail="not run", evaluator="checker"))
    for _iteration in range(task.max_iterations):
        transcript = runtime.execute(op, task.query)
        result.executions += 1
        result.verdict = judge(transcript, task, runtime.gateway)
        if result.verdict.passed:
            distill_sop(op, task.query, need, runtime.gateway, runtime.case_store)
            result.cases_added += 1
            return result
        diagnosis = diagnose(
            transcript,
            result.verdict,
            runtime.gateway,
            runtime.pep_store,
            runtime.registry.names(),
        )
        result.peps_added += 1
        op = diagnosis.revised_op
    return result


def bootstrap_repository(tasks: Sequence[TrainingTask], runtime) -> BootstrapReport:
    """Initialize or grow the stores by pushing every task through the loop.

    Coding tasks start from a minimal team and grow only on failure; tool-rich
    tasks ask for diverse roles plus a dedicated final-answer submitter.
    """
    report = BootstrapReport()
    for task in tasks:
        result = reflective_loop(task, runtime)
        report.results.append(result)
        report.cases_added += result.cases_added
        report.peps_added += result.peps_added
        if result.verdict.passed:
            report.tasks_passed += 1
        else:
            report.tasks_failed += 1
    return report
