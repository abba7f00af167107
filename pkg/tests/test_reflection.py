import json

import pytest

from conftest import (
    bootstrap_manifest,
    bootstrap_rules,
    gateway_for,
    rule,
    solver_op,
    write_rules,
)
from sopflow.domain import (
    ExecutionTranscript,
    NeedAnalysis,
    OperatingProcedure,
    ParseError,
    Query,
    TaskKind,
    TerminationReason,
    ValidationFailed,
)
from sopflow.fixtures import WEB_RESEARCH, load_case
from sopflow.pipeline import Runtime, load_config
from sopflow.reflection import (
    CheckerSpec,
    NoEvaluator,
    TrainingTask,
    bootstrap_repository,
    diagnose,
    distill_sop,
    judge,
    reflective_loop,
    strategy_for,
)
from sopflow.repository import CaseStore, PEPStore


def _transcript(final, terminated=TerminationReason.FINAL_ANSWER, op=None):
    op = op or solver_op(Query(text="task"))
    return ExecutionTranscript(
        op=op, final_answer=final, terminated_by=terminated, rounds_used=1
    )


def _task(text="task", checker=None, label="", kind=TaskKind.OTHER, max_iterations=3):
    return TrainingTask(
        query=Query(text=text, task_kind=kind),
        checker=checker,
        label=label,
        max_iterations=max_iterations,
    )


# -- judge ---------------------------------------------------------------------


def test_checker_contains():
    task = _task(checker=CheckerSpec(kind="contains", value="42"))
    assert judge(_transcript("the answer is 42"), task).passed
    assert not judge(_transcript("no idea"), task).passed


def test_round_cap_means_no_deliverable():
    task = _task(checker=CheckerSpec(kind="contains", value="x"))
    verdict = judge(_transcript(None, TerminationReason.ROUND_CAP), task)
    assert not verdict.passed and verdict.detail == "no deliverable"


def test_model_judge_scripted_fail():
    task = _task(label="Paris")
    gw = gateway_for([rule("[model-judge]", response="FAIL: wrong date")])
    verdict = judge(_transcript("London"), task, gw)
    assert not verdict.passed
    assert verdict.evaluator == "model_judge"
    assert "wrong date" in verdict.detail


def test_model_judge_scripted_pass():
    gw = gateway_for([rule("[model-judge]", response="PASS")])
    assert judge(_transcript("Paris"), _task(label="Paris"), gw).passed


def test_no_evaluator():
    with pytest.raises(NoEvaluator):
        judge(_transcript("x"), _task(), gateway=None)


def test_command_checker_runs_hidden_tests():
    checker = CheckerSpec(
        kind="command",
        command='python3 -c "import answer; assert answer.add(2, 3) == 5; print(\'OK\')"',
        expected="OK",
        answer_file="answer.py",
    )
    good = _transcript("def add(a, b):\n    return a + b")
    bad = _transcript("def add(a, b):\n    pass")
    assert judge(good, _task(checker=checker)).passed
    assert not judge(bad, _task(checker=checker)).passed


def test_equals_checker():
    checker = CheckerSpec(kind="equals", value="yes")
    assert judge(_transcript("  yes\n"), _task(checker=checker)).passed
    assert not judge(_transcript("yes but"), _task(checker=checker)).passed


# -- distill ---------------------------------------------------------------------


def _case_store(tool_names=()):
    return CaseStore(None, gateway_for([], dim=16), tool_names=set(tool_names))


def test_distill_stores_generalized_case():
    store = _case_store()
    generalized = json.dumps(
        {
            "team": ["Solver"],
            "agents": [
                {"name": "Solver", "responsibility": "solve", "instruction": "Solve whatever task arrives.", "tools": []}
            ],
            "communication_structure": {"edges": ["User -> Solver", "Solver -> End"], "description": "d"},
        }
    )
    gw = gateway_for([rule("[distill-sop]", response=generalized)])
    query = Query(text="task alpha")
    op = solver_op(query, instruction="Solve task alpha specifically.")
    case = distill_sop(op, query, NeedAnalysis("needs a solver"), gw, store)
    assert len(store) == 1
    assert case.sop.agent("Solver").instruction == "Solve whatever task arrives."
    assert case.query.text == "task alpha"
    assert case.need.text == "needs a solver"


def test_distill_identity_under_echo_rule():
    store = _case_store(("search",))
    fixture = load_case(WEB_RESEARCH)
    op = OperatingProcedure(sop=fixture.sop, bound_query=fixture.query)
    gw = gateway_for([rule("[distill-sop]", response=json.dumps(fixture.sop.to_dict()))])
    case = distill_sop(op, fixture.query, fixture.need, gw, store)
    assert case.sop == fixture.sop


def test_distill_invalid_json_leaves_store_unchanged():
    store = _case_store()
    gw = gateway_for([rule("[distill-sop]", response="not json")])
    with pytest.raises(ParseError):
        distill_sop(
            solver_op(Query(text="q")), Query(text="q"), NeedAnalysis("n"), gw, store
        )
    assert len(store) == 0
    assert gw.calls == 3  # initial call plus both repairs


def test_distill_invalid_sop_fails_validation():
    store = _case_store()
    bad = json.dumps(
        {"team": ["A"], "agents": [{"name": "A", "tools": ["sql"]}],
         "communication_structure": {"edges": ["User -> A", "A -> End"]}}
    )
    gw = gateway_for([rule("[distill-sop]", response=bad)])
    with pytest.raises(ValidationFailed):
        distill_sop(solver_op(Query(text="q")), Query(text="q"), NeedAnalysis("n"), gw, store)
    assert len(store) == 0


# -- diagnose ---------------------------------------------------------------------


def _planner_transcript():
    query = Query(text="plan a 3-day trip", task_kind=TaskKind.PLANNING)
    op = solver_op(query, tools=["search"], instruction="Plan the trip.")
    return _transcript("fabricated itinerary", op=op), query


def test_diagnose_attributes_and_revises():
    transcript, query = _planner_transcript()
    pool = PEPStore(None, gateway_for([], dim=16))
    revised = {
        "team": ["Solver"],
        "agents": [
            {
                "name": "Solver",
                "responsibility": "Solve the task end to end",
                "instruction": "Plan the trip; always query the search tool for flights before writing the plan.",
                "tools": ["search"],
            }
        ],
        "communication_structure": {"edges": ["User -> Solver", "Solver -> End"], "description": "d"},
    }
    reply = json.dumps(
        {
            "failure_cause": "the solver fabricated flight information without invoking the tool",
            "experiences": [
                {
                    "agent": "Solver",
                    "error_attribution": "answered from memory instead of the flight tool",
                    "improvement_strategy": "always invoke the search tool before asserting flight facts",
                }
            ],
            "revised_op": revised,
        }
    )
    gw = gateway_for([rule("[diagnose-failure]", response=reply)])
    from sopflow.domain import Verdict

    diagnosis = diagnose(transcript, Verdict(False, "hard constraints failed"), gw, pool, ["search"])
    assert "fabricated" in diagnosis.failure_cause
    assert diagnosis.experiences[0].agent == "Solver"
    assert "always query the search tool" in diagnosis.revised_op.agent("Solver").instruction
    assert len(pool) == 1
    assert pool.records()[0].id == diagnosis.pep_id


def test_diagnose_requires_nonempty_experiences():
    transcript, _ = _planner_transcript()
    pool = PEPStore(None, gateway_for([], dim=16))
    reply = json.dumps({"failure_cause": "c", "experiences": [], "revised_op": {}})
    gw = gateway_for([rule("[diagnose-failure]", response=reply)])
    from sopflow.domain import Verdict

    with pytest.raises(ParseError):
        diagnose(transcript, Verdict(False, "failed"), gw, pool, ["search"])
    assert len(pool) == 0


def test_diagnose_revision_may_grow_the_team():
    transcript, _ = _planner_transcript()
    pool = PEPStore(None, gateway_for([], dim=16))
    revised = {
        "team": ["Solver", "Reviewer"],
        "agents": [
            {"name": "Solver", "responsibility": "solve", "instruction": "Plan it.", "tools": ["search"]},
            {"name": "Reviewer", "responsibility": "check", "instruction": "Review the plan.", "tools": []},
        ],
        "communication_structure": {
            "edges": ["User -> Solver", "Solver -> Reviewer", "Reviewer -> End"],
            "description": "solver then reviewer",
        },
    }
    reply = json.dumps(
        {
            "failure_cause": "no verification step",
            "experiences": [
                {"agent": "Solver", "error_attribution": "unchecked output", "improvement_strategy": "add review"}
            ],
            "revised_op": revised,
        }
    )
    gw = gateway_for([rule("[diagnose-failure]", response=reply)])
    from sopflow.domain import Verdict

    diagnosis = diagnose(transcript, Verdict(False, "failed"), gw, pool, ["search"])
    assert len(diagnosis.revised_op.team) == 2


# -- reflective loop and bootstrap ---------------------------------------------------


def _runtime(tmp_path, rules, store_name="stores"):
    rules_path = tmp_path / "rules.json"
    write_rules(rules_path, rules)
    config = load_config(
        overrides={
            "script": str(rules_path),
            "store_dir": str(tmp_path / store_name),
            "embedding": {"dimension": 16},
        }
    )
    return Runtime.from_config(config)


def _manifest_tasks():
    return [TrainingTask.from_dict(t) for t in bootstrap_manifest()]


def test_loop_pass_first_try(tmp_path):
    runtime = _runtime(tmp_path, bootstrap_rules())
    task = _manifest_tasks()[0]  # alpha passes immediately
    result = reflective_loop(task, runtime)
    assert result.verdict.passed
    assert (result.executions, result.cases_added, result.peps_added) == (1, 1, 0)


def test_loop_fail_once_then_pass(tmp_path):
    runtime = _runtime(tmp_path, bootstrap_rules())
    task = _manifest_tasks()[3]  # delta needs one revision
    result = reflective_loop(task, runtime)
    assert result.verdict.passed
    assert (result.executions, result.cases_added, result.peps_added) == (2, 1, 1)


def test_loop_exhausts_iterations(tmp_path):
    rules = [
        rule("[need-analysis]", response="needs a solver"),
        rule(
            "[instantiate]",
            response=json.dumps(
                {
                    "team": ["Solver"],
                    "agents": [{"name": "Solver", "responsibility": "r", "instruction": "Try.", "tools": []}],
                    "communication_structure": {"edges": ["User -> Solver", "Solver -> End"], "description": "d"},
                }
            ),
        ),
        rule("[agent:Solver]", response="Thought: hm.\nAction: final: wrong"),
        rule(
            "[diagnose-failure]",
            response=json.dumps(
                {
                    "failure_cause": "keeps guessing",
                    "experiences": [
                        {"agent": "Solver", "error_attribution": "guessing", "improvement_strategy": "stop guessing"}
                    ],
                    "revised_op": {
                        "team": ["Solver"],
                        "agents": [{"name": "Solver", "responsibility": "r", "instruction": "Try.", "tools": []}],
                        "communication_structure": {"edges": ["User -> Solver", "Solver -> End"], "description": "d"},
                    },
                }
            ),
        ),
        rule("[watcher-review]", response="VERDICT: NORMAL"),
    ]
    runtime = _runtime(tmp_path, rules)
    task = _task(text="hopeless", checker=CheckerSpec(kind="contains", value="right"), max_iterations=3)
    result = reflective_loop(task, runtime)
    assert not result.verdict.passed
    assert (result.executions, result.cases_added, result.peps_added) == (3, 0, 3)
    assert len(runtime.case_store) == 0
    assert len(runtime.pep_store) == 3


def test_bootstrap_five_tasks(tmp_path):
    runtime = _runtime(tmp_path, bootstrap_rules())
    report = bootstrap_repository(_manifest_tasks(), runtime)
    assert report.cases_added == 5
    assert report.peps_added == 2
    assert report.tasks_passed == 5
    assert len(runtime.case_store) == 5
    assert len(runtime.pep_store) == 2
    # minimal-team strategy: the stored coding-free cases keep a single agent
    assert all(len(c.sop.team) == 1 for c in runtime.case_store.cases())


def test_bootstrap_empty_manifest(tmp_path):
    runtime = _runtime(tmp_path, bootstrap_rules())
    report = bootstrap_repository([], runtime)
    assert (report.cases_added, report.peps_added) == (0, 0)
    assert len(runtime.case_store) == 0


def test_bootstrap_growth_is_monotone(tmp_path):
    runtime = _runtime(tmp_path, bootstrap_rules())
    before = len(runtime.case_store)
    report = bootstrap_repository(_manifest_tasks(), runtime)
    assert len(runtime.case_store) == before + report.tasks_passed


def test_strategy_hints():
    coding = _task(kind=TaskKind.CODING)
    planning = _task(kind=TaskKind.PLANNING)
    assert "smallest team" in strategy_for(coding)
    assert "final-answer submitter" in strategy_for(planning)


def test_run_mode_never_mutates_stores(tmp_path):
    runtime = _runtime(tmp_path, bootstrap_rules())
    bootstrap_repository(_manifest_tasks()[:1], runtime)
    store_root = tmp_path / "stores"
    snapshot = {
        p.relative_to(store_root): p.read_bytes() for p in sorted(store_root.rglob("*.json"))
    }

    fresh = Runtime.from_config(runtime.config)
    fresh.run_query(Query(text="task alpha"))
    after = {
        p.relative_to(store_root): p.read_bytes() for p in sorted(store_root.rglob("*.json"))
    }
    assert after == snapshot
