import json

import pytest

from conftest import gateway_for, rule
from sopflow.domain import NeedAnalysis, ParseError, Query, TaskKind, ValidationFailed
from sopflow.fixtures import CODE_REVIEW_LOOP, WEB_RESEARCH, load_case
from sopflow.gateway import EmptyReply, ModelError, rules_from_log
from sopflow.instantiation import analyze_need, extract_json, instantiate, parse_op

REGISTRY = ("bash", "search", "file_read")


# -- analyze_need ------------------------------------------------------------


def test_analyze_need_scripted():
    gw = gateway_for([rule("[need-analysis]", response="needs web search")])
    need = analyze_need(Query(text="who won?"), gw)
    assert need == NeedAnalysis("needs web search")


def test_analyze_need_no_rule_is_model_error():
    gw = gateway_for([])
    with pytest.raises(ModelError):
        analyze_need(Query(text="who won?"), gw)


def test_analyze_need_retries_once_on_empty_reply():
    gw = gateway_for(
        [
            rule("[need-analysis]", response="", max_uses=1),
            rule("[need-analysis]", response="second try works"),
        ]
    )
    assert analyze_need(Query(text="q"), gw).text == "second try works"


def test_analyze_need_fails_after_two_empty_replies():
    gw = gateway_for([rule("[need-analysis]", response="")])
    with pytest.raises(EmptyReply):
        analyze_need(Query(text="q"), gw)


def test_analyze_need_replay_from_prompt_log(tmp_path):
    log = tmp_path / "log.jsonl"
    gw = gateway_for([rule("[need-analysis]", response="recorded analysis")], prompt_log=log)
    query = Query(text="plan a weekend trip")
    first = analyze_need(query, gw)

    replay_gw = gateway_for(rules_from_log(log))
    assert analyze_need(query, replay_gw) == first


# -- parse_op ----------------------------------------------------------------


def test_parse_op_fixture_text_with_prose():
    sop_json = json.dumps(load_case(WEB_RESEARCH).sop.to_dict())
    text = f"Here is the procedure you asked for:\n```json\n{sop_json}\n```\nGood luck!"
    op = parse_op(text, Query(text="q"))
    assert len(op.team) == 3
    assert any(e.src == "User" and e.dst == "Planner" for e in op.structure.edges)


def test_parse_op_no_json():
    with pytest.raises(ParseError) as err:
        parse_op("hello", Query(text="q"))
    assert err.value.code == "no_json"


def test_parse_op_type_mismatch_path():
    raw = load_case(WEB_RESEARCH).sop.to_dict()
    raw["agents"][1]["tools"] = "search"
    with pytest.raises(ParseError) as err:
        parse_op(json.dumps(raw), Query(text="q"))
    assert err.value.code == "type_mismatch" and err.value.path == "agents[1].tools"


def test_extract_json_finds_first_object():
    assert extract_json('noise {"a": 1} {"b": 2}') == {"a": 1}
    assert extract_json('skip [1,2] then {"a": {"nested": true}}') == {"a": {"nested": True}}


# -- instantiate -------------------------------------------------------------


def _coding_query():
    return Query(text="write remove_duplicates", task_kind=TaskKind.CODING)


def test_instantiate_scripted_coding_op():
    sop_json = json.dumps(load_case(CODE_REVIEW_LOOP).sop.to_dict())
    gw = gateway_for([rule("[instantiate]", response=sop_json)])
    result = instantiate(_coding_query(), NeedAnalysis("needs tests"), [], gw, REGISTRY)
    op = result.op
    assert len(op.team) == 3
    assert any(e.condition == "errors" for e in op.structure.edges)
    assert result.repairs == 0
    assert op.provenance == ()


def test_instantiate_fixed_sop_makes_no_gateway_call():
    gw = gateway_for([])  # any call would raise NoRuleMatched
    case = load_case(WEB_RESEARCH)
    result = instantiate(
        Query(text="fresh question"), NeedAnalysis(""), [], gw, REGISTRY, fixed_case=case
    )
    assert result.gateway_calls == 0
    assert result.op.sop == case.sop
    assert result.op.bound_query.text == "fresh question"
    assert result.op.provenance == (case.id,)
    assert gw.calls == 0


def test_instantiate_repair_counter():
    good = json.dumps(load_case(WEB_RESEARCH).sop.to_dict())
    missing_team = json.dumps({"agents": [], "communication_structure": {"edges": []}})
    gw = gateway_for(
        [
            rule("[instantiate]", response=missing_team, max_uses=1),
            rule("[instantiate]", response=good),
        ]
    )
    result = instantiate(Query(text="q"), NeedAnalysis("n"), [], gw, REGISTRY)
    assert result.repairs == 1
    assert result.gateway_calls == 2


def test_instantiate_repair_budget_is_bounded():
    gw = gateway_for([rule("[instantiate]", response="not json at all")])
    with pytest.raises(ParseError):
        instantiate(Query(text="q"), NeedAnalysis("n"), [], gw, REGISTRY)
    assert gw.calls == 3  # first call plus two repairs


def test_instantiate_validation_failure_repairs():
    bad_tool = json.dumps(
        {
            "team": ["A"],
            "agents": [{"name": "A", "tools": ["sql"]}],
            "communication_structure": {"edges": ["User -> A", "A -> End"]},
        }
    )
    gw = gateway_for([rule("[instantiate]", response=bad_tool)])
    with pytest.raises(ValidationFailed):
        instantiate(Query(text="q"), NeedAnalysis("n"), [], gw, REGISTRY)


def test_instantiate_provenance_lists_retrieved_cases():
    sop_json = json.dumps(load_case(WEB_RESEARCH).sop.to_dict())
    gw = gateway_for([rule("[instantiate]", response=sop_json)])
    exemplars = [load_case(WEB_RESEARCH), load_case(CODE_REVIEW_LOOP)]
    result = instantiate(Query(text="q"), NeedAnalysis("n"), exemplars, gw, REGISTRY)
    assert result.op.provenance == ("sop-web-research", "sop-code-review-loop")


def test_instantiate_prompt_carries_exemplars_and_no_rag_marker():
    sop_json = json.dumps(load_case(WEB_RESEARCH).sop.to_dict())
    with_exemplars = gateway_for(
        [rule("[instantiate]", "Reference procedures from similar past cases:", response=sop_json)]
    )
    instantiate(Query(text="q"), NeedAnalysis("n"), [load_case(WEB_RESEARCH)], with_exemplars, REGISTRY)

    without = gateway_for(
        [rule("[instantiate]", "No reference procedures are available", response=sop_json)]
    )
    instantiate(Query(text="q"), NeedAnalysis("n"), [], without, REGISTRY)


def test_instantiate_deterministic_under_scripted_backend():
    sop_json = json.dumps(load_case(CODE_REVIEW_LOOP).sop.to_dict())
    rules = lambda: [rule("[instantiate]", response=sop_json)]
    first = instantiate(_coding_query(), NeedAnalysis("n"), [], gateway_for(rules()), REGISTRY)
    second = instantiate(_coding_query(), NeedAnalysis("n"), [], gateway_for(rules()), REGISTRY)
    assert first.op.to_dict() == second.op.to_dict()
