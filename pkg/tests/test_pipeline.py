import json

import pytest

from conftest import gateway_for, rule, write_rules
from sopflow.domain import Query, TaskKind, TerminationReason
from sopflow.fixtures import DEMO_CORPUS, WEB_RESEARCH, fixture_path, load_case
from sopflow.pipeline import ConfigError, Runtime, build_gateway, load_config
from sopflow.repository import CaseStore, RetrievalMode


def _config(tmp_path, rules, **extra):
    rules_path = tmp_path / "rules.json"
    write_rules(rules_path, rules)
    overrides = {
        "script": str(rules_path),
        "store_dir": str(tmp_path / "stores"),
        "tools": {"search_corpus": str(fixture_path(DEMO_CORPUS))},
    }
    overrides.update(extra)
    return load_config(overrides=overrides)


def _sop_json():
    return json.dumps(load_case(WEB_RESEARCH).sop.to_dict())


def _agent_rules():
    return [
        rule("[agent:Planner]", response="Thought: go.\nAction: message: WebSearcher | find it"),
        rule("[agent:WebSearcher]", response="Thought: pass.\nAction: message: Summarizer | evidence"),
        rule("[agent:Summarizer]", response="Thought: done.\nAction: final: the answer"),
        rule("[watcher-review]", response="VERDICT: NORMAL"),
    ]


def test_retrieved_exemplars_reach_instantiation(tmp_path):
    rules = [
        rule("[need-analysis]", response="needs research"),
        # this rule only matches when the prompt carries exemplars
        rule("[instantiate]", "Reference procedures from similar past cases:", response=_sop_json()),
        *_agent_rules(),
    ]
    config = _config(tmp_path, rules)
    runtime = Runtime.from_config(config)
    runtime.case_store.add_case(load_case(WEB_RESEARCH))

    outcome = runtime.run_query(Query(text="a research question", task_kind=TaskKind.QA))
    assert outcome.transcript.terminated_by is TerminationReason.FINAL_ANSWER
    assert outcome.op.provenance == ("sop-web-research",)


def test_no_sop_rag_leaves_provenance_empty(tmp_path):
    rules = [
        rule("[need-analysis]", response="needs research"),
        rule("[instantiate]", "No reference procedures are available", response=_sop_json()),
        *_agent_rules(),
    ]
    runtime = Runtime.from_config(_config(tmp_path, rules))
    runtime.case_store.add_case(load_case(WEB_RESEARCH))
    outcome = runtime.run_query(Query(text="q", task_kind=TaskKind.QA), no_sop_rag=True)
    assert outcome.op.provenance == ()


def test_fixed_sop_prepare_skips_model(tmp_path):
    runtime = Runtime.from_config(_config(tmp_path, []))
    case_id = runtime.case_store.add_case(load_case(WEB_RESEARCH))
    op, need = runtime.prepare(Query(text="fresh"), fixed_sop=case_id)
    assert runtime.gateway.calls == 0
    assert need.text == ""
    assert op.provenance == (case_id,)


def test_retrieval_config_from_mapping(tmp_path):
    config = _config(
        tmp_path, [], retrieval={"lambda": 0.7, "k": 4, "mode": "need", "pep_k": 3}
    )
    runtime = Runtime.from_config(config)
    rc = runtime.retrieval_config()
    assert (rc.lam, rc.k, rc.mode) == (0.7, 4, RetrievalMode.NEED_ONLY)


def test_unknown_retrieval_mode_rejected(tmp_path):
    runtime = Runtime.from_config(_config(tmp_path, [], retrieval={"mode": "sideways"}))
    with pytest.raises(ConfigError):
        runtime.retrieval_config()


def test_watcher_interval_override(tmp_path):
    config = _config(tmp_path, [], watcher={"interval": 7, "cap": 2})
    runtime = Runtime.from_config(config)
    op, _ = (load_case(WEB_RESEARCH).sop, None)
    from sopflow.domain import OperatingProcedure

    bound = OperatingProcedure(sop=op, bound_query=Query(text="q"))
    watcher = runtime.make_watcher(bound)
    assert watcher.policy.comm_interval == 7
    assert watcher.policy.max_interventions == 2


def test_watcher_default_interval_tracks_team_size(tmp_path):
    runtime = Runtime.from_config(_config(tmp_path, []))
    from sopflow.domain import OperatingProcedure

    bound = OperatingProcedure(sop=load_case(WEB_RESEARCH).sop, bound_query=Query(text="q"))
    assert runtime.make_watcher(bound).policy.comm_interval == 1  # floor(3 / 2)


def test_http_gateway_defaults_prompt_log(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    config = load_config(
        overrides={"backend": "http", "http": {"base_url": "http://x", "model": "m"}}
    )
    gateway = build_gateway(config)
    assert gateway.prompt_log is not None


def test_scripted_gateway_has_no_default_log(tmp_path):
    config = _config(tmp_path, [])
    assert build_gateway(config).prompt_log is None
