"""Bundled demo assets: two ready-made collaboration cases, a scripted rule
set that drives the research pipeline end to end, and a canned search corpus."""

from importlib import resources
from pathlib import Path

from ..domain import SOPCase


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("sopflow").joinpath(f"fixtures/{name}")))


def load_case(name: str) -> SOPCase:
    import json

    return SOPCase.from_dict(json.loads(fixture_path(name).read_text(encoding="utf-8")))


WEB_RESEARCH = "web_research_case.json"
CODE_REVIEW_LOOP = "code_review_loop_case.json"
DEMO_RULES = "demo_rules.json"
DEMO_CORPUS = "demo_corpus.json"
