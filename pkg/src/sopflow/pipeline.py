"""Configuration and wiring: builds the gateway, stores, tool registry and
supervisor from one config mapping, and drives the test-time pipeline
(analyze, retrieve, instantiate, execute).

Precedence: command-line flags override config-file values, which override
the built-in defaults.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .domain import ExecutionTranscript, NeedAnalysis, OperatingProcedure, Query
from .engine import Engine, EnginePolicy, ToolRegistry, build_default_registry
from .gateway import (
    HttpBackend,
    ModelGateway,
    ScriptedBackend,
    load_rules,
)
from .instantiation import analyze_need, instantiate
from .repository import CaseStore, PEPStore, RetrievalConfig, RetrievalMode, open_stores
from .watcher import InterventionPolicy, Watcher

DEFAULTS: dict[str, Any] = {
    "backend": "scripted",
    "script": None,
    "http": {"base_url": "", "model": "", "api_key_env": "SOPFLOW_API_KEY"},
    "temperature": 0.6,
    "embedding": {"dimension": 256, "backend": "fallback"},
    "prompt_log": None,
    "store_dir": "stores",
    "retrieval": {"lambda": 0.3, "k": 2, "mode": "hybrid", "pep_k": 2},
    "watcher": {"enabled": True, "interval": None, "env_threshold": 5, "cap": 8, "use_pep": True},
    "engine": {"max_rounds": 30, "parallel": False, "seed": 0, "max_tool_chain": 8},
    "tools": {"sandbox_dir": None, "file_root": ".", "search_corpus": None},
}

_MODE_ALIASES = {
    "hybrid": RetrievalMode.HYBRID,
    "query": RetrievalMode.QUERY_ONLY,
    "query_only": RetrievalMode.QUERY_ONLY,
    "need": RetrievalMode.NEED_ONLY,
    "need_only": RetrievalMode.NEED_ONLY,
}


class ConfigError(Exception):
    pass


def _deep_merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"unreadable config {path}: {exc}")
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        config = _deep_merge(config, data)
    if overrides:
        config = _deep_merge(config, overrides)
    return config


def build_gateway(config: dict) -> ModelGateway:
    backend_name = config.get("backend", "scripted")
    if backend_name == "scripted":
        script = config.get("script")
        rules = load_rules(script) if script else []
        backend: ScriptedBackend | HttpBackend = ScriptedBackend(rules)
    elif backend_name == "http":
        http = config.get("http", {})
        if not http.get("base_url") or not http.get("model"):
            raise ConfigError("http backend requires http.base_url and http.model")
        backend = HttpBackend(
            base_url=http["base_url"],
            model=http["model"],
            api_key_env=http.get("api_key_env", "SOPFLOW_API_KEY"),
        )
    else:
        raise ConfigError(f"unknown backend {backend_name!r}")
    embedding = config.get("embedding", {})
    prompt_log = config.get("prompt_log")
    if prompt_log is None and backend_name == "http":
        # Live calls are always persisted so any live run can be replayed
        # later as a scripted fixture.
        prompt_log = "prompt_log.jsonl"
    return ModelGateway(
        backend,
        embed_dim=int(embedding.get("dimension", 256)),
        prompt_log=prompt_log,
        temperature=float(config.get("temperature", 0.6)),
        embedding_backend=embedding.get("backend", "fallback"),
    )


def build_registry(config: dict) -> ToolRegistry:
    tools = config.get("tools", {})
    return build_default_registry(
        sandbox_dir=tools.get("sandbox_dir"),
        file_root=tools.get("file_root", "."),
        search_corpus=tools.get("search_corpus"),
    )


@dataclass
class RunOutcome:
    transcript: ExecutionTranscript
    records: list[dict]
    op: OperatingProcedure
    need: NeedAnalysis
    gateway_calls: int
    wall_time: float


@dataclass
class Runtime:
    """Everything a run needs, built once from a config mapping."""

    config: dict
    gateway: ModelGateway
    case_store: CaseStore
    pep_store: PEPStore
    registry: ToolRegistry
    last_engine: Engine | None = field(default=None, repr=False)

    @classmethod
    def from_config(cls, config: dict, store_dir: str | Path | None = None) -> "Runtime":
        gateway = build_gateway(config)
        registry = build_registry(config)
        root = Path(store_dir if store_dir is not None else config.get("store_dir", "stores"))
        case_store, pep_store = open_stores(root, gateway, registry.names())
        return cls(
            config=config,
            gateway=gateway,
            case_store=case_store,
            pep_store=pep_store,
            registry=registry,
        )

    # -- knobs ---------------------------------------------------------------

    def retrieval_config(self) -> RetrievalConfig:
        retrieval = self.config.get("retrieval", {})
        mode_raw = str(retrieval.get("mode", "hybrid"))
        if mode_raw not in _MODE_ALIASES:
            raise ConfigError(f"unknown retrieval mode {mode_raw!r}")
        return RetrievalConfig(
            lam=float(retrieval.get("lambda", 0.3)),
            k=int(retrieval.get("k", 2)),
            mode=_MODE_ALIASES[mode_raw],
        )

    def engine_policy(self) -> EnginePolicy:
        engine = self.config.get("engine", {})
        return EnginePolicy(
            max_rounds=int(engine.get("max_rounds", 30)),
            parallel=bool(engine.get("parallel", False)),
            seed=int(engine.get("seed", 0)),
            max_tool_chain=int(engine.get("max_tool_chain", 8)),
        )

    def make_watcher(self, op: OperatingProcedure) -> Watcher | None:
        cfg = self.config.get("watcher", {})
        if not cfg.get("enabled", True):
            return None
        policy = InterventionPolicy.for_team(
            len(op.team),
            interval=cfg.get("interval"),
            env_threshold=int(cfg.get("env_threshold", 5)),
            cap=int(cfg.get("cap", 8)),
        )
        use_pep = bool(cfg.get("use_pep", True))
        return Watcher(
            policy=policy,
            gateway=self.gateway,
            pep_store=self.pep_store if use_pep else None,
            use_pep=use_pep,
            pep_k=int(self.config.get("retrieval", {}).get("pep_k", 2)),
        )

    # -- pipeline stages -------------------------------------------------------

    def prepare(
        self,
        query: Query,
        strategy_hint: str = "",
        no_sop_rag: bool = False,
        fixed_sop: str | None = None,
    ) -> tuple[OperatingProcedure, NeedAnalysis]:
        """Analyze, retrieve and instantiate; returns the bound procedure.

        ``fixed_sop`` binds a stored case verbatim with no model call;
        ``no_sop_rag`` skips retrieval so the prompt carries no exemplars.
        """
        if fixed_sop is not None:
            case = self.case_store.get(fixed_sop)
            result = instantiate(
                query, NeedAnalysis(""), [], self.gateway, self.registry.names(), fixed_case=case
            )
            return result.op, NeedAnalysis("")
        need = analyze_need(query, self.gateway)
        retrieved = []
        if not no_sop_rag:
            scored = self.case_store.retrieve(query, need, self.retrieval_config())
            retrieved = [s.case for s in scored]
        result = instantiate(
            query,
            need,
            retrieved,
            self.gateway,
            self.registry.names(),
            strategy_hint=strategy_hint,
        )
        return result.op, need

    def execute(self, op: OperatingProcedure, query: Query) -> ExecutionTranscript:
        watcher = self.make_watcher(op)
        engine = Engine(op, query, self.engine_policy(), self.gateway, self.registry, watcher)
        self.last_engine = engine
        return engine.run()

    def run_query(
        self,
        query: Query,
        strategy_hint: str = "",
        no_sop_rag: bool = False,
        fixed_sop: str | None = None,
    ) -> RunOutcome:
        started = time.perf_counter()
        calls_before = self.gateway.calls
        op, need = self.prepare(
            query, strategy_hint=strategy_hint, no_sop_rag=no_sop_rag, fixed_sop=fixed_sop
        )
        transcript = self.execute(op, query)
        return RunOutcome(
            transcript=transcript,
            records=self.last_engine.records if self.last_engine else [],
            op=op,
            need=need,
            gateway_calls=self.gateway.calls - calls_before,
            wall_time=time.perf_counter() - started,
        )
