"""sopflow: a runtime that retrieves stored collaboration patterns, binds
them to incoming queries, executes the resulting multi-agent procedure under
a supervising watcher, and distills the outcomes back into its stores."""

from .domain import (
    AgentExperience,
    AgentSpec,
    CommunicationStructure,
    Diagnostic,
    Edge,
    ExecutionTranscript,
    Intervention,
    Message,
    NeedAnalysis,
    OperatingProcedure,
    PEPRecord,
    Query,
    SOP,
    SOPCase,
    TaskKind,
    ToolCallRecord,
    Verdict,
    successors,
    validate_sop,
)
from .gateway import ModelGateway, ScriptedBackend, ScriptRule, cosine, fallback_embedding
from .repository import CaseStore, PEPStore, RetrievalConfig, hybrid_score, open_stores
from .pipeline import Runtime, load_config

__version__ = "0.1.0"

__all__ = [
    "AgentExperience",
    "AgentSpec",
    "CaseStore",
    "CommunicationStructure",
    "Diagnostic",
    "Edge",
    "ExecutionTranscript",
    "Intervention",
    "Message",
    "ModelGateway",
    "NeedAnalysis",
    "OperatingProcedure",
    "PEPRecord",
    "PEPStore",
    "Query",
    "RetrievalConfig",
    "Runtime",
    "SOP",
    "SOPCase",
    "ScriptRule",
    "ScriptedBackend",
    "TaskKind",
    "ToolCallRecord",
    "Verdict",
    "cosine",
    "fallback_embedding",
    "hybrid_score",
    "load_config",
    "open_stores",
    "successors",
    "validate_sop",
    "__version__",
]
