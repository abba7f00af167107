"""Execution engine: message pool, action grammar, tools, runner, transcripts."""

from .actions import (
    ActionError,
    AgentAction,
    FinalAnswer,
    MalformedAction,
    RecipientNotReachable,
    SendMessage,
    ToolCall,
    UnknownRecipient,
    UnknownTool,
    parse_action,
)
from .pool import MessagePool, PoolClosed, PurgeReport, Sequencer, ToolHistory
from .runner import Engine, EngineHandles, EnginePolicy, run
from .tools import (
    ToolError,
    ToolNotGrantedError,
    ToolRegistry,
    UnknownToolError,
    build_default_registry,
    invoke_tool,
    make_bash_tool,
    make_file_read_tool,
    make_search_tool,
)
from .transcript import (
    InvariantCheck,
    LoadedTranscript,
    TranscriptFormatError,
    load_transcript,
    validate_transcript,
    write_jsonl,
)

__all__ = [
    "ActionError",
    "AgentAction",
    "Engine",
    "EngineHandles",
    "EnginePolicy",
    "FinalAnswer",
    "InvariantCheck",
    "LoadedTranscript",
    "MalformedAction",
    "MessagePool",
    "PoolClosed",
    "PurgeReport",
    "RecipientNotReachable",
    "SendMessage",
    "Sequencer",
    "ToolCall",
    "ToolError",
    "ToolHistory",
    "ToolNotGrantedError",
    "ToolRegistry",
    "TranscriptFormatError",
    "UnknownRecipient",
    "UnknownTool",
    "UnknownToolError",
    "build_default_registry",
    "invoke_tool",
    "load_transcript",
    "make_bash_tool",
    "make_file_read_tool",
    "make_search_tool",
    "parse_action",
    "run",
    "validate_transcript",
    "write_jsonl",
]
