"""Tool registry and the built-in handlers: a sandboxed bash runner, a
root-confined file reader, and a canned-corpus search stub that stands in
for a live web search behind the same interface.
"""

from __future__ import annotations

import json
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from ..domain import AgentSpec, ToolCallRecord, ToolOutcome
from .pool import ToolHistory

OBSERVATION_LIMIT = 4000
BASH_TIMEOUT = 10.0


class ToolError(Exception):
    """Handler failure; recorded as an error observation, execution continues."""


class UnknownToolError(Exception):
    pass


class ToolNotGrantedError(Exception):
    pass


@dataclass(frozen=True)
class ToolSpec:
    name: str
    usage: str
    handler: Callable[[str], str]


class ToolRegistry:
    def __init__(self):
        self._tools: dict[str, ToolSpec] = {}

    def register(self, name: str, usage: str, handler: Callable[[str], str]) -> None:
        if name in self._tools:
            raise ValueError(f"tool {name!r} already registered")
        self._tools[name] = ToolSpec(name=name, usage=usage, handler=handler)

    def names(self) -> set[str]:
        return set(self._tools)

    def get(self, name: str) -> ToolSpec:
        if name not in self._tools:
            raise UnknownToolError(f"tool {name!r} is not registered")
        return self._tools[name]

    def usage_for(self, tool_names) -> str:
        lines = []
        for name in tool_names:
            if name in self._tools:
                lines.append(f"- {name}: {self._tools[name].usage}")
        return "\n".join(lines)


def invoke_tool(
    registry: ToolRegistry,
    agent: AgentSpec,
    tool: str,
    arguments: str,
    history: ToolHistory,
    counters: dict[str, int],
) -> ToolCallRecord:
    """Run a granted tool and log the observation.

    Bumps the agent's consecutive-interaction counter; the engine resets it
    when the agent next sends a message. A handler failure is recorded with
    ``outcome=error`` and execution continues; calling an unregistered or
    ungranted tool records nothing.
    """
    spec = registry.get(tool)
    if tool not in agent.tools:
        raise ToolNotGrantedError(f"agent {agent.name!r} has no grant for tool {tool!r}")
    counters[agent.name] = counters.get(agent.name, 0) + 1
    try:
        observation = spec.handler(arguments)
        outcome = ToolOutcome.OK
    except ToolError as exc:
        observation = f"tool error: {exc}"
        outcome = ToolOutcome.ERROR
    except Exception as exc:  # handler bugs must not kill the run
        observation = f"tool error: {type(exc).__name__}: {exc}"
        outcome = ToolOutcome.ERROR
    record = ToolCallRecord(
        agent=agent.name,
        tool=tool,
        arguments=arguments,
        observation=observation[:OBSERVATION_LIMIT],
        step=counters[agent.name],
        outcome=outcome,
    )
    history.append(record)
    return record


def _probe_network_isolation() -> list[str]:
    # Best effort: when unshare can give us an empty network namespace, use it.
    unshare = shutil.which("unshare")
    if unshare:
        try:
            probe = subprocess.run(
                [unshare, "-n", "true"], capture_output=True, timeout=5
            )
            if probe.returncode == 0:
                return [unshare, "-n"]
        except (OSError, subprocess.SubprocessError):
            pass
    return []


def make_bash_tool(workdir: str | Path | None = None, timeout: float = BASH_TIMEOUT):
    """Shell handler confined to one scratch directory with a hard timeout.

    The directory persists across calls within a run so multi-step work
    (write a file, then run it) is possible.
    """
    state = {"dir": Path(workdir) if workdir else None, "isolation": None}

    def handler(arguments: str) -> str:
        if state["dir"] is None:
            state["dir"] = Path(tempfile.mkdtemp(prefix="sopflow-bash-"))
        state["dir"].mkdir(parents=True, exist_ok=True)
        if state["isolation"] is None:
            state["isolation"] = _probe_network_isolation()
        env = {"PATH": "/usr/local/bin:/usr/bin:/bin", "HOME": str(state["dir"]), "LC_ALL": "C"}
        try:
            proc = subprocess.run(
                [*state["isolation"], "bash", "-c", arguments],
                cwd=state["dir"],
                env=env,
                capture_output=True,
                text=True,
                timeout=timeout,
            )
        except subprocess.TimeoutExpired:
            raise ToolError(f"command timed out after {timeout:g}s")
        output = proc.stdout + (("\n" + proc.stderr) if proc.stderr else "")
        output = output.rstrip("\n")
        if proc.returncode != 0:
            raise ToolError(f"[exit {proc.returncode}] {output}".rstrip())
        return output

    return handler


def make_file_read_tool(root: str | Path, limit: int = 8000):
    base = Path(root).resolve()

    def handler(arguments: str) -> str:
        target = (base / arguments.strip()).resolve()
        if base not in target.parents and target != base:
            raise ToolError(f"path {arguments.strip()!r} escapes the allowed root")
        if not target.is_file():
            raise ToolError(f"no such file: {arguments.strip()!r}")
        return target.read_text(encoding="utf-8", errors="replace")[:limit]

    return handler


def make_search_tool(corpus_path: str | Path | None):
    entries: list[dict] = []
    if corpus_path is not None:
        raw = json.loads(Path(corpus_path).read_text(encoding="utf-8"))
        if isinstance(raw, list):
            entries = [e for e in raw if isinstance(e, dict)]

    def handler(arguments: str) -> str:
        needle = arguments.strip().lower()
        if needle:
            for entry in entries:
                key = str(entry.get("query", "")).lower()
                if key and (key in needle or needle in key):
                    return str(entry.get("snippet", ""))
        return "no results found"

    return handler


def build_default_registry(
    sandbox_dir: str | Path | None = None,
    file_root: str | Path = ".",
    search_corpus: str | Path | None = None,
) -> ToolRegistry:
    registry = ToolRegistry()
    registry.register(
        "bash",
        "tool: bash | args: <shell command> (runs in a scratch directory, 10s limit)",
        make_bash_tool(sandbox_dir),
    )
    registry.register(
        "file_read",
        "tool: file_read | args: <relative path under the allowed root>",
        make_file_read_tool(file_root),
    )
    registry.register(
        "search",
        "tool: search | args: <search query>",
        make_search_tool(search_corpus),
    )
    return registry
