"""Reasoning-then-action output grammar for agent replies.

An agent reply is a thought followed by exactly one action:

    Thought: <free text>
    Action: tool: <name> | args: <payload>
        or: message: <recipient> | <content>   (optional trailing "outcome: <label>")
        or: final: <content>

Recipients must be reachable: a successor in the workflow graph (with the
matching condition outcome for conditioned edges), an agent that previously
messaged the sender (upward clarification), or End via ``final``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import FrozenSet

from ..domain import END_NODE, OperatingProcedure, UnknownNodeError, successors


class ActionError(Exception):
    """Base class for unusable agent replies."""


class MalformedAction(ActionError):
    pass


class UnknownRecipient(ActionError):
    pass


class RecipientNotReachable(ActionError):
    pass


class UnknownTool(ActionError):
    pass


@dataclass(frozen=True)
class ToolCall:
    tool: str
    arguments: str


@dataclass(frozen=True)
class SendMessage:
    recipient: str
    content: str
    condition_outcome: str | None = None


@dataclass(frozen=True)
class FinalAnswer:
    content: str


@dataclass(frozen=True)
class AgentAction:
    thought: str
    act: ToolCall | SendMessage | FinalAnswer


_ACTION_LINE = re.compile(r"^\s*Action\s*:\s*(.*)$", re.IGNORECASE)
_BARE_ACTION = re.compile(r"^\s*(tool|message|final)\s*:", re.IGNORECASE)
_TOOL_RE = re.compile(r"^tool\s*:\s*(\S+)\s*\|\s*args\s*:\s*(.*)$", re.IGNORECASE | re.DOTALL)
_MESSAGE_RE = re.compile(r"^message\s*:\s*([^|]+?)\s*\|\s*(.*)$", re.IGNORECASE | re.DOTALL)
_FINAL_RE = re.compile(r"^final\s*:\s*(.*)$", re.IGNORECASE | re.DOTALL)
_OUTCOME_RE = re.compile(r"^\s*outcome\s*:\s*(.+?)\s*$", re.IGNORECASE)


def _split_thought_action(text: str) -> tuple[str, str]:
    lines = text.splitlines()
    for i, line in enumerate(lines):
        m = _ACTION_LINE.match(line)
        if m:
            body = "\n".join([m.group(1)] + lines[i + 1 :]).strip()
            thought = "\n".join(lines[:i]).strip()
            return thought, body
    for i, line in enumerate(lines):
        if _BARE_ACTION.match(line):
            body = "\n".join(lines[i:]).strip()
            thought = "\n".join(lines[:i]).strip()
            return thought, body
    raise MalformedAction("reply contains no Action")


def _strip_thought_prefix(thought: str) -> str:
    return re.sub(r"^\s*Thought\s*:\s*", "", thought, flags=re.IGNORECASE).strip()


def parse_action(
    text: str,
    op: OperatingProcedure,
    sender: str,
    prior_senders: FrozenSet[str] | set[str] = frozenset(),
) -> AgentAction:
    """Parse one agent reply and check that its action is legal for ``sender``."""
    thought, body = _split_thought_action(text)
    thought = _strip_thought_prefix(thought)

    m = _TOOL_RE.match(body)
    if m:
        tool = m.group(1)
        known = {t for a in op.agents for t in a.tools}
        if tool not in known:
            raise UnknownTool(f"tool {tool!r} is not part of this procedure")
        return AgentAction(thought=thought, act=ToolCall(tool=tool, arguments=m.group(2).strip()))

    m = _MESSAGE_RE.match(body)
    if m:
        recipient = m.group(1).strip()
        content_lines = m.group(2).splitlines()
        outcome = None
        if content_lines:
            om = _OUTCOME_RE.match(content_lines[-1])
            if om:
                outcome = om.group(1)
                content_lines = content_lines[:-1]
        content = "\n".join(content_lines).strip()
        nodes = set(op.team) | set(op.structure.nodes())
        if recipient == sender or recipient not in nodes or recipient == END_NODE:
            if recipient not in nodes:
                raise UnknownRecipient(f"{recipient!r} is not a member of this procedure")
            raise RecipientNotReachable(f"{sender!r} cannot message {recipient!r}")
        try:
            succ = successors(op.structure, sender, outcome)
        except UnknownNodeError:
            succ = []
        legal = set(succ) | set(prior_senders)
        if recipient not in legal:
            raise RecipientNotReachable(
                f"{recipient!r} is neither a successor of {sender!r} nor a prior sender to it"
            )
        return AgentAction(
            thought=thought,
            act=SendMessage(recipient=recipient, content=content, condition_outcome=outcome),
        )

    m = _FINAL_RE.match(body)
    if m:
        if not any(e.src == sender and e.dst == END_NODE for e in op.structure.edges):
            raise RecipientNotReachable(f"{sender!r} has no edge to End and cannot finalize")
        return AgentAction(thought=thought, act=FinalAnswer(content=m.group(1).strip()))

    raise MalformedAction(f"unrecognized action form: {body.splitlines()[0][:80]!r}")
