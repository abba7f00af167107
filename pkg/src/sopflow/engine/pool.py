"""Global message pool and tool-usage history.

All inter-agent traffic lives here: posting assigns globally monotone ids,
inboxes deliver unconsumed mail in id order, and removing an agent purges
every message and tool record it touched (the only trace left is the
intervention record written by the supervisor).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace

from ..domain import Message, MessageKind, ToolCallRecord


class PoolClosed(RuntimeError):
    pass


@dataclass(frozen=True)
class PurgeReport:
    agent: str
    messages_removed: int
    tool_records_removed: int
    action_messages_removed: int = 0


class Sequencer:
    """Shared commit counter; messages, tool records and interventions draw
    from the same sequence so the transcript has one total order."""

    def __init__(self, start: int = 1):
        self._next = start
        self._lock = threading.Lock()

    def take(self) -> int:
        with self._lock:
            value = self._next
            self._next += 1
            return value


class MessagePool:
    def __init__(self, seq: Sequencer | None = None):
        self.seq = seq or Sequencer()
        self._messages: list[Message] = []
        self._origins: dict[int, str] = {}
        self._consumed: set[int] = set()
        self._closed = False
        self._lock = threading.RLock()

    def _check_open(self) -> None:
        if self._closed:
            raise PoolClosed("the message pool is closed")

    def close(self) -> None:
        self._closed = True

    def post(
        self,
        sender: str,
        recipient: str,
        round: int,
        kind: MessageKind,
        content: str,
        cause: int | None = None,
        origin: str = "action",
    ) -> Message:
        self._check_open()
        with self._lock:
            message = Message(
                id=self.seq.take(),
                sender=sender,
                recipient=recipient,
                round=round,
                kind=kind,
                content=content,
                cause=cause,
            )
            self._messages.append(message)
            self._origins[message.id] = origin
            return message

    def inbox(self, agent: str) -> list[Message]:
        self._check_open()
        with self._lock:
            return [
                m for m in self._messages if m.recipient == agent and m.id not in self._consumed
            ]

    def mark_consumed(self, messages: list[Message]) -> None:
        with self._lock:
            self._consumed.update(m.id for m in messages)

    def messages(self) -> list[Message]:
        with self._lock:
            return list(self._messages)

    def origin(self, message_id: int) -> str:
        return self._origins.get(message_id, "action")

    def prior_senders(self, agent: str) -> set[str]:
        with self._lock:
            return {m.sender for m in self._messages if m.recipient == agent}

    def last_task_message_to(self, agent: str) -> Message | None:
        with self._lock:
            candidates = [
                m for m in self._messages if m.recipient == agent and m.kind is MessageKind.TASK
            ]
            return candidates[-1] if candidates else None

    def purge_agent(self, agent: str, history: "ToolHistory | None" = None) -> PurgeReport:
        """Drop every message sent by or to ``agent`` (and its tool records).

        Surviving messages whose cause pointed at a purged message have the
        cause cleared so the causal chain never dangles.
        """
        self._check_open()
        with self._lock:
            removed_ids = {m.id for m in self._messages if agent in (m.sender, m.recipient)}
            action_removed = sum(1 for mid in removed_ids if self._origins.get(mid) == "action")
            self._messages = [m for m in self._messages if m.id not in removed_ids]
            self._messages = [
                replace(m, cause=None) if m.cause in removed_ids else m for m in self._messages
            ]
            for mid in removed_ids:
                self._origins.pop(mid, None)
                self._consumed.discard(mid)
        tool_removed = history.purge_agent(agent) if history is not None else 0
        return PurgeReport(
            agent=agent,
            messages_removed=len(removed_ids),
            tool_records_removed=tool_removed,
            action_messages_removed=action_removed,
        )


class ToolHistory:
    def __init__(self, seq: Sequencer):
        self.seq = seq
        self._records: list[tuple[int, ToolCallRecord]] = []
        self._lock = threading.Lock()

    def append(self, record: ToolCallRecord) -> int:
        with self._lock:
            commit = self.seq.take()
            self._records.append((commit, record))
            return commit

    def records(self) -> list[ToolCallRecord]:
        with self._lock:
            return [r for _, r in self._records]

    def sequenced(self) -> list[tuple[int, ToolCallRecord]]:
        with self._lock:
            return list(self._records)

    def by_agent(self, agent: str) -> list[ToolCallRecord]:
        with self._lock:
            return [r for _, r in self._records if r.agent == agent]

    def purge_agent(self, agent: str) -> int:
        with self._lock:
            before = len(self._records)
            self._records = [(s, r) for s, r in self._records if r.agent != agent]
            return before - len(self._records)
