"""Execution engine: schedules agents over the workflow graph, parses their
replies, routes messages through the global pool, invokes tools, and
enforces the round cap.

A communication round is one scheduling sweep over the ready set (agents
with unconsumed mail or a pending tool observation). Within its turn an
agent may chain several tool calls; the chain breaks when it sends a
message, proposes a final answer, hits the per-turn chain bound, or a
supervisor intervention lands. Supervision hooks run at the round barrier,
after every tool call, and when a final answer is proposed.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

from ..domain import (
    END_NODE,
    USER_NODE,
    ExecutionTranscript,
    Intervention,
    InterventionKind,
    Message,
    MessageKind,
    OperatingProcedure,
    Query,
    TerminationReason,
    successors,
)
from ..gateway import ChatMessage, ChatPrompt, ModelError, ModelGateway
from .actions import ActionError, FinalAnswer, SendMessage, ToolCall, parse_action
from .pool import MessagePool, Sequencer, ToolHistory
from .tools import ToolNotGrantedError, ToolRegistry, UnknownToolError, invoke_tool

RECENT_NOTES = 10
WINDOW_LIMIT = 50


@dataclass(frozen=True)
class EnginePolicy:
    max_rounds: int = 30
    parallel: bool = False
    seed: int = 0
    max_tool_chain: int = 8

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if self.max_tool_chain < 1:
            raise ValueError("max_tool_chain must be at least 1")


class _Step(Enum):
    DONE = "done"
    FINAL = "final"
    FATAL = "fatal"


@dataclass(frozen=True)
class WindowEvent:
    kind: str  # message | tool_call | final
    payload: object


class EngineHandles:
    """Narrow facade the supervisor uses to observe and adjust a run."""

    def __init__(self, engine: "Engine"):
        self._engine = engine

    @property
    def op(self) -> OperatingProcedure:
        return self._engine.op

    @property
    def query(self) -> Query:
        return self._engine.query

    @property
    def round(self) -> int:
        return self._engine.round

    @property
    def interventions_used(self) -> int:
        return len(self._engine.interventions)

    def env_steps(self) -> dict[str, int]:
        return dict(self._engine.env_steps)

    def agent_spec(self, name: str):
        return self._engine.agents[name]

    def registry_names(self) -> set[str]:
        return self._engine.registry.names()

    def window(self) -> list[WindowEvent]:
        return self._engine.window()

    def post_guidance(self, target: str, text: str) -> Message:
        return self._engine.post_guidance(target, text)

    def record_intervention(self, intervention: Intervention) -> None:
        self._engine.record_intervention(intervention)

    def reset_env_counter(self, agent: str) -> None:
        self._engine.env_steps[agent] = 0

    def apply_replacement(
        self, name: str, new_spec, reason: str = "", pep_refs: tuple[str, ...] = ()
    ) -> Intervention:
        return self._engine.apply_replacement(name, new_spec, reason=reason, pep_refs=pep_refs)


class Engine:
    def __init__(
        self,
        op: OperatingProcedure,
        query: Query,
        policy: EnginePolicy,
        gateway: ModelGateway,
        registry: ToolRegistry,
        watcher=None,
    ):
        self.op = op
        self.query = query
        self.policy = policy
        self.gateway = gateway
        self.registry = registry
        self.watcher = watcher
        self.seq = Sequencer()
        self.pool = MessagePool(self.seq)
        self.history = ToolHistory(self.seq)
        self.agents = {a.name: a for a in op.agents}
        self.env_steps: dict[str, int] = {name: 0 for name in op.team}
        self.pending_obs: dict[str, bool] = {name: False for name in op.team}
        self.notes: dict[str, list[str]] = {name: [] for name in op.team}
        self.generation: dict[str, int] = {name: 1 for name in op.team}
        self.round = 0
        self.interventions: list[tuple[int, Intervention]] = []
        self.final_answer: str | None = None
        self.stats = {
            "actions": 0,
            "purged_messages": 0,
            "purged_action_messages": 0,
            "purged_tool_records": 0,
            "reposted_messages": 0,
        }
        self.records: list[dict] = []
        self.stalled = False
        self._last_intervention_seq = 0
        self._lock = threading.RLock()

    # -- run loop --------------------------------------------------------

    def run(self) -> ExecutionTranscript:
        from ..watcher import SupervisionFatal

        start = time.perf_counter()
        terminated: TerminationReason | None = None

        for target in successors(self.op.structure, USER_NODE):
            self.pool.post(
                USER_NODE, target, 0, MessageKind.TASK, self.query.text, origin="seed"
            )

        while self.round < self.policy.max_rounds:
            ready = [
                name
                for name in self.op.team
                if self.pending_obs.get(name) or self.pool.inbox(name)
            ]
            if not ready:
                self.stalled = True
                terminated = TerminationReason.ROUND_CAP
                break
            self.round += 1
            try:
                outcome = self._sweep(ready)
            except SupervisionFatal:
                outcome = _Step.FATAL
            if outcome is _Step.FINAL:
                terminated = TerminationReason.FINAL_ANSWER
                break
            if outcome is _Step.FATAL:
                terminated = TerminationReason.FATAL_ERROR
                break
            if self.watcher is not None:
                try:
                    self.watcher.on_round_barrier(EngineHandles(self), self.round)
                except SupervisionFatal:
                    terminated = TerminationReason.FATAL_ERROR
                    break
        if terminated is None:
            terminated = TerminationReason.ROUND_CAP

        wall = time.perf_counter() - start
        transcript = ExecutionTranscript(
            op=self.op,
            messages=self.pool.messages(),
            tool_calls=self.history.records(),
            interventions=[iv for _, iv in self.interventions],
            final_answer=self.final_answer,
            rounds_used=self.round,
            wall_time=wall,
            terminated_by=terminated,
        )
        self.records = self._build_records(transcript)
        self.pool.close()
        return transcript

    def _sweep(self, ready: list[str]) -> _Step:
        if self.policy.parallel and len(ready) > 1:
            with ThreadPoolExecutor(max_workers=len(ready)) as executor:
                results = list(executor.map(self._step_agent, ready))
            if _Step.FATAL in results:
                return _Step.FATAL
            if _Step.FINAL in results:
                return _Step.FINAL
            return _Step.DONE
        for name in ready:
            result = self._step_agent(name)
            if result is not _Step.DONE:
                return result
        return _Step.DONE

    # -- one agent turn ----------------------------------------------------

    def _step_agent(self, name: str) -> _Step:
        from ..watcher import SupervisionFatal

        inbox = self.pool.inbox(name)
        prior = self.pool.prior_senders(name) - {name}
        cause = max((m.id for m in inbox), default=None)
        consumed = False
        repairs = 0
        chain = 0
        error_note: str | None = None

        while True:
            spec = self.agents[name]
            chat = self._render_prompt(spec, inbox, error_note)
            try:
                reply = self.gateway.complete(chat)
            except ModelError as exc:
                self._note(name, f"gateway failure: {exc}")
                return _Step.FATAL
            try:
                action = parse_action(reply.text, self.op, name, prior_senders=prior)
            except ActionError as exc:
                if repairs < 1:
                    repairs += 1
                    error_note = f"Your previous reply was rejected: {exc}"
                    continue
                # Unusable turn: leave unconsumed mail for redelivery.
                if consumed:
                    self.pending_obs[name] = True
                return _Step.DONE

            if not consumed:
                self.pool.mark_consumed(inbox)
                consumed = True
                self.pending_obs[name] = False

            act = action.act
            if isinstance(act, ToolCall):
                step, intervention = self._apply_tool_call(name, act, repairs)
                if step == "repair":
                    repairs += 1
                    error_note = "Your previous reply was rejected: tool call refused"
                    continue
                if step == "giveup":
                    self.pending_obs[name] = True
                    return _Step.DONE
                if step == "intervened":
                    # Chain broken by supervision; unless this very slot was
                    # replaced (its state was reset and its task re-posted),
                    # keep the agent scheduled so its work resumes.
                    replaced_self = (
                        intervention is not None
                        and intervention.kind is InterventionKind.REPLACEMENT
                        and intervention.target == name
                    )
                    if not replaced_self:
                        self.pending_obs[name] = True
                    return _Step.DONE
                chain += 1
                if chain >= self.policy.max_tool_chain:
                    self.pending_obs[name] = True
                    return _Step.DONE
                error_note = None
                continue

            if isinstance(act, SendMessage):
                self._apply_send(name, act, cause)
                return _Step.DONE

            assert isinstance(act, FinalAnswer)
            if self.watcher is not None:
                iv = self.watcher.on_final_answer(EngineHandles(self), name, act.content)
                if iv is not None:
                    # The proposed final was vetoed; the slot owner restarts.
                    return _Step.DONE
            self.pool.post(
                name, END_NODE, self.round, MessageKind.FINAL_ANSWER, act.content, cause=cause
            )
            with self._lock:
                self.stats["actions"] += 1
            self.env_steps[name] = 0
            self.final_answer = act.content
            return _Step.FINAL

    def _apply_tool_call(
        self, name: str, act: ToolCall, repairs: int
    ) -> tuple[str, Intervention | None]:
        spec = self.agents[name]
        try:
            record = invoke_tool(
                self.registry, spec, act.tool, act.arguments, self.history, self.env_steps
            )
        except (UnknownToolError, ToolNotGrantedError) as exc:
            self._note(name, f"refused tool call: {exc}")
            return ("repair" if repairs < 1 else "giveup"), None
        with self._lock:
            self.stats["actions"] += 1
        self._note(
            name,
            f"tool {record.tool} ({record.outcome.value}): {record.observation[:400]}",
        )
        if self.watcher is not None:
            iv = self.watcher.on_tool_call(EngineHandles(self), name)
            if iv is not None:
                return "intervened", iv
        return "ok", None

    def _apply_send(self, name: str, act: SendMessage, cause: int | None) -> None:
        kind = self._message_kind(name, act)
        self.pool.post(name, act.recipient, self.round, kind, act.content, cause=cause)
        with self._lock:
            self.stats["actions"] += 1
        self.env_steps[name] = 0
        self.pending_obs[name] = False
        self._note(name, f"sent to {act.recipient}: {act.content[:200]}")

    def _message_kind(self, sender: str, act: SendMessage) -> MessageKind:
        conditioned = any(
            e.src == sender
            and e.dst == act.recipient
            and e.condition is not None
            and e.condition == act.condition_outcome
            for e in self.op.structure.edges
        )
        if conditioned:
            return MessageKind.FEEDBACK
        unconditioned = any(
            e.src == sender and e.dst == act.recipient and e.condition is None
            for e in self.op.structure.edges
        )
        if unconditioned:
            return MessageKind.TASK
        return MessageKind.CLARIFICATION

    # -- prompt rendering --------------------------------------------------

    def _render_prompt(
        self, spec, inbox: list[Message], error_note: str | None
    ) -> ChatPrompt:
        recipients = []
        for e in self.op.structure.edges:
            if e.src == spec.name and e.dst != END_NODE:
                label = e.dst if e.condition is None else f"{e.dst} (outcome: {e.condition})"
                recipients.append(label)
        can_finalize = any(
            e.src == spec.name and e.dst == END_NODE for e in self.op.structure.edges
        )
        tool_usage = self.registry.usage_for(spec.tools)
        system_parts = [
            f"[agent:{spec.name}] You are {spec.name}, one of {len(self.op.team)} collaborating agents.",
            f"Responsibility: {spec.responsibility}",
            f"Instruction: {spec.instruction}",
            f"Team: {', '.join(self.op.team)}",
        ]
        if self.op.structure.description:
            system_parts.append(f"Workflow: {self.op.structure.description}")
        if recipients:
            system_parts.append(
                "You may send messages to: "
                + ", ".join(recipients)
                + ". You may also reply upward to any agent that messaged you."
            )
        if tool_usage:
            system_parts.append("Tools available:\n" + tool_usage)
        grammar = [
            "Reply with a thought and exactly one action:",
            "Thought: <your reasoning>",
            "Action: tool: <name> | args: <payload>",
            "    or: message: <recipient> | <content>",
            "        (append a line 'outcome: <label>' when taking a conditioned edge)",
        ]
        if can_finalize:
            grammar.append("    or: final: <the complete final answer>")
        system_parts.append("\n".join(grammar))

        user_parts = ["[inbox]"]
        if inbox:
            for m in inbox:
                user_parts.append(f"#{m.id} from {m.sender} ({m.kind.value}): {m.content}")
        else:
            user_parts.append("(no new messages; continue from your recent activity)")
        notes = self.notes[spec.name][-RECENT_NOTES:]
        if notes:
            user_parts.append("[your recent activity]")
            user_parts.extend(notes)
        if error_note:
            user_parts.append(f"[error] {error_note}")

        return ChatPrompt(
            messages=(
                ChatMessage("system", "\n".join(system_parts)),
                ChatMessage("user", "\n".join(user_parts)),
            ),
            temperature=self.gateway.temperature,
        )

    def _note(self, name: str, text: str) -> None:
        with self._lock:
            self.notes[name].append(text)

    # -- supervisor-facing mutations ----------------------------------------

    def window(self) -> list[WindowEvent]:
        with self._lock:
            events: list[tuple[int, WindowEvent]] = []
            for m in self.pool.messages():
                if m.id > self._last_intervention_seq:
                    events.append((m.id, WindowEvent("message", m)))
            for seq, record in self.history.sequenced():
                if seq > self._last_intervention_seq:
                    events.append((seq, WindowEvent("tool_call", record)))
            events.sort(key=lambda item: item[0])
            return [e for _, e in events[-WINDOW_LIMIT:]]

    def post_guidance(self, target: str, text: str) -> Message:
        from ..domain import WATCHER_NODE

        return self.pool.post(
            WATCHER_NODE,
            target,
            self.round,
            MessageKind.WATCHER_GUIDANCE,
            text,
            origin="watcher",
        )

    def record_intervention(self, intervention: Intervention) -> None:
        with self._lock:
            seq = self.seq.take()
            self.interventions.append((seq, intervention))
            self._last_intervention_seq = seq

    def apply_replacement(
        self, name: str, new_spec, reason: str = "", pep_refs: tuple[str, ...] = ()
    ) -> Intervention:
        """Swap in a fresh spec for a role slot: purge the old agent's
        traces, commit the intervention record, then re-post the last
        task-bearing message so the workflow resumes. Committed in that
        order so nothing referencing the slot precedes the intervention in
        the transcript."""
        with self._lock:
            last_task = self.pool.last_task_message_to(name)
            report = self.pool.purge_agent(name, self.history)
            self.stats["purged_messages"] += report.messages_removed
            self.stats["purged_action_messages"] += report.action_messages_removed
            self.stats["purged_tool_records"] += report.tool_records_removed
            self.agents[name] = new_spec
            self.generation[name] += 1
            self.env_steps[name] = 0
            self.pending_obs[name] = False
            self.notes[name] = []
            intervention = Intervention(
                kind=InterventionKind.REPLACEMENT,
                target=name,
                payload={
                    "agent_spec": new_spec.to_dict(),
                    "reason": reason,
                    "purged_messages": report.messages_removed,
                    "purged_tool_records": report.tool_records_removed,
                },
                round=self.round,
                pep_refs=tuple(pep_refs),
            )
            self.record_intervention(intervention)
            if last_task is not None:
                self.pool.post(
                    last_task.sender,
                    name,
                    self.round,
                    MessageKind.TASK,
                    last_task.content,
                    cause=None,
                    origin="repost",
                )
                self.stats["reposted_messages"] += 1
            return intervention

    # -- transcript records --------------------------------------------------

    def _build_records(self, transcript: ExecutionTranscript) -> list[dict]:
        from .transcript import build_records

        if self.watcher is not None:
            watcher_echo = {
                "enabled": True,
                "interval": self.watcher.policy.comm_interval,
                "env_threshold": self.watcher.policy.env_threshold,
                "cap": self.watcher.policy.max_interventions,
            }
        else:
            watcher_echo = {"enabled": False}
        header = {
            "op": self.op.to_dict(),
            "query": self.query.to_dict(),
            "policy": {
                "max_rounds": self.policy.max_rounds,
                "parallel": self.policy.parallel,
                "seed": self.policy.seed,
                "max_tool_chain": self.policy.max_tool_chain,
            },
            "watcher": watcher_echo,
        }
        summary = {
            "terminated_by": transcript.terminated_by.value,
            "final_answer": transcript.final_answer,
            "rounds_used": transcript.rounds_used,
            "stalled": self.stalled,
            "messages": len(transcript.messages),
            "tool_calls": len(transcript.tool_calls),
            "interventions": len(transcript.interventions),
            "actions": self.stats["actions"],
            "purged_messages": self.stats["purged_messages"],
            "purged_action_messages": self.stats["purged_action_messages"],
            "purged_tool_records": self.stats["purged_tool_records"],
            "reposted_messages": self.stats["reposted_messages"],
        }
        return build_records(
            header,
            [(m, self.pool.origin(m.id)) for m in transcript.messages],
            self.history.sequenced(),
            list(self.interventions),
            summary,
        )


def run(
    op: OperatingProcedure,
    query: Query,
    policy: EnginePolicy,
    gateway: ModelGateway,
    registry: ToolRegistry,
    watcher=None,
) -> ExecutionTranscript:
    """Convenience wrapper when caller does not need the record stream."""
    return Engine(op, query, policy, gateway, registry, watcher).run()
