"""Global supervision: decides when to look, classifies anomalies at two
levels (inter-agent communication and agent-environment interaction), and
applies the two interventions, guidance messages enriched with pooled
failure experience, and replacement of critically flawed agents.

Reviews trigger on a round cadence (every M rounds, default half the team
size) and on runaway tool usage (L consecutive interactions, default 5),
both gated by a total intervention cap. Two cheap rule checks answer the
common cases without a model call; otherwise a review prompt goes to the
gateway, and a gateway failure fails open (execution continues).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

from .domain import (
    AgentSpec,
    Intervention,
    InterventionKind,
    OperatingProcedure,
    ParseError,
    PEPRecord,
    TaskKind,
)
from .gateway import ModelError, ModelGateway, prompt
from .instantiation import extract_json, load_template

DEFAULT_ENV_THRESHOLD = 5
DEFAULT_CAP = 8
REPAIR_BUDGET = 2

_TOOL_REQUIRING_KINDS = {TaskKind.PLANNING, TaskKind.QA, TaskKind.CODING}
_REPEAT_LIMIT = 3


class CapExceeded(Exception):
    pass


class SupervisionFatal(Exception):
    """Replacement generation failed beyond the repair budget."""


def default_interval(team_size: int) -> int:
    # Half the team size, floored, but never less than one round.
    return max(1, team_size // 2)


@dataclass(frozen=True)
class InterventionPolicy:
    comm_interval: int
    env_threshold: int = DEFAULT_ENV_THRESHOLD
    max_interventions: int = DEFAULT_CAP

    def __post_init__(self):
        if self.comm_interval < 1:
            raise ValueError("the round interval must be at least 1")
        if self.env_threshold < 1:
            raise ValueError("the environment threshold must be at least 1")
        if self.max_interventions < 0:
            raise ValueError("the intervention cap cannot be negative")

    @property
    def frequency(self) -> float:
        return 1.0 / self.comm_interval

    @classmethod
    def for_team(
        cls,
        team_size: int,
        interval: int | None = None,
        env_threshold: int = DEFAULT_ENV_THRESHOLD,
        cap: int = DEFAULT_CAP,
    ) -> "InterventionPolicy":
        return cls(
            comm_interval=interval if interval is not None else default_interval(team_size),
            env_threshold=env_threshold,
            max_interventions=cap,
        )


class FindingLevel(str, Enum):
    INTER_AGENT = "inter_agent"
    AGENT_ENVIRONMENT = "agent_environment"


class Severity(str, Enum):
    RECOVERABLE = "recoverable"
    CRITICAL = "critical"


@dataclass(frozen=True)
class Finding:
    verdict: str  # normal | anomaly
    level: FindingLevel | None = None
    agent: str = ""
    description: str = ""
    severity: Severity = Severity.RECOVERABLE

    def __post_init__(self):
        if self.verdict == "anomaly" and not self.agent:
            raise ValueError("an anomaly finding must name an agent")

    @property
    def is_anomaly(self) -> bool:
        return self.verdict == "anomaly"


NORMAL = Finding(verdict="normal")


class TriggerKind(str, Enum):
    ROUND = "round"
    ENV = "env"
    FINAL = "final"


@dataclass(frozen=True)
class Trigger:
    kind: TriggerKind
    agent: str = ""


@dataclass(frozen=True)
class TriggerCounters:
    round: int
    env_steps: Mapping[str, int]
    interventions_used: int
    at_barrier: bool = True


def should_intervene(counters: TriggerCounters, policy: InterventionPolicy) -> Trigger | None:
    """Round trigger at every M-th barrier, environment trigger at L
    consecutive tool steps; nothing fires once the cap is spent."""
    if counters.interventions_used >= policy.max_interventions:
        return None
    if counters.at_barrier and counters.round > 0 and counters.round % policy.comm_interval == 0:
        return Trigger(TriggerKind.ROUND)
    for agent, steps in counters.env_steps.items():
        if steps >= policy.env_threshold:
            return Trigger(TriggerKind.ENV, agent=agent)
    return None


@dataclass(frozen=True)
class ReviewEvent:
    round: int
    trigger: Trigger
    finding: Finding


@dataclass(frozen=True)
class ReplaceResult:
    spec: AgentSpec
    repairs: int


@dataclass
class Watcher:
    policy: InterventionPolicy
    gateway: ModelGateway
    pep_store: object | None = None
    use_pep: bool = True
    pep_k: int = 2
    reviews: list[ReviewEvent] = field(default_factory=list)
    interventions_used: int = 0
    _pep_hits: list[PEPRecord] | None = None

    # -- engine hooks ------------------------------------------------------

    def on_round_barrier(self, handles, round_: int) -> Intervention | None:
        counters = TriggerCounters(
            round=round_,
            env_steps=handles.env_steps(),
            interventions_used=self.interventions_used,
            at_barrier=True,
        )
        trigger = should_intervene(counters, self.policy)
        if trigger is None:
            return None
        return self._run_review(handles, trigger, use_model=True)

    def on_tool_call(self, handles, agent: str) -> Intervention | None:
        counters = TriggerCounters(
            round=handles.round,
            env_steps={agent: handles.env_steps().get(agent, 0)},
            interventions_used=self.interventions_used,
            at_barrier=False,
        )
        trigger = should_intervene(counters, self.policy)
        if trigger is None:
            return None
        intervention = self._run_review(handles, trigger, use_model=True)
        # Rearm the runaway detector so one long interaction burst is
        # reviewed once, not after every subsequent call.
        handles.reset_env_counter(agent)
        return intervention

    def on_final_answer(self, handles, agent: str, content: str) -> Intervention | None:
        if self.interventions_used >= self.policy.max_interventions:
            return None
        trigger = Trigger(TriggerKind.FINAL, agent=agent)
        return self._run_review(handles, trigger, use_model=False, final=(agent, content))

    # -- review ------------------------------------------------------------

    def _run_review(
        self, handles, trigger: Trigger, use_model: bool, final: tuple[str, str] | None = None
    ) -> Intervention | None:
        window = handles.window()
        finding = self.review(
            window, handles.op, self._hits(handles), use_model=use_model, final=final
        )
        self.reviews.append(ReviewEvent(round=handles.round, trigger=trigger, finding=finding))
        if not finding.is_anomaly:
            return None
        if self.interventions_used >= self.policy.max_interventions:
            return None
        return self.intervene(finding, handles)

    def _hits(self, handles) -> list[PEPRecord]:
        if not self.use_pep or self.pep_store is None:
            return []
        if self._pep_hits is None:
            self._pep_hits = self.pep_store.lookup(handles.query, self.pep_k)
        return self._pep_hits

    def review(
        self,
        window: Sequence,
        op: OperatingProcedure,
        pep_hits: Sequence[PEPRecord],
        use_model: bool = True,
        final: tuple[str, str] | None = None,
    ) -> Finding:
        """Classify the recent window; rule checks short-circuit the model."""
        finding = _rule_checks(window, op, final)
        if finding is not None:
            return finding
        if not use_model:
            return NORMAL
        chat = prompt(
            (
                "user",
                load_template("review").substitute(
                    op=json.dumps(op.to_dict(), ensure_ascii=False, indent=2),
                    window=_render_window(window, final),
                    experiences=_render_experiences(pep_hits) or "(none on record)",
                ),
            ),
            temperature=self.gateway.temperature,
        )
        try:
            reply = self.gateway.complete(chat)
        except ModelError:
            return NORMAL  # fail open: supervision must not brick execution
        return _parse_review_reply(reply.text, op)

    # -- interventions -------------------------------------------------------

    def intervene(self, finding: Finding, handles) -> Intervention:
        """Apply the action a finding calls for: guidance or replacement."""
        if not finding.is_anomaly:
            raise ValueError("only anomaly findings warrant an intervention")
        if self.interventions_used >= self.policy.max_interventions:
            raise CapExceeded(f"intervention cap {self.policy.max_interventions} reached")

        pep_hits = self._hits(handles)
        strategies: list[str] = []
        refs: list[str] = []
        for record in pep_hits:
            matched = [e.improvement_strategy for e in record.experiences if e.agent == finding.agent]
            if matched:
                strategies.extend(matched)
                if record.id:
                    refs.append(record.id)

        if finding.severity is Severity.CRITICAL:
            result = self.replace_agent(handles, finding.agent, reason=finding.description)
            intervention = handles.apply_replacement(
                finding.agent, result.spec, reason=finding.description, pep_refs=tuple(refs)
            )
        else:
            text = f"Supervisor guidance: {finding.description}"
            if strategies:
                quoted = "; ".join(strategies)
                text += f" Apply these strategies from past experience: {quoted}"
            intervention = Intervention(
                kind=InterventionKind.GUIDANCE,
                target=finding.agent,
                payload={"guidance": text},
                round=handles.round,
                pep_refs=tuple(refs),
            )
            handles.record_intervention(intervention)
            handles.post_guidance(finding.agent, text)
        self.interventions_used += 1
        return intervention

    def replace_agent(self, handles, agent: str, reason: str = "") -> ReplaceResult:
        """Generate a fresh spec for the same role slot (same name, same
        grants by default); the engine purges the old agent and reseeds it."""
        old_spec: AgentSpec = handles.agent_spec(agent)
        pep_hits = self._hits(handles)
        base = load_template("replacement").substitute(
            old_spec=json.dumps(old_spec.to_dict(), ensure_ascii=False, indent=2),
            reason=reason or "critical anomaly detected during supervision",
            experiences=_render_experiences(pep_hits, agent=agent) or "(none on record)",
        )
        registry = handles.registry_names()
        feedback = ""
        last_error: Exception | None = None
        for attempt in range(1 + REPAIR_BUDGET):
            chat = prompt(("user", base + feedback), temperature=self.gateway.temperature)
            try:
                reply = self.gateway.complete(chat)
            except ModelError as exc:
                raise SupervisionFatal(f"replacement generation failed: {exc}")
            try:
                raw = extract_json(reply.text)
                spec = AgentSpec.from_dict(raw, "replacement")
            except ParseError as exc:
                last_error = exc
                feedback = (
                    f"\n[repair] Your previous reply was rejected: {exc}."
                    " Reply again with one corrected JSON object."
                )
                continue
            # The public name must not change or the workflow edges break;
            # missing tool grants fall back to the old ones.
            tools = spec.tools if "tools" in raw or "Tools" in raw else old_spec.tools
            spec = AgentSpec(
                name=agent,
                responsibility=spec.responsibility,
                instruction=spec.instruction,
                tools=tools,
            )
            bad = [t for t in spec.tools if t not in registry]
            if bad:
                last_error = ParseError(
                    "type_mismatch", "replacement.tools", f"unregistered tools {bad}"
                )
                feedback = (
                    f"\n[repair] Your previous reply was rejected: {last_error}."
                    f" Only these tools exist: {sorted(registry)}."
                )
                continue
            return ReplaceResult(spec=spec, repairs=attempt)
        raise SupervisionFatal(f"replacement spec unusable after repairs: {last_error}")


def _rule_checks(window: Sequence, op: OperatingProcedure, final: tuple[str, str] | None) -> Finding | None:
    # Rule one: an agent repeating the same message is stuck in a loop.
    counts: dict[tuple[str, str], int] = {}
    team = set(op.team)
    for event in window:
        if event.kind != "message":
            continue
        message = event.payload
        if message.sender not in team:
            continue
        key = (message.sender, message.content)
        counts[key] = counts.get(key, 0) + 1
        if counts[key] >= _REPEAT_LIMIT:
            return Finding(
                verdict="anomaly",
                level=FindingLevel.INTER_AGENT,
                agent=message.sender,
                description=(
                    f"{message.sender} repeated an identical message"
                    f" {counts[key]} times; the conversation is looping"
                ),
                severity=Severity.RECOVERABLE,
            )
    # Rule two: a final answer from a tool-equipped agent that never touched
    # its tools on a task that needs them is likely fabricated.
    if final is not None:
        agent, _content = final
        try:
            spec = op.agent(agent)
        except Exception:
            spec = None
        if (
            spec is not None
            and spec.tools
            and op.bound_query.task_kind in _TOOL_REQUIRING_KINDS
        ):
            used = sum(
                1
                for event in window
                if event.kind == "tool_call" and event.payload.agent == agent
            )
            if used == 0:
                return Finding(
                    verdict="anomaly",
                    level=FindingLevel.AGENT_ENVIRONMENT,
                    agent=agent,
                    description=(
                        f"{agent} produced a final answer without invoking any of its"
                        f" granted tools ({', '.join(spec.tools)}) on a task that requires them"
                    ),
                    severity=Severity.CRITICAL,
                )
    return None


def _render_window(window: Sequence, final: tuple[str, str] | None) -> str:
    lines = []
    for event in window:
        if event.kind == "message":
            m = event.payload
            lines.append(f"{m.sender} -> {m.recipient} [{m.kind.value}]: {m.content[:300]}")
        elif event.kind == "tool_call":
            r = event.payload
            lines.append(
                f"{r.agent} used tool {r.tool} ({r.outcome.value}), step {r.step}:"
                f" {r.observation[:200]}"
            )
    if final is not None:
        lines.append(f"{final[0]} proposes the final answer: {final[1][:300]}")
    return "\n".join(lines) or "(no recent activity)"


def _render_experiences(pep_hits: Sequence[PEPRecord], agent: str | None = None) -> str:
    lines = []
    for record in pep_hits:
        for exp in record.experiences:
            if agent is not None and exp.agent != agent:
                continue
            lines.append(
                f"- {exp.agent}: {exp.error_attribution} Strategy: {exp.improvement_strategy}"
            )
    return "\n".join(lines)


def _parse_review_reply(text: str, op: OperatingProcedure) -> Finding:
    fields: dict[str, str] = {}
    for line in text.splitlines():
        if ":" in line:
            key, _, value = line.partition(":")
            fields[key.strip().upper()] = value.strip()
    verdict = fields.get("VERDICT", text.strip()).upper()
    if "ANOMALY" not in verdict:
        return NORMAL
    agent = fields.get("AGENT", "")
    if agent not in set(op.team):
        return NORMAL  # fail open on unattributable reports
    level_raw = fields.get("LEVEL", FindingLevel.INTER_AGENT.value)
    try:
        level = FindingLevel(level_raw)
    except ValueError:
        level = FindingLevel.INTER_AGENT
    severity_raw = fields.get("SEVERITY", Severity.RECOVERABLE.value)
    try:
        severity = Severity(severity_raw)
    except ValueError:
        severity = Severity.RECOVERABLE
    return Finding(
        verdict="anomaly",
        level=level,
        agent=agent,
        description=fields.get("DESCRIPTION", "anomaly reported by the reviewer"),
        severity=severity,
    )
