"""Uniform model access: chat completions and text embeddings.

Two interchangeable completion backends: a deterministic scripted backend
(ordered first-match rules with per-rule budgets) for tests and offline runs,
and a chat-completions-style HTTP backend with exponential backoff. Every
completion can be appended to a JSONL prompt log, and a log can be turned
back into scripted rules, so any live run is convertible into a fixture.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from hashlib import blake2b
from pathlib import Path
from typing import Sequence

DEFAULT_TEMPERATURE = 0.6
DEFAULT_EMBED_DIM = 256


class ModelError(Exception):
    """Base class for gateway failures."""


class NoRuleMatched(ModelError):
    pass


class EmptyReply(ModelError):
    pass


class TransportError(ModelError):
    def __init__(self, message: str, retries: int = 0):
        self.retries = retries
        super().__init__(f"{message} (after {retries} retries)")


class RateLimitError(TransportError):
    pass


class RemoteError(TransportError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class ChatPrompt:
    messages: tuple[ChatMessage, ...]
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = 2048

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a prompt needs at least one message")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be within [0, 2]")

    def rendered(self) -> str:
        return "\n".join(f"{m.role}: {m.content}" for m in self.messages)


def prompt(*parts: tuple[str, str], temperature: float = DEFAULT_TEMPERATURE, max_tokens: int = 2048) -> ChatPrompt:
    return ChatPrompt(
        messages=tuple(ChatMessage(role, content) for role, content in parts),
        temperature=temperature,
        max_tokens=max_tokens,
    )


@dataclass(frozen=True)
class ModelReply:
    text: str
    usage: dict = field(default_factory=dict)
    backend_tag: str = ""


@dataclass
class ScriptRule:
    """One canned reply: first rule whose matcher hits the rendered prompt wins."""

    matcher: str
    response: str
    max_uses: int | None = None
    regex: bool = False
    uses: int = 0

    def matches(self, rendered: str) -> bool:
        if self.max_uses is not None and self.uses >= self.max_uses:
            return False
        if self.regex:
            return re.search(self.matcher, rendered) is not None
        return self.matcher in rendered


class ScriptedBackend:
    """Pure function of (rules, prompt, per-rule use counts)."""

    tag = "scripted"

    def __init__(self, rules: Sequence[ScriptRule]):
        self.rules = list(rules)
        self._lock = threading.Lock()

    def complete(self, chat: ChatPrompt) -> ModelReply:
        rendered = chat.rendered()
        with self._lock:
            for rule in self.rules:
                if rule.matches(rendered):
                    rule.uses += 1
                    return ModelReply(text=rule.response, usage={}, backend_tag=self.tag)
        raise NoRuleMatched(f"no scripted rule matched prompt starting {rendered[:120]!r}")


class HttpBackend:
    """Chat-completions-style client; vendor-neutral, retries with backoff."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "SOPFLOW_API_KEY",
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 1.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.tag = f"http:{model}"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, path: str, payload: dict) -> dict:
        import requests

        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = requests.post(
                    f"{self.base_url}{path}",
                    json=payload,
                    headers=self._headers(),
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last_error = exc
            else:
                if resp.status_code == 429:
                    last_error = RateLimitError("rate limited", attempt)
                elif resp.status_code >= 500:
                    last_error = RemoteError(f"server error {resp.status_code}", attempt)
                elif resp.status_code >= 400:
                    raise RemoteError(f"request rejected: {resp.status_code} {resp.text[:200]}", attempt)
                else:
                    return resp.json()
            if attempt < self.max_retries:
                time.sleep(self.backoff * (2**attempt))
        if isinstance(last_error, TransportError):
            raise last_error
        raise TransportError(str(last_error), self.max_retries)

    def complete(self, chat: ChatPrompt) -> ModelReply:
        payload = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in chat.messages],
            "temperature": chat.temperature,
            "max_tokens": chat.max_tokens,
        }
        data = self._post("/chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise RemoteError("malformed completion response", 0)
        return ModelReply(text=text, usage=data.get("usage", {}) or {}, backend_tag=self.tag)

    def embed(self, text: str) -> list[float]:
        data = self._post("/embeddings", {"model": self.model, "input": text})
        try:
            vector = [float(x) for x in data["data"][0]["embedding"]]
        except (KeyError, IndexError, TypeError, ValueError):
            raise RemoteError("malformed embedding response", 0)
        return _normalize(vector)


def fallback_embedding(text: str, dim: int = DEFAULT_EMBED_DIM) -> list[float]:
    """Deterministic, order-insensitive bag-of-tokens embedding.

    Lowercase, split on non-alphanumerics, hash each token into one of
    ``dim`` buckets, count, L2-normalize. Empty input maps to the zero vector.
    """
    counts = [0.0] * dim
    for token in re.split(r"[^0-9a-z]+", text.lower()):
        if not token:
            continue
        bucket = int.from_bytes(blake2b(token.encode("utf-8"), digest_size=8).digest(), "big") % dim
        counts[bucket] += 1.0
    return _normalize(counts)


def _normalize(vector: list[float]) -> list[float]:
    norm = math.sqrt(sum(x * x for x in vector))
    if norm == 0.0:
        return [0.0] * len(vector)
    return [x / norm for x in vector]


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    """Standard cosine similarity; zero vectors compare as 0."""
    if len(a) != len(b):
        raise DimensionMismatch(f"vector dimensions differ: {len(a)} vs {len(b)}")
    dot = 0.0
    na = 0.0
    nb = 0.0
    for x, y in zip(a, b):
        dot += x * y
        na += x * x
        nb += y * y
    denom = math.sqrt(na) * math.sqrt(nb)
    if denom == 0.0:  # zero vectors, or norms that underflow to zero
        return 0.0
    return dot / denom


class ModelGateway:
    """Front door for every completion and embedding the pipeline makes."""

    def __init__(
        self,
        backend: ScriptedBackend | HttpBackend,
        embed_dim: int = DEFAULT_EMBED_DIM,
        prompt_log: str | Path | None = None,
        temperature: float = DEFAULT_TEMPERATURE,
        embedding_backend: str = "fallback",
    ):
        self.backend = backend
        self.embed_dim = embed_dim
        self.temperature = temperature
        self.embedding_backend = embedding_backend
        self.prompt_log = Path(prompt_log) if prompt_log else None
        self.calls = 0
        self.total_tokens = 0
        self._lock = threading.Lock()

    def complete(self, chat: ChatPrompt) -> ModelReply:
        reply = self.backend.complete(chat)
        with self._lock:
            self.calls += 1
            self.total_tokens += int(reply.usage.get("total_tokens", 0) or 0)
            if self.prompt_log is not None:
                entry = {
                    "backend": reply.backend_tag,
                    "messages": [{"role": m.role, "content": m.content} for m in chat.messages],
                    "temperature": chat.temperature,
                    "max_tokens": chat.max_tokens,
                    "response": reply.text,
                    "usage": reply.usage,
                }
                with self.prompt_log.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
        return reply

    def embed(self, text: str) -> list[float]:
        if self.embedding_backend == "http" and isinstance(self.backend, HttpBackend):
            return self.backend.embed(text)
        return fallback_embedding(text, self.embed_dim)


def load_rules(path: str | Path) -> list[ScriptRule]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ValueError("script rules file must hold a JSON list")
    rules = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "match" not in item or "response" not in item:
            raise ValueError(f"rule {i} must be an object with 'match' and 'response'")
        rules.append(
            ScriptRule(
                matcher=item["match"],
                response=item["response"],
                max_uses=item.get("max_uses"),
                regex=bool(item.get("regex", False)),
            )
        )
    return rules


def rules_from_log(path: str | Path) -> list[ScriptRule]:
    """Turn a prompt log back into exact-match, single-use scripted rules."""
    rules = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        rendered = "\n".join(f"{m['role']}: {m['content']}" for m in entry["messages"])
        rules.append(ScriptRule(matcher=rendered, response=entry["response"], max_uses=1))
    return rules
