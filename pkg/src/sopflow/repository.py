"""Persistent stores for collaboration cases and failure experiences.

Retrieval is a linear scan (stores stay small, well under a hundred entries),
scored by a weighted blend of query similarity and need similarity. Ties
break by insertion order so results are reproducible. Each store is a
directory of one JSON file per entry plus a manifest holding insertion order
and the embedding dimension; embeddings are cached in the entries and
recomputed when the configured dimension changes.
"""

from __future__ import annotations

import datetime as _dt
import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

from filelock import FileLock

from .domain import (
    NeedAnalysis,
    PEPRecord,
    Query,
    SOPCase,
    ValidationFailed,
    canonical_json,
    validate_sop,
)
from .gateway import ModelGateway, cosine

DEFAULT_LAMBDA = 0.3
DEFAULT_K = 2
DEFAULT_PEP_K = 2


class StorageError(Exception):
    pass


class LambdaOutOfRange(ValueError):
    pass


class RetrievalMode(str, Enum):
    HYBRID = "hybrid"
    QUERY_ONLY = "query_only"
    NEED_ONLY = "need_only"


@dataclass(frozen=True)
class RetrievalConfig:
    lam: float = DEFAULT_LAMBDA
    k: int = DEFAULT_K
    mode: RetrievalMode = RetrievalMode.HYBRID

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise LambdaOutOfRange(f"lambda must lie in [0, 1], got {self.lam}")
        if self.k < 1:
            raise ValueError("k must be a positive integer")


@dataclass(frozen=True)
class ScoredCase:
    case: SOPCase
    score: float
    sim_q: float
    sim_n: float


def hybrid_score(sim_q: float, sim_n: float, lam: float) -> float:
    """Weighted blend of external query similarity and internal need similarity."""
    if not 0.0 <= lam <= 1.0:
        raise LambdaOutOfRange(f"lambda must lie in [0, 1], got {lam}")
    return lam * sim_q + (1.0 - lam) * sim_n


class _Store:
    """Directory-backed ordered store; ``root=None`` keeps entries in memory."""

    prefix = "entry"

    def __init__(self, root: str | Path | None):
        self.root = Path(root) if root is not None else None
        self._order: list[str] = []
        self._entries: dict[str, dict] = {}
        self._dimension: int | None = None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._load()

    # -- persistence ---------------------------------------------------------

    def _manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def _load(self) -> None:
        manifest = self._manifest_path()
        if not manifest.exists():
            return
        try:
            data = json.loads(manifest.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise StorageError(f"unreadable manifest at {manifest}: {exc}")
        self._dimension = data.get("embedding_dimension")
        for entry_id in data.get("order", []):
            path = self.root / f"{entry_id}.json"
            try:
                self._entries[entry_id] = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise StorageError(f"unreadable store entry {path}: {exc}")
            self._order.append(entry_id)

    def _persist_entry(self, entry_id: str, payload: dict) -> None:
        if self.root is None:
            return
        lock = FileLock(str(self.root / ".lock"))
        with lock:
            tmp = self.root / f".{entry_id}.tmp"
            tmp.write_text(canonical_json(payload), encoding="utf-8")
            tmp.replace(self.root / f"{entry_id}.json")
            self._write_manifest()

    def _write_manifest(self) -> None:
        tmp = self.root / ".manifest.tmp"
        tmp.write_text(
            canonical_json({"embedding_dimension": self._dimension, "order": self._order}),
            encoding="utf-8",
        )
        tmp.replace(self._manifest_path())

    def _next_id(self) -> str:
        return f"{self.prefix}-{len(self._order) + 1:06d}"

    def __len__(self) -> int:
        return len(self._order)

    def ids(self) -> list[str]:
        return list(self._order)


class CaseStore(_Store):
    """The SOP repository: validated cases with cached unit-norm embeddings."""

    prefix = "sop"

    def __init__(self, root: str | Path | None, gateway: ModelGateway, tool_names: Sequence[str] = ()):
        self.gateway = gateway
        self.tool_names = set(tool_names)
        super().__init__(root)
        self._refresh_dimension()

    def _refresh_dimension(self) -> None:
        # A dimension change invalidates every cached vector; recompute and
        # rewrite so scores never mix embedding spaces.
        dim = self.gateway.embed_dim
        if self._dimension == dim:
            return
        self._dimension = dim
        for entry_id in self._order:
            case = SOPCase.from_dict(self._entries[entry_id])
            case = self._with_embeddings(case, force=True)
            self._entries[entry_id] = case.to_dict()
            self._persist_entry(entry_id, self._entries[entry_id])
        if self.root is not None:
            lock = FileLock(str(self.root / ".lock"))
            with lock:
                self._write_manifest()

    def _with_embeddings(self, case: SOPCase, force: bool = False) -> SOPCase:
        qe = case.query_embedding
        ne = case.need_embedding
        if force or qe is None or len(qe) != self.gateway.embed_dim:
            qe = tuple(self.gateway.embed(case.query.text))
        if force or ne is None or len(ne) != self.gateway.embed_dim:
            ne = tuple(self.gateway.embed(case.need.text))
        return replace(case, query_embedding=qe, need_embedding=ne)

    def add_case(self, case: SOPCase) -> str:
        diags = validate_sop(case.sop, self.tool_names)
        if diags:
            raise ValidationFailed(diags)
        entry_id = case.id or self._next_id()
        if entry_id in self._entries:
            raise StorageError(f"case id {entry_id!r} already stored")
        case = self._with_embeddings(case)
        if case.created_at is None:
            case = replace(case, created_at=_dt.datetime.now(_dt.timezone.utc).isoformat())
        case = replace(case, id=entry_id)
        payload = case.to_dict()
        self._entries[entry_id] = payload
        self._order.append(entry_id)
        try:
            self._persist_entry(entry_id, payload)
        except OSError as exc:
            self._order.pop()
            del self._entries[entry_id]
            raise StorageError(str(exc))
        return entry_id

    def get(self, entry_id: str) -> SOPCase:
        if entry_id not in self._entries:
            raise StorageError(f"no case with id {entry_id!r}")
        return SOPCase.from_dict(self._entries[entry_id])

    def cases(self) -> list[SOPCase]:
        return [SOPCase.from_dict(self._entries[i]) for i in self._order]

    def retrieve(self, query: Query, need: NeedAnalysis, cfg: RetrievalConfig) -> list[ScoredCase]:
        """Top-K cases by the blended similarity, descending, insertion-stable.

        An empty repository yields an empty list so instantiation can fall
        back to the no-exemplars path. An empty need analysis forces pure
        query similarity.
        """
        if not self._order:
            return []
        mode = cfg.mode
        if not need.text:
            mode = RetrievalMode.QUERY_ONLY
        if mode is RetrievalMode.QUERY_ONLY:
            lam = 1.0
        elif mode is RetrievalMode.NEED_ONLY:
            lam = 0.0
        else:
            lam = cfg.lam

        query_vec = self.gateway.embed(query.text)
        need_vec = self.gateway.embed(need.text) if need.text else [0.0] * self.gateway.embed_dim

        scored: list[tuple[float, int, ScoredCase]] = []
        for position, entry_id in enumerate(self._order):
            case = SOPCase.from_dict(self._entries[entry_id])
            sim_q = cosine(query_vec, case.query_embedding)
            sim_n = cosine(need_vec, case.need_embedding) if need.text else 0.0
            score = hybrid_score(sim_q, sim_n, lam)
            scored.append((score, position, ScoredCase(case, score, sim_q, sim_n)))
        scored.sort(key=lambda item: (-item[0], item[1]))
        return [item[2] for item in scored[: cfg.k]]


class PEPStore(_Store):
    """Pool of failure records, looked up by query similarity."""

    prefix = "pep"

    def __init__(self, root: str | Path | None, gateway: ModelGateway):
        self.gateway = gateway
        super().__init__(root)
        if self._dimension != gateway.embed_dim:
            self._dimension = gateway.embed_dim
            for entry_id in self._order:
                record = PEPRecord.from_dict(self._entries[entry_id])
                record = replace(record, query_embedding=tuple(gateway.embed(record.query.text)))
                self._entries[entry_id] = record.to_dict()
                self._persist_entry(entry_id, self._entries[entry_id])

    def add(self, record: PEPRecord) -> str:
        entry_id = record.id or self._next_id()
        if entry_id in self._entries:
            raise StorageError(f"record id {entry_id!r} already stored")
        if record.query_embedding is None or len(record.query_embedding) != self.gateway.embed_dim:
            record = replace(record, query_embedding=tuple(self.gateway.embed(record.query.text)))
        record = replace(record, id=entry_id)
        payload = record.to_dict()
        self._entries[entry_id] = payload
        self._order.append(entry_id)
        try:
            self._persist_entry(entry_id, payload)
        except OSError as exc:
            self._order.pop()
            del self._entries[entry_id]
            raise StorageError(str(exc))
        return entry_id

    def get(self, entry_id: str) -> PEPRecord:
        if entry_id not in self._entries:
            raise StorageError(f"no record with id {entry_id!r}")
        return PEPRecord.from_dict(self._entries[entry_id])

    def records(self) -> list[PEPRecord]:
        return [PEPRecord.from_dict(self._entries[i]) for i in self._order]

    def lookup(self, query: Query, k: int = DEFAULT_PEP_K) -> list[PEPRecord]:
        if not self._order or k < 1:
            return []
        query_vec = self.gateway.embed(query.text)
        scored: list[tuple[float, int, PEPRecord]] = []
        for position, entry_id in enumerate(self._order):
            record = PEPRecord.from_dict(self._entries[entry_id])
            sim = cosine(query_vec, record.query_embedding)
            scored.append((sim, position, record))
        scored.sort(key=lambda item: (-item[0], item[1]))
        return [item[2] for item in scored[:k]]


def open_stores(
    root: str | Path, gateway: ModelGateway, tool_names: Sequence[str] = ()
) -> tuple[CaseStore, PEPStore]:
    root = Path(root)
    return CaseStore(root / "sop", gateway, tool_names), PEPStore(root / "pep", gateway)
