"""HTTP JSON service for interactive image suggestion.

Routes: GET /health, GET /models, POST /search, POST /entities and
POST /admin/publish.  Published snapshots are immutable; publishing
builds everything off-line and swaps the registry pointer atomically,
so concurrent searches always see one consistent snapshot.  Errors are
JSON objects {"code", "message"}.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .autodiff import LeafCache, no_grad
from .corpus import FeatureStore, load_corpus
from .fusion import SOURCES
from .model import RetrievalModel
from .retrieval import EncodingIndex, attention_scores, build_index, search, suggest_entities
from .training import build_model_from_checkpoint, load_checkpoint

__all__ = ["ModelSnapshot", "SnapshotRegistry", "create_app", "build_snapshot"]

DEFAULT_K = 9
MAX_K = 100


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass(frozen=True)
class ModelSnapshot:
    """One published model plus its image store; never mutated."""

    snapshot_id: str
    model: RetrievalModel
    index: EncodingIndex
    image_urls: dict[str, str]
    entity_vocabulary: tuple[str, ...]

    @property
    def languages(self) -> tuple[str, ...]:
        return tuple(self.model.cfg.languages)

    @property
    def sources(self) -> tuple[str, ...]:
        return tuple(self.model.cfg.sources)


def build_snapshot(
    checkpoint_path, corpus_path, features_path, snapshot_id: str
) -> ModelSnapshot:
    """Load a checkpoint and corpus and pre-encode the image collection."""
    ckpt = load_checkpoint(checkpoint_path)
    model = build_model_from_checkpoint(ckpt)
    samples = load_corpus(corpus_path)
    store = FeatureStore.from_file(features_path)
    entities_by_image: dict[str, tuple[str, ...]] = {}
    urls: dict[str, str] = {}
    for rec in samples:
        if rec.image_id in store:
            entities_by_image.setdefault(rec.image_id, rec.entities)
            if rec.image_url:
                urls.setdefault(rec.image_id, rec.image_url)
    ids = list(store.ids)
    with no_grad():
        ctx = LeafCache()
        encoded = model.encode_image_batch(store.stack(ids), ctx).value
    index = build_index(ids, encoded, entities_by_image)
    vocab = sorted({e for ents in entities_by_image.values() for e in ents})
    return ModelSnapshot(snapshot_id, model, index, urls, tuple(vocab))


class SnapshotRegistry:
    """Immutable snapshots behind an atomically swapped pointer."""

    def __init__(self):
        self._lock = threading.Lock()
        self._snapshots: dict[str, ModelSnapshot] = {}
        self._default: str | None = None
        self._counter = itertools.count(1)

    def next_id(self) -> str:
        return f"s{next(self._counter):04d}"

    def publish(self, snapshot: ModelSnapshot, make_default: bool = True) -> str:
        with self._lock:
            if snapshot.snapshot_id in self._snapshots:
                raise ServiceError(
                    400, "bad_request", f"snapshot '{snapshot.snapshot_id}' already exists"
                )
            mapping = dict(self._snapshots)
            mapping[snapshot.snapshot_id] = snapshot
            self._snapshots = mapping
            if make_default or self._default is None:
                self._default = snapshot.snapshot_id
        return snapshot.snapshot_id

    def get(self, snapshot_id: str | None = None) -> ModelSnapshot:
        snapshots = self._snapshots
        if snapshot_id is None:
            snapshot_id = self._default
        if snapshot_id is None or snapshot_id not in snapshots:
            raise ServiceError(404, "unknown_model", f"no such model snapshot: {snapshot_id!r}")
        return snapshots[snapshot_id]

    def list(self) -> list[dict]:
        snapshots = self._snapshots
        default = self._default
        return [
            {
                "snapshot": sid,
                "default": sid == default,
                "languages": list(snap.languages),
                "sources": list(snap.sources),
                "images": len(snap.index),
            }
            for sid, snap in sorted(snapshots.items())
        ]


def _require_str(payload: dict, key: str, default: str | None = None) -> str | None:
    val = payload.get(key, default)
    if val is not None and not isinstance(val, str):
        raise ServiceError(400, "bad_request", f"field '{key}' must be a string")
    return val


def _texts_from(payload: dict) -> dict[str, str]:
    return {src: _require_str(payload, src, "") or "" for src in SOURCES}


def create_app(registry: SnapshotRegistry) -> FastAPI:
    app = FastAPI(title="nir", docs_url=None, redoc_url=None)

    @app.exception_handler(ServiceError)
    async def _service_error(_req, exc: ServiceError):
        return JSONResponse(
            status_code=exc.status, content={"code": exc.code, "message": exc.message}
        )

    async def _json_body(request: Request) -> dict:
        try:
            payload = await request.json()
        except Exception:
            raise ServiceError(400, "bad_request", "request body must be JSON") from None
        if not isinstance(payload, dict):
            raise ServiceError(400, "bad_request", "request body must be a JSON object")
        return payload

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/models")
    def models():
        return {"models": registry.list()}

    @app.post("/search")
    async def search_route(request: Request):
        payload = await _json_body(request)
        snap = registry.get(_require_str(payload, "model"))
        lang = _require_str(payload, "lang")
        if lang is None:
            raise ServiceError(400, "bad_request", "field 'lang' is required")
        if lang not in snap.languages:
            raise ServiceError(400, "unknown_language", f"model does not serve {lang!r}")
        k = payload.get("k", DEFAULT_K)
        if not isinstance(k, int) or isinstance(k, bool) or not 1 <= k <= MAX_K:
            raise ServiceError(400, "bad_request", f"k must be an integer in [1, {MAX_K}]")
        entities = payload.get("entities", [])
        if not isinstance(entities, list) or any(not isinstance(e, str) for e in entities):
            raise ServiceError(400, "bad_request", "entities must be a list of strings")
        texts = _texts_from(payload)
        if not any(t.strip() for t in texts.values()):
            raise ServiceError(400, "empty_query", "all four text sources are empty")
        model = snap.model
        with no_grad():
            ctx = LeafCache()
            encoding, maps = model.encode_texts_tensor(texts, lang, ctx)
        query = encoding.value[0]
        if not np.any(query):
            raise ServiceError(400, "empty_query", "the query encodes to the zero vector")
        try:
            hits = search(snap.index, query, k, entities)
        except ValueError as e:
            raise ServiceError(400, "bad_request", str(e)) from None
        attention = {}
        for src in model.cfg.sources:
            tokens = model.source_tokens(texts, src)
            scores = attention_scores(maps[src])
            attention[src] = [
                {"token": t, "score": float(s)} for t, s in zip(tokens, scores)
            ]
        results = []
        for hit in hits:
            row = {"image_id": hit.id, "score": hit.score, "entities": list(hit.entities)}
            url = snap.image_urls.get(hit.id)
            if url:
                row["image_url"] = url
            results.append(row)
        return {"results": results, "attention": attention, "snapshot": snap.snapshot_id}

    @app.post("/entities")
    async def entities_route(request: Request):
        payload = await _json_body(request)
        snap = registry.get(_require_str(payload, "model"))
        texts = _texts_from(payload)
        found = suggest_entities(texts, snap.entity_vocabulary)
        return {"entities": found, "snapshot": snap.snapshot_id}

    @app.post("/admin/publish")
    async def publish_route(request: Request):
        payload = await _json_body(request)
        for key in ("checkpoint", "corpus", "features"):
            if not isinstance(payload.get(key), str):
                raise ServiceError(400, "bad_request", f"field '{key}' (path) is required")
        snapshot_id = _require_str(payload, "snapshot") or registry.next_id()
        try:
            snapshot = build_snapshot(
                payload["checkpoint"], payload["corpus"], payload["features"], snapshot_id
            )
        except FileNotFoundError as e:
            raise ServiceError(400, "bad_request", f"missing file: {e.filename}") from None
        except ValueError as e:
            raise ServiceError(400, "bad_request", str(e)) from None
        registry.publish(snapshot)
        return {"snapshot": snapshot_id, "default": True}

    return app
