"""HTTP query service: ingest a dataset, build engines, answer searches.

The service wraps the retrieval engines behind a small JSON-over-HTTP API:

* ``POST /v1/ingest``  — stage a dataset (CEMB + catalog JSONL, by path or
  inline payload); the response echoes the validation summary.
* ``POST /v1/build``   — build the baseline engine, the cascade engine, or
  both from the staged dataset, then atomically swap them into service.
  A cascade build needs a router: either a saved router file or training
  settings for a fresh one.
* ``POST /v1/search``  — normalize the submitted embedding and answer from
  the requested engine; results join each image's product id.
* ``GET /v1/healthz``  — 200 once the first build has completed, 503 before.
* ``GET /v1/stats``    — versions, staged/served counts, uptime.

Errors are always ``{"error": {"code", "message", "detail"}}``.  Bad
payloads and data errors are 400, a missing or unusable router is 422 (as
is a router that does not cover the catalog), conflicting mutations are
409, and searching before the first build is 503.

Concurrency: any number of searches may run at once; ingest and build are
serialized by a non-blocking lock, so a second mutation while one is in
flight is rejected with 409 rather than queued.  Builds happen off the
serving path and finish with a single atomic snapshot swap — a search
either sees the old engines or the new ones, never a mixture — and the
served ``build_version`` increases by one per successful build request.
"""

from __future__ import annotations

import dataclasses
import tempfile
import threading
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse

from . import __version__
from .cascade import (
    BaselineEngine,
    CascadeEngine,
    IndexKind,
    RetrievalConfig,
    build_baseline,
    build_cascade,
)
from .catalog import (
    Catalog,
    Domain,
    EmbeddingMatrix,
    ValidationSummary,
    load_catalog,
    load_embeddings,
    validate,
)
from .errors import CascadeSearchError, CoverageError
from .router import OracleRouter, TrainConfig, load_router, train
from .vecindex import HnswParams


class ApiError(Exception):
    """An error response: HTTP status plus the JSON error envelope."""

    def __init__(self, status: int, code: str, message: str, detail=None):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.detail = detail

    def body(self) -> dict:
        return {
            "error": {
                "code": self.code,
                "message": self.message,
                "detail": self.detail,
            }
        }


@dataclasses.dataclass(frozen=True)
class Snapshot:
    """The engines currently in service; replaced wholesale on build."""

    version: int
    baseline: BaselineEngine | None
    cascade: CascadeEngine | None

    @property
    def built(self) -> bool:
        return self.baseline is not None or self.cascade is not None


@dataclasses.dataclass(frozen=True)
class StagedDataset:
    catalog: Catalog
    embeddings: EmbeddingMatrix
    summary: ValidationSummary


class ServiceState:
    def __init__(self) -> None:
        self.started_at = time.monotonic()
        self.mutation_lock = threading.Lock()
        self.snapshot = Snapshot(version=0, baseline=None, cascade=None)
        self.staged: StagedDataset | None = None
        self.builds_completed = 0


def _data_error(exc: CascadeSearchError) -> ApiError:
    detail = {}
    for attr in ("missing_embeddings", "missing_catalog", "missing_labels"):
        value = getattr(exc, attr, None)
        if value:
            detail[attr] = list(value)
    return ApiError(
        status=400,
        code=type(exc).__name__,
        message=str(exc),
        detail=detail or None,
    )


def _require_str(body: dict, key: str) -> str:
    value = body.get(key)
    if not isinstance(value, str) or not value:
        raise ApiError(400, "invalid_request", f"{key!r} must be a non-empty string")
    return value


def _load_source(body: dict, kind: str, loader, suffix: str):
    """Load from ``<kind>_path`` or inline ``<kind>_data``."""
    path_key, data_key = f"{kind}_path", f"{kind}_data"
    if (path_key in body) == (data_key in body):
        raise ApiError(
            400,
            "invalid_request",
            f"provide exactly one of {path_key!r} or {data_key!r}",
        )
    if path_key in body:
        path = Path(_require_str(body, path_key))
        if not path.is_file():
            raise ApiError(400, "invalid_request", f"no such file: {path}")
        return loader(path)
    data = body[data_key]
    if isinstance(data, str):
        payload = data.encode("utf-8")
    else:
        raise ApiError(400, "invalid_request", f"{data_key!r} must be a string")
    if kind == "embeddings":
        import base64

        try:
            payload = base64.b64decode(data, validate=True)
        except Exception:
            raise ApiError(
                400, "invalid_request", f"{data_key!r} is not valid base64"
            ) from None
    with tempfile.NamedTemporaryFile(suffix=suffix) as handle:
        handle.write(payload)
        handle.flush()
        return loader(handle.name)


def _ingest(state: ServiceState, body: dict) -> dict:
    if not state.mutation_lock.acquire(blocking=False):
        raise ApiError(409, "build_in_progress", "another mutation is in flight")
    try:
        try:
            catalog = _load_source(body, "catalog", load_catalog, ".jsonl")
            embeddings = _load_source(body, "embeddings", load_embeddings, ".cemb")
            summary = validate(catalog, embeddings)
        except CascadeSearchError as exc:
            raise _data_error(exc) from exc
        state.staged = StagedDataset(catalog, embeddings, summary)
        return {"summary": summary.as_dict()}
    finally:
        state.mutation_lock.release()


def _resolve_router(state: ServiceState, body: dict, staged: StagedDataset):
    if "router_path" in body:
        path = Path(_require_str(body, "router_path"))
        if not path.is_file():
            raise ApiError(422, "router_missing", f"no such router file: {path}")
        try:
            router = load_router(path)
        except CascadeSearchError as exc:
            raise _data_error(exc) from exc
        if isinstance(router, OracleRouter):
            raise ApiError(
                422,
                "router_unusable",
                "oracle routers need per-query ground truth and cannot "
                "serve online searches",
            )
        return router
    if "train_router" in body:
        options = body["train_router"]
        if options is None:
            options = {}
        if not isinstance(options, dict):
            raise ApiError(400, "invalid_request", "'train_router' must be an object")
        try:
            config = TrainConfig(**options)
        except (TypeError, ValueError, CascadeSearchError) as exc:
            raise ApiError(
                400, "invalid_request", f"bad training settings: {exc}"
            ) from exc
        # train on every labeled row, both domains: served queries are
        # query-domain vectors, so the router must have seen that side
        normalized = staged.embeddings.normalized()
        rows = staged.catalog.images
        features = np.stack(
            [normalized.vector_for(img.image_id) for img in rows]
        )
        labels = [img.tlc_id for img in rows]
        try:
            router, _losses = train(features, labels, config)
        except CascadeSearchError as exc:
            raise _data_error(exc) from exc
        return router
    raise ApiError(
        422,
        "router_missing",
        "a cascade build needs 'router_path' or 'train_router'",
    )


def _build(state: ServiceState, body: dict) -> dict:
    if not state.mutation_lock.acquire(blocking=False):
        raise ApiError(409, "build_in_progress", "another mutation is in flight")
    try:
        staged = state.staged
        if staged is None:
            raise ApiError(400, "no_dataset", "ingest a dataset before building")
        mode = body.get("mode", "both")
        if mode not in ("baseline", "cascade", "both"):
            raise ApiError(
                400, "invalid_request", f"mode must be baseline|cascade|both, got {mode!r}"
            )
        try:
            index_kind = IndexKind(body.get("index_kind", "flat"))
        except ValueError:
            raise ApiError(
                400,
                "invalid_request",
                f"index_kind must be flat|hnsw, got {body.get('index_kind')!r}",
            ) from None
        hnsw_params = None
        if body.get("hnsw_params") is not None:
            if not isinstance(body["hnsw_params"], dict):
                raise ApiError(400, "invalid_request", "'hnsw_params' must be an object")
            try:
                hnsw_params = HnswParams(**body["hnsw_params"])
            except (TypeError, ValueError) as exc:
                raise ApiError(
                    400, "invalid_request", f"bad hnsw_params: {exc}"
                ) from exc

        previous = state.snapshot
        baseline = previous.baseline
        cascade = previous.cascade
        if mode in ("baseline", "both"):
            try:
                baseline = build_baseline(
                    staged.catalog, staged.embeddings, index_kind, hnsw_params
                )
            except CascadeSearchError as exc:
                raise _data_error(exc) from exc
        if mode in ("cascade", "both"):
            router = _resolve_router(state, body, staged)
            try:
                cascade = build_cascade(
                    staged.catalog, staged.embeddings, router, index_kind, hnsw_params
                )
            except CoverageError as exc:
                raise ApiError(
                    422,
                    "coverage_error",
                    str(exc),
                    detail={"missing_labels": list(exc.missing_labels)},
                ) from exc
            except CascadeSearchError as exc:
                raise _data_error(exc) from exc

        snapshot = Snapshot(
            version=previous.version + 1, baseline=baseline, cascade=cascade
        )
        state.snapshot = snapshot
        state.builds_completed += 1
        return {
            "build_version": snapshot.version,
            "mode": mode,
            "engines": _engine_summaries(snapshot),
        }
    finally:
        state.mutation_lock.release()


def _engine_summaries(snapshot: Snapshot) -> dict:
    out: dict = {"baseline": None, "cascade": None}
    if snapshot.baseline is not None:
        out["baseline"] = {
            "index_kind": snapshot.baseline.index_kind.value,
            "gallery_size": snapshot.baseline.gallery_size,
            "dataset_fingerprint": snapshot.baseline.dataset_fingerprint,
        }
    if snapshot.cascade is not None:
        out["cascade"] = {
            "index_kind": snapshot.cascade.index_kind.value,
            "gallery_size": snapshot.cascade.gallery_size,
            "dataset_fingerprint": snapshot.cascade.dataset_fingerprint,
            "partitions": {
                str(tlc): index.count
                for tlc, index in sorted(snapshot.cascade.partitions.items())
            },
        }
    return out


def _normalized_query(body: dict, dim: int) -> np.ndarray:
    embedding = body.get("embedding")
    if not isinstance(embedding, list) or not embedding:
        raise ApiError(400, "bad_vector", "'embedding' must be a non-empty array")
    try:
        vector = np.asarray(embedding, dtype=np.float64)
    except (TypeError, ValueError):
        raise ApiError(400, "bad_vector", "'embedding' must contain numbers") from None
    if vector.ndim != 1 or vector.shape[0] != dim:
        raise ApiError(
            400,
            "bad_vector",
            f"embedding length {vector.shape[0] if vector.ndim == 1 else '?'} "
            f"does not match engine dimension {dim}",
        )
    if not np.isfinite(vector).all():
        raise ApiError(400, "bad_vector", "embedding contains non-finite values")
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise ApiError(400, "bad_vector", "embedding is the zero vector")
    return (vector / norm).astype(np.float32)


def _search(state: ServiceState, body: dict) -> dict:
    snapshot = state.snapshot
    mode = body.get("mode", "cascade")
    if mode not in ("baseline", "cascade"):
        raise ApiError(
            400, "invalid_request", f"mode must be baseline|cascade, got {mode!r}"
        )
    engine = snapshot.baseline if mode == "baseline" else snapshot.cascade
    if engine is None:
        raise ApiError(503, "not_built", f"no {mode} engine has been built yet")
    query = _normalized_query(body, engine.dim)
    try:
        config = RetrievalConfig(
            k=body.get("k", 10),
            route_top_m=body.get("route_top_m", 1),
            ef_search=body.get("ef_search"),
        )
    except ValueError as exc:
        raise ApiError(400, "invalid_request", str(exc)) from exc
    try:
        outcome = engine.search(query, config)
    except ValueError as exc:
        raise ApiError(400, "invalid_request", str(exc)) from exc
    trace = outcome.trace
    return {
        "build_version": snapshot.version,
        "mode": mode,
        "results": [
            {
                "image_id": r.image_id,
                "product_id": engine.image_to_product[r.image_id],
                "score": r.score,
            }
            for r in outcome.results
        ],
        "trace": {
            "routed": [[tlc, prob] for tlc, prob in trace.routed],
            "route_ns": trace.route_ns,
            "search_ns": trace.search_ns,
            "merge_ns": trace.merge_ns,
            "total_ns": trace.total_ns,
            "all_partitions_empty": trace.all_partitions_empty,
        },
    }


def _healthz(state: ServiceState) -> dict:
    snapshot = state.snapshot
    if not snapshot.built:
        raise ApiError(503, "not_built", "no engine has been built yet")
    return {"status": "ok", "build_version": snapshot.version}


def _stats(state: ServiceState) -> dict:
    snapshot = state.snapshot
    return {
        "service_version": __version__,
        "uptime_seconds": round(time.monotonic() - state.started_at, 3),
        "build_version": snapshot.version,
        "builds_completed": state.builds_completed,
        "staged": state.staged.summary.as_dict() if state.staged else None,
        "engines": _engine_summaries(snapshot),
    }


def create_app() -> FastAPI:
    """Build a fresh service instance with its own isolated state."""
    state = ServiceState()
    app = FastAPI(title="cascadesearch service", version=__version__)
    app.state.service = state

    @app.exception_handler(ApiError)
    async def _api_error(_request: Request, exc: ApiError) -> JSONResponse:
        return JSONResponse(status_code=exc.status, content=exc.body())

    async def _json_body(request: Request) -> dict:
        try:
            body = await request.json()
        except Exception:
            raise ApiError(400, "invalid_request", "request body must be JSON") from None
        if not isinstance(body, dict):
            raise ApiError(400, "invalid_request", "request body must be a JSON object")
        return body

    @app.post("/v1/ingest")
    async def ingest(request: Request):
        return await run_in_threadpool(_ingest, state, await _json_body(request))

    @app.post("/v1/build")
    async def build(request: Request):
        return await run_in_threadpool(_build, state, await _json_body(request))

    @app.post("/v1/search")
    async def search(request: Request):
        return await run_in_threadpool(_search, state, await _json_body(request))

    @app.get("/v1/healthz")
    async def healthz():
        return _healthz(state)

    @app.get("/v1/stats")
    async def stats():
        return _stats(state)

    return app
