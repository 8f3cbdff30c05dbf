"""Retrieval engines: classifier-routed partition search and a global baseline.

Two engine flavors answer top-k similarity queries over a catalog gallery:

* ``BaselineEngine`` holds a single vector index over every catalog-domain
  image.
* ``CascadeEngine`` holds one index per top-level category (TLC) partition
  plus a router.  A query is first classified; only the predicted partitions
  are searched, and their per-partition results are merged by score.

Both engines normalize embeddings once at build time, remember the dataset
fingerprint of their inputs (so downstream comparisons can refuse to compare
engines built from different data), and expose the gallery metadata needed
for evaluation: which product each image belongs to and how many
catalog-domain images each product has.

Engines are immutable once built.  Every build mints a fresh
``build_version`` from a process-wide counter, so a server can swap a new
engine in atomically while in-flight queries finish against the engine they
started with.

Stage timings in a :class:`SearchTrace` come from ``time.perf_counter_ns``
stamps taken at the stage boundaries (route, then search, then merge), so
the three stage durations always sum exactly to the reported total.

On disk an engine is a directory containing ``manifest.json`` (engine kind,
index kind, dimension, build version, dataset fingerprint, and a file map),
``catalog.jsonl``, ``router.json`` for cascade engines, and one ``.cidx``
file per index.
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
import json
import time
from collections import Counter
from pathlib import Path

import numpy as np

from .catalog import (
    Catalog,
    Domain,
    EmbeddingMatrix,
    dataset_fingerprint,
    load_catalog,
    partition_by_tlc,
    save_catalog,
    validate,
)
from .errors import CorruptionError, CoverageError, FormatError
from .router import OracleRouter, SoftmaxRouter, load_router, save_router
from .vecindex import (
    FlatIndex,
    HnswIndex,
    HnswParams,
    SearchResult,
    deserialize_index,
    serialize_index,
)

_MANIFEST_NAME = "manifest.json"
_MANIFEST_FORMAT = "cascadesearch-engine"
_MANIFEST_VERSION = 1

_build_counter = itertools.count(1)


class IndexKind(str, enum.Enum):
    """Which vector index implementation an engine is built on."""

    FLAT = "flat"
    HNSW = "hnsw"


def _check_positive(name: str, value: int) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")


@dataclasses.dataclass(frozen=True)
class RetrievalConfig:
    """Per-query knobs: result count, routing fan-out, and HNSW beam width.

    ``route_top_m`` is how many predicted categories a cascade engine
    searches (baseline engines ignore it); ``ef_search`` overrides the HNSW
    beam width and is ignored by flat indexes.
    """

    k: int
    route_top_m: int = 1
    ef_search: int | None = None

    def __post_init__(self) -> None:
        _check_positive("k", self.k)
        _check_positive("route_top_m", self.route_top_m)
        if self.ef_search is not None:
            _check_positive("ef_search", self.ef_search)


@dataclasses.dataclass(frozen=True)
class SearchTrace:
    """Routing decisions and stage durations for one query.

    ``routed`` lists ``(tlc_id, probability)`` pairs in routing order; it is
    empty for baseline searches.  Durations are nanoseconds; ``route_ns +
    search_ns + merge_ns == total_ns`` by construction.
    ``all_partitions_empty`` is set when every routed partition was missing
    or empty, which yields an empty (but valid) result.
    """

    routed: tuple[tuple[int, float], ...]
    route_ns: int
    search_ns: int
    merge_ns: int
    total_ns: int
    all_partitions_empty: bool = False


@dataclasses.dataclass(frozen=True)
class RetrievalOutcome:
    """Merged search results plus the trace that produced them."""

    results: tuple[SearchResult, ...]
    trace: SearchTrace


class _EngineBase:
    def __init__(
        self,
        catalog: Catalog,
        dim: int,
        index_kind: IndexKind,
        fingerprint: str,
        build_version: int,
    ) -> None:
        self.catalog = catalog
        self.dim = int(dim)
        self.index_kind = IndexKind(index_kind)
        self.dataset_fingerprint = fingerprint
        self.build_version = int(build_version)
        self.image_to_product = catalog.image_to_product
        self.product_catalog_image_count: dict[int, int] = dict(
            Counter(
                img.product_id
                for img in catalog.images
                if img.domain is Domain.CATALOG
            )
        )

    @property
    def gallery_size(self) -> int:
        raise NotImplementedError


class BaselineEngine(_EngineBase):
    """One global index over the whole catalog-domain gallery."""

    def __init__(
        self,
        catalog: Catalog,
        dim: int,
        index_kind: IndexKind,
        fingerprint: str,
        build_version: int,
        global_index: FlatIndex | HnswIndex,
    ) -> None:
        super().__init__(catalog, dim, index_kind, fingerprint, build_version)
        self.global_index = global_index

    @property
    def gallery_size(self) -> int:
        return self.global_index.count

    def search(self, query, config: RetrievalConfig) -> RetrievalOutcome:
        return baseline_search(self, query, config)


class CascadeEngine(_EngineBase):
    """Router plus one index per non-empty TLC partition of the gallery."""

    def __init__(
        self,
        catalog: Catalog,
        dim: int,
        index_kind: IndexKind,
        fingerprint: str,
        build_version: int,
        router: SoftmaxRouter | OracleRouter,
        partitions: dict[int, FlatIndex | HnswIndex],
    ) -> None:
        super().__init__(catalog, dim, index_kind, fingerprint, build_version)
        self.router = router
        self.partitions = dict(partitions)

    @property
    def gallery_size(self) -> int:
        return sum(index.count for index in self.partitions.values())

    def search(
        self, query, config: RetrievalConfig, true_tlc: int | None = None
    ) -> RetrievalOutcome:
        return cascade_search(self, query, config, true_tlc=true_tlc)


def _build_index(
    index_kind: IndexKind,
    dim: int,
    ids: np.ndarray,
    vectors: np.ndarray,
    hnsw_params: HnswParams | None,
) -> FlatIndex | HnswIndex:
    if index_kind is IndexKind.FLAT:
        return FlatIndex(dim=dim, ids=ids, vectors=vectors)
    return HnswIndex.build(
        dim=dim, ids=ids, vectors=vectors, params=hnsw_params or HnswParams()
    )


def build_baseline(
    catalog: Catalog,
    embeddings: EmbeddingMatrix,
    index_kind: IndexKind = IndexKind.FLAT,
    hnsw_params: HnswParams | None = None,
) -> BaselineEngine:
    """Build the global single-index engine over all catalog-domain images."""
    validate(catalog, embeddings)
    index_kind = IndexKind(index_kind)
    fingerprint = dataset_fingerprint(catalog, embeddings)
    normalized = embeddings.normalized()
    gallery_ids = [
        img.image_id for img in catalog.images if img.domain is Domain.CATALOG
    ]
    subset = normalized.subset(gallery_ids)
    index = _build_index(
        index_kind, embeddings.dim, subset.ids, subset.vectors, hnsw_params
    )
    return BaselineEngine(
        catalog=catalog,
        dim=embeddings.dim,
        index_kind=index_kind,
        fingerprint=fingerprint,
        build_version=next(_build_counter),
        global_index=index,
    )


def build_cascade(
    catalog: Catalog,
    embeddings: EmbeddingMatrix,
    router: SoftmaxRouter | OracleRouter,
    index_kind: IndexKind = IndexKind.FLAT,
    hnsw_params: HnswParams | None = None,
) -> CascadeEngine:
    """Build the routed engine: one index per TLC partition of the gallery.

    The router must know every TLC that appears in the catalog; otherwise a
    :class:`CoverageError` lists the missing labels.
    """
    validate(catalog, embeddings)
    index_kind = IndexKind(index_kind)
    catalog_tlcs = {img.tlc_id for img in catalog.images}
    missing = sorted(catalog_tlcs - set(router.class_labels))
    if missing:
        raise CoverageError(
            f"router does not cover {len(missing)} catalog TLC label(s)",
            missing_labels=tuple(missing),
        )
    fingerprint = dataset_fingerprint(catalog, embeddings)
    normalized = embeddings.normalized()
    partitions: dict[int, FlatIndex | HnswIndex] = {}
    for tlc_id, image_ids in sorted(
        partition_by_tlc(catalog, Domain.CATALOG).items()
    ):
        subset = normalized.subset(image_ids)
        partitions[tlc_id] = _build_index(
            index_kind, embeddings.dim, subset.ids, subset.vectors, hnsw_params
        )
    return CascadeEngine(
        catalog=catalog,
        dim=embeddings.dim,
        index_kind=index_kind,
        fingerprint=fingerprint,
        build_version=next(_build_counter),
        router=router,
        partitions=partitions,
    )


def _search_one(
    index: FlatIndex | HnswIndex, query, config: RetrievalConfig
) -> list[SearchResult]:
    if isinstance(index, HnswIndex):
        return index.search(query, config.k, ef_search=config.ef_search)
    return index.search(query, config.k)


def _merge(collected: list[SearchResult], k: int) -> tuple[SearchResult, ...]:
    collected.sort(key=lambda r: (-r.score, r.image_id))
    return tuple(collected[:k])


def cascade_search(
    engine: CascadeEngine,
    query,
    config: RetrievalConfig,
    true_tlc: int | None = None,
) -> RetrievalOutcome:
    """Classify the query, search the predicted partitions, merge by score.

    ``true_tlc`` is forwarded to the router and is only consulted by oracle
    routers; trained routers ignore it.  Routed categories with no partition
    (no catalog images) are skipped; if every routed category is empty the
    outcome is an empty result with ``all_partitions_empty`` set.
    """
    m = min(config.route_top_m, len(engine.router.class_labels))
    t0 = time.perf_counter_ns()
    routed = engine.router.route(query, m, true_tlc=true_tlc)
    t1 = time.perf_counter_ns()
    collected: list[SearchResult] = []
    searched_any = False
    for tlc_id, _prob in routed:
        index = engine.partitions.get(tlc_id)
        if index is None or index.count == 0:
            continue
        searched_any = True
        collected.extend(_search_one(index, query, config))
    t2 = time.perf_counter_ns()
    results = _merge(collected, config.k)
    t3 = time.perf_counter_ns()
    trace = SearchTrace(
        routed=tuple((int(t), float(p)) for t, p in routed),
        route_ns=t1 - t0,
        search_ns=t2 - t1,
        merge_ns=t3 - t2,
        total_ns=t3 - t0,
        all_partitions_empty=not searched_any,
    )
    return RetrievalOutcome(results=results, trace=trace)


def baseline_search(
    engine: BaselineEngine, query, config: RetrievalConfig
) -> RetrievalOutcome:
    """Search the global index; the trace reports zero routing time."""
    t0 = time.perf_counter_ns()
    collected = _search_one(engine.global_index, query, config)
    t1 = time.perf_counter_ns()
    results = _merge(collected, config.k)
    t2 = time.perf_counter_ns()
    trace = SearchTrace(
        routed=(),
        route_ns=0,
        search_ns=t1 - t0,
        merge_ns=t2 - t1,
        total_ns=t2 - t0,
        all_partitions_empty=engine.global_index.count == 0,
    )
    return RetrievalOutcome(results=results, trace=trace)


def _partition_file_name(tlc_id: int) -> str:
    return f"partition_{tlc_id:05d}.cidx"


def save_engine(engine: BaselineEngine | CascadeEngine, directory) -> None:
    """Write an engine directory: manifest, catalog, router, index files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_catalog(engine.catalog, directory / "catalog.jsonl")
    manifest: dict = {
        "format": _MANIFEST_FORMAT,
        "version": _MANIFEST_VERSION,
        "index_kind": engine.index_kind.value,
        "dim": engine.dim,
        "build_version": engine.build_version,
        "dataset_fingerprint": engine.dataset_fingerprint,
        "catalog": "catalog.jsonl",
    }
    if isinstance(engine, CascadeEngine):
        manifest["engine_kind"] = "cascade"
        manifest["router"] = "router.json"
        save_router(engine.router, directory / "router.json")
        manifest["partitions"] = {
            str(tlc_id): _partition_file_name(tlc_id)
            for tlc_id in sorted(engine.partitions)
        }
        for tlc_id, index in engine.partitions.items():
            serialize_index(index, directory / _partition_file_name(tlc_id))
    else:
        manifest["engine_kind"] = "baseline"
        manifest["global_index"] = "global.cidx"
        serialize_index(engine.global_index, directory / "global.cidx")
    manifest_path = directory / _MANIFEST_NAME
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _manifest_file(directory: Path, manifest: dict, key: str) -> Path:
    name = manifest.get(key)
    if not isinstance(name, str) or not name:
        raise FormatError(f"engine manifest is missing the {key!r} entry")
    path = directory / name
    if not path.is_file():
        raise FormatError(f"engine manifest references a missing file: {name}")
    return path


def load_engine(directory) -> BaselineEngine | CascadeEngine:
    """Load an engine directory written by :func:`save_engine`.

    The stored ``build_version`` is restored as-is.  Index files whose
    contents disagree with the catalog (wrong partition sizes or dimension)
    raise :class:`CorruptionError`.
    """
    directory = Path(directory)
    manifest_path = directory / _MANIFEST_NAME
    if not manifest_path.is_file():
        raise FormatError(f"no engine manifest found in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"engine manifest is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != _MANIFEST_FORMAT:
        raise FormatError("not an engine manifest")
    if manifest.get("version") != _MANIFEST_VERSION:
        raise FormatError(
            f"unsupported engine manifest version {manifest.get('version')!r}"
        )
    try:
        index_kind = IndexKind(manifest.get("index_kind"))
    except ValueError:
        raise FormatError(
            f"unknown index kind {manifest.get('index_kind')!r}"
        ) from None
    dim = manifest.get("dim")
    build_version = manifest.get("build_version")
    fingerprint = manifest.get("dataset_fingerprint")
    if (
        not isinstance(dim, int)
        or not isinstance(build_version, int)
        or not isinstance(fingerprint, str)
    ):
        raise FormatError("engine manifest has malformed metadata fields")
    catalog = load_catalog(_manifest_file(directory, manifest, "catalog"))
    engine_kind = manifest.get("engine_kind")
    if engine_kind == "baseline":
        index = deserialize_index(_manifest_file(directory, manifest, "global_index"))
        gallery = {
            img.image_id for img in catalog.images if img.domain is Domain.CATALOG
        }
        if index.dim != dim or {int(i) for i in index.ids} != gallery:
            raise CorruptionError(
                "global index does not match the catalog it was saved with"
            )
        return BaselineEngine(
            catalog=catalog,
            dim=dim,
            index_kind=index_kind,
            fingerprint=fingerprint,
            build_version=build_version,
            global_index=index,
        )
    if engine_kind != "cascade":
        raise FormatError(f"unknown engine kind {engine_kind!r}")
    router = load_router(_manifest_file(directory, manifest, "router"))
    entries = manifest.get("partitions")
    if not isinstance(entries, dict):
        raise FormatError("engine manifest is missing the 'partitions' entry")
    expected = partition_by_tlc(catalog, Domain.CATALOG)
    partitions: dict[int, FlatIndex | HnswIndex] = {}
    for key, name in entries.items():
        try:
            tlc_id = int(key)
        except ValueError:
            raise FormatError(f"non-integer partition key {key!r}") from None
        path = directory / str(name)
        if not path.is_file():
            raise FormatError(f"engine manifest references a missing file: {name}")
        index = deserialize_index(path)
        if index.dim != dim or {int(i) for i in index.ids} != set(
            expected.get(tlc_id, [])
        ):
            raise CorruptionError(
                f"partition index for TLC {tlc_id} does not match the catalog"
            )
        partitions[tlc_id] = index
    if set(partitions) != set(expected):
        raise CorruptionError(
            "stored partitions do not cover the catalog's TLC set"
        )
    return CascadeEngine(
        catalog=catalog,
        dim=dim,
        index_kind=index_kind,
        fingerprint=fingerprint,
        build_version=build_version,
        router=router,
        partitions=partitions,
    )
