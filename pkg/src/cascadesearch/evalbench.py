"""Retrieval-quality metrics, latency measurement, and engine comparison.

:func:`evaluate` runs a query set through an engine and produces a
:class:`MetricsReport` with the fixed metric basket — recall@1, recall@5,
recall@10, mAP@10, and MRR — plus routing accuracy for cascade engines and a
latency summary.  Relevance is judged at product granularity: a retrieved
image is relevant iff it belongs to the query's ground-truth product.

Latency is measured single-threaded on a monotonic clock after a warmup,
and raw per-stage samples are kept on the report so percentiles can be
recomputed and exported.  Percentiles use the nearest-rank method on the
raw samples (no interpolation); the headline figure is the p50 of per-query
total time.

:func:`compare` turns a baseline report and a cascade report into relative
improvement percentages per metric, their mean, and the p50 latency delta.
Reports are only comparable when they carry the same dataset fingerprint
and the same ``k``; a baseline metric of zero makes that metric's
improvement undefined, excluded from the mean and flagged.

All floats carried by reports are pre-rounded to 9 significant digits, so
rendering to JSON and parsing back yields a value-identical report.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from typing import NamedTuple

import numpy as np

from .cascade import (
    BaselineEngine,
    CascadeEngine,
    RetrievalConfig,
)
from .catalog import Domain
from .errors import (
    FormatError,
    GroundTruthError,
    IncomparableError,
    MeasurementError,
)

QUALITY_METRICS = ("recall_at_1", "recall_at_5", "recall_at_10", "map_at_10", "mrr")

_STAGES = ("route", "search", "merge", "total")


def _round9(value: float) -> float:
    """Fixed report formatting: 9 significant digits."""
    return float(f"{float(value):.9g}")


class LatencySample(NamedTuple):
    query_index: int
    route_ns: int
    search_ns: int
    merge_ns: int
    total_ns: int


@dataclasses.dataclass(frozen=True)
class LatencySummary:
    p50: int
    p95: int
    p99: int
    mean: float


def nearest_rank_percentile(samples, p: float) -> int:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample."""
    if not 0 < p <= 100:
        raise ValueError(f"percentile must lie in (0, 100], got {p}")
    ordered = sorted(samples)
    if not ordered:
        raise ValueError("cannot take a percentile of an empty sample set")
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return ordered[rank - 1]


def summarize_latency(samples: list[LatencySample]) -> dict[str, LatencySummary]:
    out = {}
    for stage in _STAGES:
        values = [getattr(s, f"{stage}_ns") for s in samples]
        out[stage] = LatencySummary(
            p50=nearest_rank_percentile(values, 50),
            p95=nearest_rank_percentile(values, 95),
            p99=nearest_rank_percentile(values, 99),
            mean=_round9(sum(values) / len(values)),
        )
    return out


class QuerySet:
    """Ordered query batch: id, unit-norm embedding, true product, true TLC."""

    def __init__(self, image_ids, embeddings, product_ids, tlc_ids) -> None:
        self.image_ids = np.asarray(image_ids, dtype=np.uint64)
        self.embeddings = np.asarray(embeddings, dtype=np.float32)
        self.product_ids = np.asarray(product_ids, dtype=np.uint64)
        self.tlc_ids = np.asarray(tlc_ids, dtype=np.uint32)
        n = self.image_ids.shape[0]
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise ValueError("embeddings must be one row per query")
        if self.product_ids.shape != (n,) or self.tlc_ids.shape != (n,):
            raise ValueError("ids, products and TLCs must have equal length")
        if len(set(self.image_ids.tolist())) != n:
            raise ValueError("query image ids repeat")
        if n and not np.isfinite(self.embeddings).all():
            raise ValueError("query embeddings contain non-finite values")

    def __len__(self) -> int:
        return int(self.image_ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def select(self, indices) -> "QuerySet":
        idx = np.asarray(list(indices), dtype=np.intp)
        return QuerySet(
            self.image_ids[idx],
            self.embeddings[idx],
            self.product_ids[idx],
            self.tlc_ids[idx],
        )

    @classmethod
    def from_catalog(cls, catalog, embeddings) -> "QuerySet":
        """All query-domain images of a catalog, normalized."""
        normalized = embeddings.normalized()
        rows = [img for img in catalog.images if img.domain is Domain.QUERY]
        return cls(
            image_ids=[img.image_id for img in rows],
            embeddings=np.stack(
                [normalized.vector_for(img.image_id) for img in rows]
            )
            if rows
            else np.zeros((0, embeddings.dim), np.float32),
            product_ids=[img.product_id for img in rows],
            tlc_ids=[img.tlc_id for img in rows],
        )

    @classmethod
    def from_synth(cls, dataset) -> "QuerySet":
        """All query-domain images of a synthetic dataset, normalized."""
        return cls.from_catalog(dataset.catalog, dataset.embeddings)


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    """Evaluation knobs: retrieval settings plus latency run sizes."""

    k: int = 10
    route_top_m: int = 1
    ef_search: int | None = None
    warmup: int = 10
    measured: int = 200
    repetitions: int = 1

    def __post_init__(self) -> None:
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 10:
            raise ValueError(
                "k must be an integer >= 10 so recall@10 and mAP@10 are defined"
            )
        if self.warmup < 1:
            raise ValueError("warmup must be at least 1")
        if self.measured < 100:
            raise ValueError("measured must be at least 100")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        RetrievalConfig(
            k=self.k, route_top_m=self.route_top_m, ef_search=self.ef_search
        )

    def retrieval(self) -> RetrievalConfig:
        return RetrievalConfig(
            k=self.k, route_top_m=self.route_top_m, ef_search=self.ef_search
        )


@dataclasses.dataclass(frozen=True)
class LatencyConfig:
    warmup: int = 10
    measured: int = 200
    repetitions: int = 1

    def __post_init__(self) -> None:
        if self.warmup < 1:
            raise ValueError("warmup must be at least 1")
        if self.measured < 100:
            raise ValueError("measured must be at least 100")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")


@dataclasses.dataclass(frozen=True)
class MetricsReport:
    """Quality metrics, latency summary, and raw samples for one engine."""

    recall_at_1: float
    recall_at_5: float
    recall_at_10: float
    map_at_10: float
    mrr: float
    routing_accuracy: float | None
    latency_ns: dict[str, LatencySummary]
    throughput_qps: float
    config: dict
    dataset_fingerprint: str
    latency_samples: tuple[LatencySample, ...]

    def quality_metrics(self) -> dict[str, float]:
        out = {name: getattr(self, name) for name in QUALITY_METRICS}
        if self.routing_accuracy is not None:
            out["routing_accuracy"] = self.routing_accuracy
        return out


@dataclasses.dataclass(frozen=True)
class ComparisonReport:
    """Relative cascade-vs-baseline improvements, derived from two reports."""

    improvements_pct: dict[str, float | None]
    undefined_metrics: tuple[str, ...]
    mean_improvement_pct: float | None
    latency_delta_pct: float | None
    dataset_fingerprint: str
    k: int


def _search_call(engine, query, retrieval, true_tlc):
    if isinstance(engine, CascadeEngine):
        return engine.search(query, retrieval, true_tlc=true_tlc)
    return engine.search(query, retrieval)


def _check_ground_truth(engine, query_set: QuerySet) -> None:
    product_tlc = {img.product_id: img.tlc_id for img in engine.catalog.images}
    for i in range(len(query_set)):
        product = int(query_set.product_ids[i])
        if product not in engine.product_catalog_image_count:
            raise GroundTruthError(
                f"query image {int(query_set.image_ids[i])} references product "
                f"{product}, which has no catalog-domain images in the gallery"
            )
        if product_tlc[product] != int(query_set.tlc_ids[i]):
            raise GroundTruthError(
                f"query image {int(query_set.image_ids[i])} claims TLC "
                f"{int(query_set.tlc_ids[i])} but product {product} lives in "
                f"TLC {product_tlc[product]}"
            )


def evaluate(
    engine: BaselineEngine | CascadeEngine,
    query_set: QuerySet,
    config: EvalConfig = EvalConfig(),
) -> MetricsReport:
    """Quality metrics over the whole query set plus a timed latency run."""
    if len(query_set) == 0:
        raise ValueError("cannot evaluate an empty query set")
    if query_set.dim != engine.dim:
        raise ValueError(
            f"query dim {query_set.dim} does not match engine dim {engine.dim}"
        )
    _check_ground_truth(engine, query_set)
    retrieval = config.retrieval()
    is_cascade = isinstance(engine, CascadeEngine)

    n = len(query_set)
    hits = {1: 0, 5: 0, 10: 0}
    rr_sum = 0.0
    ap_sum = 0.0
    routed_hits = 0
    for i in range(n):
        true_product = int(query_set.product_ids[i])
        true_tlc = int(query_set.tlc_ids[i])
        outcome = _search_call(
            engine, query_set.embeddings[i], retrieval, true_tlc
        )
        relevant = [
            engine.image_to_product[r.image_id] == true_product
            for r in outcome.results[:10]
        ]
        for cutoff in hits:
            if any(relevant[:cutoff]):
                hits[cutoff] += 1
        first = next((j for j, r in enumerate(relevant) if r), None)
        if first is not None:
            rr_sum += 1.0 / (first + 1)
        total_relevant = engine.product_catalog_image_count[true_product]
        denominator = min(total_relevant, 10)
        running = 0
        ap = 0.0
        for j, rel in enumerate(relevant):
            if rel:
                running += 1
                ap += running / (j + 1)
        ap_sum += ap / denominator
        if is_cascade and true_tlc in {t for t, _ in outcome.trace.routed}:
            routed_hits += 1

    samples = measure_latency(
        engine,
        query_set,
        config=LatencyConfig(
            warmup=config.warmup,
            measured=config.measured,
            repetitions=config.repetitions,
        ),
        retrieval=retrieval,
    )
    latency = summarize_latency(samples)
    total_ns = sum(s.total_ns for s in samples)
    throughput = _round9(len(samples) * 1e9 / total_ns) if total_ns else 0.0

    echo = {
        "engine_kind": "cascade" if is_cascade else "baseline",
        "index_kind": engine.index_kind.value,
        "build_version": engine.build_version,
        "k": config.k,
        "route_top_m": config.route_top_m,
        "ef_search": config.ef_search,
        "warmup": config.warmup,
        "measured": config.measured,
        "repetitions": config.repetitions,
        "query_count": n,
        "gallery_size": engine.gallery_size,
    }
    return MetricsReport(
        recall_at_1=_round9(hits[1] / n),
        recall_at_5=_round9(hits[5] / n),
        recall_at_10=_round9(hits[10] / n),
        map_at_10=_round9(ap_sum / n),
        mrr=_round9(rr_sum / n),
        routing_accuracy=_round9(routed_hits / n) if is_cascade else None,
        latency_ns=latency,
        throughput_qps=throughput,
        config=echo,
        dataset_fingerprint=engine.dataset_fingerprint,
        latency_samples=tuple(samples),
    )


def measure_latency(
    engine: BaselineEngine | CascadeEngine,
    query_set: QuerySet,
    config: LatencyConfig = LatencyConfig(),
    retrieval: RetrievalConfig = RetrievalConfig(k=10),
) -> list[LatencySample]:
    """Single-threaded steady-state stage timings; warmup discarded."""
    if len(query_set) == 0:
        raise ValueError("latency measurement needs at least one query")
    n = len(query_set)

    def run(index: int):
        return _search_call(
            engine,
            query_set.embeddings[index],
            retrieval,
            int(query_set.tlc_ids[index]),
        )

    for w in range(config.warmup):
        run(w % n)
    samples: list[LatencySample] = []
    for _ in range(config.repetitions):
        for j in range(config.measured):
            query_index = j % n
            trace = run(query_index).trace
            if (
                min(trace.route_ns, trace.search_ns, trace.merge_ns) < 0
                or trace.total_ns < 0
            ):
                raise MeasurementError(
                    "monotonic clock went backwards during measurement"
                )
            samples.append(
                LatencySample(
                    query_index=query_index,
                    route_ns=trace.route_ns,
                    search_ns=trace.search_ns,
                    merge_ns=trace.merge_ns,
                    total_ns=trace.total_ns,
                )
            )
    return samples


def compare(baseline: MetricsReport, cascade: MetricsReport) -> ComparisonReport:
    """Relative improvements of ``cascade`` over ``baseline``."""
    if baseline.dataset_fingerprint != cascade.dataset_fingerprint:
        raise IncomparableError(
            "reports were produced from different datasets "
            "(fingerprints do not match)"
        )
    if baseline.config.get("k") != cascade.config.get("k"):
        raise IncomparableError("reports use different k settings")
    improvements: dict[str, float | None] = {}
    undefined: list[str] = []
    for name in QUALITY_METRICS:
        base = getattr(baseline, name)
        casc = getattr(cascade, name)
        if base == 0.0:
            improvements[name] = None
            undefined.append(name)
        else:
            improvements[name] = _round9(100.0 * (casc - base) / base)
    defined = [v for v in improvements.values() if v is not None]
    mean = _round9(sum(defined) / len(defined)) if defined else None
    base_p50 = baseline.latency_ns["total"].p50
    casc_p50 = cascade.latency_ns["total"].p50
    if base_p50 == 0:
        latency_delta = None
        undefined.append("latency_delta_pct")
    else:
        latency_delta = _round9(100.0 * (casc_p50 - base_p50) / base_p50)
    return ComparisonReport(
        improvements_pct=improvements,
        undefined_metrics=tuple(undefined),
        mean_improvement_pct=mean,
        latency_delta_pct=latency_delta,
        dataset_fingerprint=baseline.dataset_fingerprint,
        k=int(baseline.config.get("k")),
    )


class ReportFormat(str, enum.Enum):
    JSON = "json"
    MARKDOWN = "markdown"
    CSV = "csv"


def _metrics_to_doc(report: MetricsReport) -> dict:
    return {
        "report_kind": "metrics",
        **{name: getattr(report, name) for name in QUALITY_METRICS},
        "routing_accuracy": report.routing_accuracy,
        "latency_ns": {
            stage: dataclasses.asdict(summary)
            for stage, summary in report.latency_ns.items()
        },
        "throughput_qps": report.throughput_qps,
        "config": report.config,
        "dataset_fingerprint": report.dataset_fingerprint,
        "latency_samples": [list(s) for s in report.latency_samples],
    }


def _comparison_to_doc(report: ComparisonReport) -> dict:
    return {
        "report_kind": "comparison",
        "improvements_pct": report.improvements_pct,
        "undefined_metrics": list(report.undefined_metrics),
        "mean_improvement_pct": report.mean_improvement_pct,
        "latency_delta_pct": report.latency_delta_pct,
        "dataset_fingerprint": report.dataset_fingerprint,
        "k": report.k,
    }


def _metrics_markdown(report: MetricsReport) -> str:
    rows = [(name, getattr(report, name)) for name in QUALITY_METRICS]
    if report.routing_accuracy is not None:
        rows.append(("routing_accuracy", report.routing_accuracy))
    for stat in ("p50", "p95", "p99", "mean"):
        rows.append(
            (f"latency_{stat}_total_ns", getattr(report.latency_ns["total"], stat))
        )
    rows.append(("throughput_qps", report.throughput_qps))
    lines = ["| metric | value |", "| --- | --- |"]
    lines += [f"| {name} | {value} |" for name, value in rows]
    return "\n".join(lines) + "\n"


def _comparison_markdown(report: ComparisonReport) -> str:
    lines = ["| metric | improvement % |", "| --- | --- |"]
    for name, value in report.improvements_pct.items():
        cell = "undefined" if value is None else value
        lines.append(f"| {name} | {cell} |")
    mean = (
        "undefined"
        if report.mean_improvement_pct is None
        else report.mean_improvement_pct
    )
    delta = (
        "undefined"
        if report.latency_delta_pct is None
        else report.latency_delta_pct
    )
    lines.append(f"| mean_improvement | {mean} |")
    lines.append(f"| latency_delta_p50 | {delta} |")
    return "\n".join(lines) + "\n"


def _metrics_csv(report: MetricsReport) -> str:
    lines = ["query_index,route_ns,search_ns,merge_ns,total_ns"]
    lines += [
        f"{s.query_index},{s.route_ns},{s.search_ns},{s.merge_ns},{s.total_ns}"
        for s in report.latency_samples
    ]
    return "\n".join(lines) + "\n"


def _comparison_csv(report: ComparisonReport) -> str:
    lines = ["metric,improvement_pct"]
    for name, value in report.improvements_pct.items():
        lines.append(f"{name},{'undefined' if value is None else value}")
    mean = (
        "undefined"
        if report.mean_improvement_pct is None
        else report.mean_improvement_pct
    )
    delta = (
        "undefined"
        if report.latency_delta_pct is None
        else report.latency_delta_pct
    )
    lines.append(f"mean_improvement,{mean}")
    lines.append(f"latency_delta_p50,{delta}")
    return "\n".join(lines) + "\n"


def render_report(
    report: MetricsReport | ComparisonReport,
    format: ReportFormat | str = ReportFormat.JSON,
) -> bytes:
    """Serialize a report. JSON is canonical; CSV carries raw samples."""
    fmt = ReportFormat(format)
    is_metrics = isinstance(report, MetricsReport)
    if fmt is ReportFormat.JSON:
        doc = _metrics_to_doc(report) if is_metrics else _comparison_to_doc(report)
        return (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode("utf-8")
    if fmt is ReportFormat.MARKDOWN:
        text = _metrics_markdown(report) if is_metrics else _comparison_markdown(report)
        return text.encode("utf-8")
    text = _metrics_csv(report) if is_metrics else _comparison_csv(report)
    return text.encode("utf-8")


def parse_report(data: bytes) -> MetricsReport | ComparisonReport:
    """Parse a JSON report back into a value-identical report object."""
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"report is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError("report JSON must be an object")
    kind = doc.get("report_kind")
    try:
        if kind == "metrics":
            return MetricsReport(
                **{name: doc[name] for name in QUALITY_METRICS},
                routing_accuracy=doc["routing_accuracy"],
                latency_ns={
                    stage: LatencySummary(**summary)
                    for stage, summary in doc["latency_ns"].items()
                },
                throughput_qps=doc["throughput_qps"],
                config=doc["config"],
                dataset_fingerprint=doc["dataset_fingerprint"],
                latency_samples=tuple(
                    LatencySample(*row) for row in doc["latency_samples"]
                ),
            )
        if kind == "comparison":
            return ComparisonReport(
                improvements_pct=doc["improvements_pct"],
                undefined_metrics=tuple(doc["undefined_metrics"]),
                mean_improvement_pct=doc["mean_improvement_pct"],
                latency_delta_pct=doc["latency_delta_pct"],
                dataset_fingerprint=doc["dataset_fingerprint"],
                k=doc["k"],
            )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"report JSON is missing fields: {exc}") from exc
    raise FormatError(f"unknown report kind {kind!r}")
