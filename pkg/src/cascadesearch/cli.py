"""Command-line front door tying the modules into reproducible experiments.

Subcommands: ``synth``, ``ingest``, ``build``, ``train-router``, ``search``,
``bench``, ``compare``, ``serve``.  Exit codes form a small contract for CI:

* 0 — success
* 1 — usage error (unknown flag, bad flag combination, bad option value)
* 2 — data error (unreadable/invalid files, incomparable reports)
* 3 — ``bench --check`` regression threshold failure

Options resolve in three layers: built-in defaults, then a ``--config`` JSON
file (an object mapping option names to values; keys that do not belong to
the current subcommand are ignored so one file can drive several commands),
then explicit flags.  Every run writes the resolved options to
``<out>/<command>_resolved_config.json`` before doing any work, so a run can
be re-executed exactly from its artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .cascade import (
    BaselineEngine,
    CascadeEngine,
    IndexKind,
    RetrievalConfig,
    build_baseline,
    build_cascade,
    load_engine,
    save_engine,
)
from .catalog import (
    Domain,
    dataset_fingerprint,
    load_catalog,
    load_embeddings,
    load_ground_truth,
    validate,
)
from .errors import CascadeSearchError, DataError
from .evalbench import (
    EvalConfig,
    MetricsReport,
    QUALITY_METRICS,
    QuerySet,
    ReportFormat,
    compare,
    evaluate,
    parse_report,
    render_report,
)
from .router import (
    OracleRouter,
    TrainConfig,
    load_router,
    save_router,
    split_train_holdout,
    train,
)
from .synthgen import REFERENCE_CONFIG, SynthConfig, generate, write_dataset
from .vecindex import HnswParams


class UsageError(Exception):
    """Bad invocation: unknown flag, missing argument, invalid combination."""


class ThresholdFailure(Exception):
    """A frozen regression threshold did not hold in ``bench --check``."""


# ---------------------------------------------------------------------------
# Frozen reference-run regression numbers.
#
# Measured once on the reference preset (seed 42, flat indexes, oracle
# router a=1.0, k=10) and pinned; `bench --preset reference --check`
# re-measures and fails with exit code 3 if any value drifts beyond the
# tolerances below.
# ---------------------------------------------------------------------------
REFERENCE_FROZEN = {
    "dataset_fingerprint": (
        "ffce8c69661305b6d3149d0509b4283a22373038cdd31730b1fcbef9017ec0d9"
    ),
    "metrics": {
        "baseline": {
            "recall_at_1": 0.901458333,
            "recall_at_5": 0.955104167,
            "recall_at_10": 0.9734375,
            "map_at_10": 0.82084685,
            "mrr": 0.924751405,
        },
        "cascade": {
            "recall_at_1": 0.930104167,
            "recall_at_5": 0.971770833,
            "recall_at_10": 0.985416667,
            "map_at_10": 0.864397156,
            "mrr": 0.947969453,
        },
    },
    "mean_improvement_pct": 2.79392079,
}
REFERENCE_METRIC_TOLERANCE = 0.02
REFERENCE_IMPROVEMENT_TOLERANCE_PCT = 2.0


class _Parser(argparse.ArgumentParser):
    """argparse maps its own errors to exit code 2; we need them at 1."""

    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().rstrip()}")


# ---------------------------------------------------------------------------
# Option plumbing
# ---------------------------------------------------------------------------

_SYNTH_DEFAULTS = {"preset": None, **REFERENCE_CONFIG.as_dict()}

_INGEST_DEFAULTS = {"catalog": None, "embeddings": None}

_BUILD_DEFAULTS = {
    "data": None,
    "mode": "both",
    "index_kind": "flat",
    "hnsw_m": 16,
    "hnsw_ef_construction": 200,
    "hnsw_ef_search": 100,
    "router": None,
    "oracle_accuracy": None,
    "seed": 0,
}

_TRAIN_DEFAULTS = {
    "data": None,
    "domain": "query",
    "epochs": 40,
    "learning_rate": 0.5,
    "batch_size": 128,
    "l2_lambda": 0.0,
    "seed": 0,
}

_SEARCH_DEFAULTS = {
    "engine": None,
    "queries": None,
    "ground_truth": None,
    "k": 10,
    "route_top_m": 1,
    "ef_search": None,
}

_BENCH_DEFAULTS = {
    "preset": None,
    "data": None,
    "mode": "both",
    "index_kind": "flat",
    "hnsw_m": 16,
    "hnsw_ef_construction": 200,
    "hnsw_ef_search": 100,
    "router": None,
    "oracle_accuracy": None,
    "k": 10,
    "route_top_m": 1,
    "ef_search": None,
    "warmup": 10,
    "measured": 200,
    "repetitions": 1,
    "seed": 42,
    "check": False,
}

_COMPARE_DEFAULTS: dict = {}

_SERVE_DEFAULTS = {"host": "127.0.0.1", "port": 8000, "data": None}


def _read_config_file(path: str) -> dict:
    try:
        loaded = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(loaded, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return loaded


def _resolve_options(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults <- config file <- explicit flags (None means 'not given')."""
    merged = dict(defaults)
    if getattr(args, "config", None) is not None:
        for key, value in _read_config_file(args.config).items():
            if key in merged:
                merged[key] = value
    for key in merged:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _write_resolved_config(out_dir: Path, command: str, options: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command.replace('-', '_')}_resolved_config.json"
    doc = {"command": command, "options": options}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _require(options: dict, key: str, flag: str) -> str:
    value = options.get(key)
    if value is None:
        raise UsageError(f"missing required option {flag}")
    return value


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--out", default=None, help="output directory (default: .)")
    sub.add_argument("--seed", type=int, default=None, help="random seed")
    sub.add_argument(
        "--config",
        default=None,
        help="JSON file with option defaults; explicit flags override it",
    )


def _load_dataset_dir(data_dir: str):
    """Load the canonical synth layout: catalog.jsonl + embeddings.cemb."""
    root = Path(data_dir)
    catalog = load_catalog(root / "catalog.jsonl")
    embeddings = load_embeddings(root / "embeddings.cemb")
    return catalog, embeddings


def _hnsw_params(options: dict, seed: int) -> HnswParams:
    return HnswParams(
        m=options["hnsw_m"],
        ef_construction=options["hnsw_ef_construction"],
        ef_search_default=options["hnsw_ef_search"],
        seed=seed,
    )


def _resolve_bench_router(options: dict, catalog, seed: int):
    if options["router"] is not None and options["oracle_accuracy"] is not None:
        raise UsageError("--router and --oracle-accuracy are mutually exclusive")
    if options["router"] is not None:
        return load_router(options["router"])
    accuracy = options["oracle_accuracy"]
    if accuracy is None:
        accuracy = 1.0
    labels = tuple(sorted({img.tlc_id for img in catalog.images}))
    return OracleRouter(accuracy=float(accuracy), class_labels=labels, seed=seed)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(options: dict, out: Path) -> int:
    preset = options["preset"]
    if preset is not None and preset != "reference":
        raise UsageError(f"unknown preset {preset!r} (available: reference)")
    fields = {k: v for k, v in options.items() if k != "preset"}
    config = SynthConfig(**fields)
    dataset = generate(config)
    paths = write_dataset(dataset, out)
    validate(dataset.catalog, dataset.embeddings)
    print(
        f"synth: {dataset.catalog_image_count} catalog + "
        f"{dataset.query_image_count} query images, dim {config.dim}, "
        f"{len(dataset.confuser_products)} confuser products"
    )
    print(
        "synth: fingerprint "
        f"{dataset_fingerprint(dataset.catalog, dataset.embeddings)}"
    )
    for name in ("embeddings", "catalog", "ground_truth"):
        print(f"synth: wrote {paths[name]}")
    return 0


def _cmd_ingest(options: dict, out: Path) -> int:
    catalog_path = _require(options, "catalog", "--catalog")
    embeddings_path = _require(options, "embeddings", "--embeddings")
    catalog = load_catalog(catalog_path)
    embeddings = load_embeddings(embeddings_path)
    summary = validate(catalog, embeddings)
    fingerprint = dataset_fingerprint(catalog, embeddings)
    report_path = out / "validation.json"
    doc = {**summary.as_dict(), "dim": embeddings.dim, "fingerprint": fingerprint}
    report_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(
        f"ingest: {summary.images_total} images across "
        f"{summary.tlcs} categories, dim {embeddings.dim}"
    )
    print(f"ingest: fingerprint {fingerprint}")
    print(f"ingest: wrote {report_path}")
    return 0


def _cmd_build(options: dict, out: Path) -> int:
    data_dir = _require(options, "data", "--data")
    mode = options["mode"]
    if mode not in ("baseline", "cascade", "both"):
        raise UsageError(f"--mode must be baseline|cascade|both, got {mode!r}")
    try:
        index_kind = IndexKind(options["index_kind"])
    except ValueError:
        raise UsageError(
            f"--index-kind must be flat|hnsw, got {options['index_kind']!r}"
        ) from None
    catalog, embeddings = _load_dataset_dir(data_dir)
    seed = int(options["seed"])
    hnsw = _hnsw_params(options, seed) if index_kind is IndexKind.HNSW else None

    if mode in ("baseline", "both"):
        engine = build_baseline(catalog, embeddings, index_kind, hnsw)
        target = out / "baseline_engine"
        save_engine(engine, target)
        print(f"build: baseline v{engine.build_version} -> {target}")
    if mode in ("cascade", "both"):
        if options["router"] is not None and options["oracle_accuracy"] is not None:
            raise UsageError("--router and --oracle-accuracy are mutually exclusive")
        if options["router"] is not None:
            router = load_router(options["router"])
        elif options["oracle_accuracy"] is not None:
            labels = tuple(sorted({img.tlc_id for img in catalog.images}))
            router = OracleRouter(
                accuracy=float(options["oracle_accuracy"]),
                class_labels=labels,
                seed=seed,
            )
        else:
            raise UsageError(
                "a cascade build needs --router FILE or --oracle-accuracy A"
            )
        engine = build_cascade(catalog, embeddings, router, index_kind, hnsw)
        target = out / "cascade_engine"
        save_engine(engine, target)
        print(
            f"build: cascade v{engine.build_version} "
            f"({len(engine.partitions)} partitions) -> {target}"
        )
    print(f"build: fingerprint {dataset_fingerprint(catalog, embeddings)}")
    return 0


def _cmd_train_router(options: dict, out: Path) -> int:
    data_dir = _require(options, "data", "--data")
    domain = options["domain"]
    if domain not in ("query", "catalog", "all"):
        raise UsageError(f"--domain must be query|catalog|all, got {domain!r}")
    catalog, embeddings = _load_dataset_dir(data_dir)
    normalized = embeddings.normalized()
    if domain == "all":
        rows = list(catalog.images)
    else:
        wanted = Domain.QUERY if domain == "query" else Domain.CATALOG
        rows = [img for img in catalog.images if img.domain is wanted]
    if not rows:
        raise DataError(f"no {domain}-domain images in {data_dir}")
    features = np.stack([normalized.vector_for(img.image_id) for img in rows])
    labels = [img.tlc_id for img in rows]

    seed = int(options["seed"])
    train_idx, holdout_idx = split_train_holdout(len(rows), seed)
    config = TrainConfig(
        learning_rate=float(options["learning_rate"]),
        epochs=int(options["epochs"]),
        batch_size=int(options["batch_size"]),
        l2_lambda=float(options["l2_lambda"]),
        seed=seed,
    )
    router, losses = train(
        features[train_idx], [labels[i] for i in train_idx], config
    )
    probabilities = router.predict_proba(features[holdout_idx])
    predicted = [router.class_labels[i] for i in np.argmax(probabilities, axis=1)]
    actual = [labels[i] for i in holdout_idx]
    accuracy = float(np.mean([p == a for p, a in zip(predicted, actual)]))

    router_path = out / "router.json"
    save_router(router, router_path)
    summary = {
        "domain": domain,
        "train_rows": int(len(train_idx)),
        "holdout_rows": int(len(holdout_idx)),
        "holdout_accuracy": accuracy,
        "final_train_loss": losses[-1],
        "classes": len(router.class_labels),
    }
    summary_path = out / "train_router_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(
        f"train-router: {summary['train_rows']} train / "
        f"{summary['holdout_rows']} holdout rows, "
        f"holdout accuracy {accuracy:.4f}"
    )
    print(f"train-router: wrote {router_path}")
    return 0


def _cmd_search(options: dict, out: Path) -> int:
    engine_dir = _require(options, "engine", "--engine")
    queries_path = _require(options, "queries", "--queries")
    engine = load_engine(engine_dir)
    queries = load_embeddings(queries_path).normalized()

    needs_truth = isinstance(engine, CascadeEngine) and isinstance(
        engine.router, OracleRouter
    )
    truth = None
    if options["ground_truth"] is not None:
        truth = load_ground_truth(options["ground_truth"])
    elif needs_truth:
        raise UsageError(
            "this engine routes with an oracle; pass --ground-truth FILE "
            "so each query's true category is known"
        )

    retrieval = RetrievalConfig(
        k=int(options["k"]),
        route_top_m=int(options["route_top_m"]),
        ef_search=(
            None if options["ef_search"] is None else int(options["ef_search"])
        ),
    )
    results_path = out / "results.jsonl"
    with results_path.open("w", encoding="utf-8") as handle:
        for row in range(queries.count):
            image_id = int(queries.ids[row])
            true_tlc = None
            if truth is not None:
                if image_id not in truth:
                    raise DataError(
                        f"query image {image_id} missing from ground truth"
                    )
                true_tlc = truth[image_id][1]
            outcome = engine.search(
                queries.vectors[row], retrieval, true_tlc=true_tlc
            )
            doc = {
                "image_id": image_id,
                "results": [
                    {"image_id": r.image_id, "score": r.score}
                    for r in outcome.results
                ],
                "routed": [[t, p] for t, p in outcome.trace.routed],
                "route_ns": outcome.trace.route_ns,
                "search_ns": outcome.trace.search_ns,
                "merge_ns": outcome.trace.merge_ns,
                "total_ns": outcome.trace.total_ns,
            }
            handle.write(json.dumps(doc, sort_keys=True) + "\n")
    kind = "cascade" if isinstance(engine, CascadeEngine) else "baseline"
    print(f"search: {queries.count} queries against {kind} engine (k={retrieval.k})")
    print(f"search: wrote {results_path}")
    return 0


def _check_reference_thresholds(reports: dict[str, MetricsReport]) -> None:
    failures: list[str] = []
    fingerprint = reports["baseline"].dataset_fingerprint
    if fingerprint != REFERENCE_FROZEN["dataset_fingerprint"]:
        failures.append(
            "dataset fingerprint drifted: "
            f"{fingerprint} != {REFERENCE_FROZEN['dataset_fingerprint']}"
        )
    for engine_name, frozen in REFERENCE_FROZEN["metrics"].items():
        report = reports[engine_name]
        for metric, expected in frozen.items():
            got = getattr(report, metric)
            if abs(got - expected) > REFERENCE_METRIC_TOLERANCE:
                failures.append(
                    f"{engine_name} {metric}: {got} vs frozen {expected} "
                    f"(tolerance {REFERENCE_METRIC_TOLERANCE})"
                )
    comparison = compare(reports["baseline"], reports["cascade"])
    mean = comparison.mean_improvement_pct
    frozen_mean = REFERENCE_FROZEN["mean_improvement_pct"]
    if mean is None or abs(mean - frozen_mean) > REFERENCE_IMPROVEMENT_TOLERANCE_PCT:
        failures.append(
            f"mean improvement {mean} vs frozen {frozen_mean} "
            f"(tolerance {REFERENCE_IMPROVEMENT_TOLERANCE_PCT})"
        )
    if failures:
        raise ThresholdFailure("; ".join(failures))


_CHECK_PINNED = {
    "preset": "reference",
    "data": None,
    "mode": "both",
    "index_kind": "flat",
    "router": None,
    "k": 10,
    "route_top_m": 1,
    "ef_search": None,
    "seed": 42,
}


def _cmd_bench(options: dict, out: Path) -> int:
    preset = options["preset"]
    data_dir = options["data"]
    if (preset is None) == (data_dir is None):
        raise UsageError("pass exactly one of --preset reference or --data DIR")
    if preset is not None and preset != "reference":
        raise UsageError(f"unknown preset {preset!r} (available: reference)")
    mode = options["mode"]
    if mode not in ("baseline", "cascade", "both"):
        raise UsageError(f"--mode must be baseline|cascade|both, got {mode!r}")
    try:
        index_kind = IndexKind(options["index_kind"])
    except ValueError:
        raise UsageError(
            f"--index-kind must be flat|hnsw, got {options['index_kind']!r}"
        ) from None
    if options["check"]:
        pinned = dict(_CHECK_PINNED)
        mismatched = [
            key
            for key, value in pinned.items()
            if options[key] != value
        ]
        if options["oracle_accuracy"] not in (None, 1.0):
            mismatched.append("oracle_accuracy")
        if mismatched:
            raise UsageError(
                "--check only validates the unmodified reference preset; "
                f"non-default options: {', '.join(sorted(mismatched))}"
            )

    seed = int(options["seed"])
    if preset is not None:
        config = SynthConfig(**{**REFERENCE_CONFIG.as_dict(), "seed": seed})
        dataset = generate(config)
        catalog, embeddings = dataset.catalog, dataset.embeddings
    else:
        catalog, embeddings = _load_dataset_dir(data_dir)
    query_set = QuerySet.from_catalog(catalog, embeddings)

    hnsw = _hnsw_params(options, seed) if index_kind is IndexKind.HNSW else None
    eval_config = EvalConfig(
        k=int(options["k"]),
        route_top_m=int(options["route_top_m"]),
        ef_search=(
            None if options["ef_search"] is None else int(options["ef_search"])
        ),
        warmup=int(options["warmup"]),
        measured=int(options["measured"]),
        repetitions=int(options["repetitions"]),
    )

    engines: dict[str, BaselineEngine | CascadeEngine] = {}
    if mode in ("baseline", "both"):
        engines["baseline"] = build_baseline(catalog, embeddings, index_kind, hnsw)
    if mode in ("cascade", "both"):
        router = _resolve_bench_router(options, catalog, seed)
        engines["cascade"] = build_cascade(
            catalog, embeddings, router, index_kind, hnsw
        )

    reports: dict[str, MetricsReport] = {}
    for name, engine in engines.items():
        report = evaluate(engine, query_set, eval_config)
        reports[name] = report
        (out / f"{name}.json").write_bytes(
            render_report(report, ReportFormat.JSON)
        )
        (out / f"{name}_latency.csv").write_bytes(
            render_report(report, ReportFormat.CSV)
        )
        quality = " ".join(
            f"{metric}={getattr(report, metric)}" for metric in QUALITY_METRICS
        )
        print(f"bench: {name} {quality}")
        print(
            f"bench: {name} p50 total "
            f"{report.latency_ns['total'].p50} ns, "
            f"throughput {report.throughput_qps:.1f} q/s"
        )

    if mode == "both":
        comparison = compare(reports["baseline"], reports["cascade"])
        (out / "comparison.json").write_bytes(
            render_report(comparison, ReportFormat.JSON)
        )
        (out / "comparison.md").write_bytes(
            render_report(comparison, ReportFormat.MARKDOWN)
        )
        print(
            f"bench: mean quality improvement "
            f"{comparison.mean_improvement_pct}% "
            f"(latency delta {comparison.latency_delta_pct}%)"
        )

    if options["check"]:
        _check_reference_thresholds(reports)
        print("bench: --check passed against frozen reference numbers")
    return 0


def _cmd_compare(options: dict, out: Path, baseline_path: str, cascade_path: str) -> int:
    baseline = parse_report(Path(baseline_path).read_bytes())
    cascade = parse_report(Path(cascade_path).read_bytes())
    for name, report in (("baseline", baseline), ("cascade", cascade)):
        if not isinstance(report, MetricsReport):
            raise DataError(f"{name} file holds a comparison, not a metrics report")
    comparison = compare(baseline, cascade)
    json_path = out / "comparison.json"
    json_path.write_bytes(render_report(comparison, ReportFormat.JSON))
    (out / "comparison.md").write_bytes(
        render_report(comparison, ReportFormat.MARKDOWN)
    )
    print(
        f"compare: mean quality improvement {comparison.mean_improvement_pct}% "
        f"(latency delta {comparison.latency_delta_pct}%)"
    )
    if comparison.undefined_metrics:
        print(
            "compare: undefined metrics (baseline at zero): "
            + ", ".join(comparison.undefined_metrics)
        )
    print(f"compare: wrote {json_path}")
    return 0


def _cmd_serve(options: dict, out: Path) -> int:
    import uvicorn

    from .service import ApiError, _build, _ingest, create_app

    app = create_app()
    data_dir = options["data"]
    if data_dir is not None:
        root = Path(data_dir)
        try:
            _ingest(
                app.state.service,
                {
                    "catalog_path": str(root / "catalog.jsonl"),
                    "embeddings_path": str(root / "embeddings.cemb"),
                },
            )
            summary = _build(
                app.state.service,
                {"mode": "both", "index_kind": "flat", "train_router": {}},
            )
        except ApiError as exc:
            raise DataError(f"startup build failed: {exc.message}") from exc
        print(f"serve: built engines at version {summary['build_version']}")
    uvicorn.run(app, host=options["host"], port=int(options["port"]))
    return 0


# ---------------------------------------------------------------------------
# Parser assembly and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(
        prog="cascadesearch",
        description="Category-routed cascade vector search toolkit",
    )
    subparsers = parser.add_subparsers(
        dest="command", metavar="COMMAND", required=True, parser_class=_Parser
    )

    synth = subparsers.add_parser("synth", help="generate a synthetic dataset")
    _add_common_flags(synth)
    synth.add_argument("--preset", default=None, help="named preset: reference")
    synth.add_argument("--num-tlcs", type=int, default=None)
    synth.add_argument("--products-per-tlc", type=int, default=None)
    synth.add_argument("--catalog-images-per-product", type=int, default=None)
    synth.add_argument("--query-images-per-product", type=int, default=None)
    synth.add_argument("--dim", type=int, default=None)
    synth.add_argument("--tlc-spread", type=float, default=None)
    synth.add_argument("--image-noise", type=float, default=None)
    synth.add_argument("--query-noise", type=float, default=None)
    synth.add_argument("--domain-shift", type=float, default=None)
    synth.add_argument("--confuser-fraction", type=float, default=None)

    ingest = subparsers.add_parser(
        "ingest", help="validate a catalog + embeddings pair"
    )
    _add_common_flags(ingest)
    ingest.add_argument("--catalog", default=None, help="catalog JSONL file")
    ingest.add_argument("--embeddings", default=None, help="embeddings CEMB file")

    build = subparsers.add_parser("build", help="build and save search engines")
    _add_common_flags(build)
    build.add_argument("--data", default=None, help="dataset directory from synth")
    build.add_argument("--mode", default=None, help="baseline|cascade|both")
    build.add_argument("--index-kind", default=None, help="flat|hnsw")
    build.add_argument("--hnsw-m", type=int, default=None)
    build.add_argument("--hnsw-ef-construction", type=int, default=None)
    build.add_argument("--hnsw-ef-search", type=int, default=None)
    build.add_argument("--router", default=None, help="trained router JSON file")
    build.add_argument(
        "--oracle-accuracy",
        type=float,
        default=None,
        help="use a synthetic oracle router with this top-1 accuracy",
    )

    train_router = subparsers.add_parser(
        "train-router", help="train the category classifier"
    )
    _add_common_flags(train_router)
    train_router.add_argument("--data", default=None, help="dataset directory")
    train_router.add_argument(
        "--domain", default=None, help="training rows: query|catalog|all"
    )
    train_router.add_argument("--epochs", type=int, default=None)
    train_router.add_argument("--learning-rate", type=float, default=None)
    train_router.add_argument("--batch-size", type=int, default=None)
    train_router.add_argument("--l2-lambda", type=float, default=None)

    search = subparsers.add_parser("search", help="query a saved engine")
    _add_common_flags(search)
    search.add_argument("--engine", default=None, help="saved engine directory")
    search.add_argument("--queries", default=None, help="query embeddings CEMB file")
    search.add_argument(
        "--ground-truth",
        default=None,
        help="ground-truth JSONL (required for oracle-routed engines)",
    )
    search.add_argument("--k", type=int, default=None)
    search.add_argument("--route-top-m", type=int, default=None)
    search.add_argument("--ef-search", type=int, default=None)

    bench = subparsers.add_parser(
        "bench", help="run the benchmark and write reports"
    )
    _add_common_flags(bench)
    bench.add_argument("--preset", default=None, help="named preset: reference")
    bench.add_argument("--data", default=None, help="dataset directory from synth")
    bench.add_argument("--mode", default=None, help="baseline|cascade|both")
    bench.add_argument("--index-kind", default=None, help="flat|hnsw")
    bench.add_argument("--hnsw-m", type=int, default=None)
    bench.add_argument("--hnsw-ef-construction", type=int, default=None)
    bench.add_argument("--hnsw-ef-search", type=int, default=None)
    bench.add_argument("--router", default=None, help="trained router JSON file")
    bench.add_argument("--oracle-accuracy", type=float, default=None)
    bench.add_argument("--k", type=int, default=None)
    bench.add_argument("--route-top-m", type=int, default=None)
    bench.add_argument("--ef-search", type=int, default=None)
    bench.add_argument("--warmup", type=int, default=None)
    bench.add_argument("--measured", type=int, default=None)
    bench.add_argument("--repetitions", type=int, default=None)
    bench.add_argument(
        "--check",
        action="store_true",
        default=None,
        help="fail (exit 3) if frozen reference numbers drift",
    )

    compare_cmd = subparsers.add_parser(
        "compare", help="compare two saved metric reports"
    )
    _add_common_flags(compare_cmd)
    compare_cmd.add_argument("baseline_report", help="baseline metrics JSON")
    compare_cmd.add_argument("cascade_report", help="cascade metrics JSON")

    serve = subparsers.add_parser("serve", help="run the HTTP search service")
    _add_common_flags(serve)
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)
    serve.add_argument(
        "--data", default=None, help="dataset directory to ingest and build on start"
    )

    return parser


_DISPATCH = {
    "synth": (_SYNTH_DEFAULTS, _cmd_synth),
    "ingest": (_INGEST_DEFAULTS, _cmd_ingest),
    "build": (_BUILD_DEFAULTS, _cmd_build),
    "train-router": (_TRAIN_DEFAULTS, _cmd_train_router),
    "search": (_SEARCH_DEFAULTS, _cmd_search),
    "bench": (_BENCH_DEFAULTS, _cmd_bench),
    "compare": (_COMPARE_DEFAULTS, _cmd_compare),
    "serve": (_SERVE_DEFAULTS, _cmd_serve),
}


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults, handler = _DISPATCH[args.command]
    options = _resolve_options(args, defaults)
    out = Path(args.out) if args.out is not None else Path(".")
    record = dict(options)
    if args.command == "compare":
        record["baseline_report"] = args.baseline_report
        record["cascade_report"] = args.cascade_report
    record["out"] = str(out)
    _write_resolved_config(out, args.command, record)
    if args.command == "compare":
        return handler(options, out, args.baseline_report, args.cascade_report)
    return handler(options, out)


def main(argv: list[str] | None = None) -> int:
    try:
        return run_command(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:  # argparse --help
        code = exc.code
        return code if isinstance(code, int) else 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ThresholdFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CascadeSearchError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
