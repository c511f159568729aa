"""Command-line entry point: ``cvss-predict {ingest,score,train,predict,eval}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from .classifier import CvssEmbeddingClassifier, ModelBundle, SoftmaxRegression, predict_embeddings
from .config import Config, ConfigError, load_config
from .cvss import MalformedVector, base_score, parse_vector
from .embeddings import DimensionMismatch, EmbeddingClient, build_feature_matrix
from .evaluation import (LengthMismatch, component_accuracy, emit_plotdata, emit_report, evaluate,
                         mean_accuracy)
from .hybrid import PredictedVector, route
from .ingest import (IngestError, enrich, file_sha256, load_cve_repo, load_cwe_catalog,
                     load_dataset, make_splits, read_jsonl, record_fingerprint, write_jsonl,
                     write_snapshot)
from .llm import ChatClient, LlmError, ScorePrediction, VanillaPredictor
from .prompts import FewShotSet, PromptVariant, TemplateSet

logger = logging.getLogger("cvss_predict")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
MODES = ("vanilla", "embedding", "hybrid")
SPLITS = ("test", "vanilla", "all")
DEFAULT_SPLIT = {"vanilla": "vanilla", "embedding": "test", "hybrid": "test"}


class UsageError(ValueError):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_timing(path: Path, started: str, **extra) -> None:
    # Timestamps live in a sidecar so the main outputs stay byte-reproducible.
    data = {"started": started, "finished": _now(), **extra}
    path.with_name(path.name + ".timing.json").write_text(json.dumps(data, indent=2) + "\n")


def _dataset_path(cfg: Config) -> Path:
    path = cfg.cache_dir / "dataset.jsonl"
    if not path.exists():
        raise IngestError(f"dataset cache {path} not found; run `cvss-predict ingest` first")
    return path


def _load_enriched(cfg: Config, records):
    catalog = {}
    if cfg.dataset.get("cwe_catalog"):
        catalog = load_cwe_catalog(cfg.require_path("dataset", "cwe_catalog"))
    enriched, stats = enrich(records, catalog)
    if stats.n_missing:
        logger.info("%d CWE references not found in catalog", stats.n_missing)
    return enriched


def _embedder(cfg: Config) -> EmbeddingClient:
    ep = cfg.endpoints
    return EmbeddingClient.from_env(ep["embed_url"], ep["embed_model"], ep.get("api_key_env"),
                                    cache_dir=cfg.cache_dir / "embeddings",
                                    timeout=cfg.concurrency["timeout_s"])


def _chat(cfg: Config) -> ChatClient:
    ep, cc = cfg.endpoints, cfg.concurrency
    return ChatClient.from_env(ep["chat_url"], ep["chat_model"], ep.get("api_key_env"),
                               timeout=cc["timeout_s"], max_retries=cc["max_retries"],
                               backoff_base=cc["backoff_base_s"])


# --------------------------------------------------------------------------


def cmd_ingest(cfg: Config, out=None) -> dict:
    started = _now()
    repo = cfg.require_path("dataset", "repo_dir", "dir")
    out_dir = Path(out) if out else cfg.cache_dir
    result = load_cve_repo(repo)
    manifest = write_snapshot(result, repo, out_dir)
    _write_timing(out_dir / "manifest.json", started)
    print(json.dumps(result.summary(), indent=2, sort_keys=True))
    return manifest


def cmd_score(vector_string: str) -> dict:
    v = parse_vector(vector_string)
    b = base_score(v)
    out = {"vector": str(v), "base_score": b.base, "impact": b.impact,
           "exploitability": b.exploitability, "iss": b.iss}
    print(json.dumps(out, indent=2))
    return out


def cmd_train(cfg: Config, out=None) -> Path:
    started = _now()
    dataset = _dataset_path(cfg)
    records = load_dataset(dataset)
    split = make_splits(records, cfg.dataset["split_seed"], cfg.dataset["k_vanilla"])
    mode = cfg.classifier["features"]
    enriched = _load_enriched(cfg, split.train) if mode == "desc+cwe" else enrich(split.train, {})[0]
    embedder = _embedder(cfg)
    try:
        X, layout = build_feature_matrix(enriched, mode, embedder)
    finally:
        embedder.close()
    model = CvssEmbeddingClassifier(SoftmaxRegression(**cfg.hyperparams))
    model.fit(X, [r.vector for r in split.train])
    manifest = {
        "dataset_sha256": file_sha256(dataset),
        "train_fingerprint": record_fingerprint(split.train),
        "n_train": len(split.train),
        "split_seed": split.seed,
        "hyperparams": cfg.hyperparams,
        "feature_combination": "concatenated segments" if mode == "desc+cwe" else "single segment",
        "degenerate_components": sorted(c for c, e in model.estimators_.items() if e.degenerate_),
    }
    bundle = ModelBundle(model, layout, cfg.endpoints["embed_model"], mode, manifest)
    path = Path(out) if out else cfg.cache_dir / "bundle.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    bundle.save(path)
    _write_timing(path, started)
    print(f"trained 8 classifiers on {len(split.train)} records -> {path}")
    return path


def _select(cfg: Config, records, split_name: str):
    split = make_splits(records, cfg.dataset["split_seed"], cfg.dataset["k_vanilla"])
    return {"test": split.test, "vanilla": split.vanilla_test, "all": records}[split_name]


def cmd_predict(cfg: Config, mode: str, variant: str | None = None, split_name: str | None = None,
                out=None, bundle_path=None) -> Path:
    started = _now()
    if mode not in MODES:
        raise UsageError(f"--mode must be one of {MODES}")
    variant = PromptVariant.parse(variant or cfg.prompts["variant"])
    if mode != "vanilla" and variant.kind == "direct-score":
        raise UsageError("the direct-score variant only applies to --mode vanilla")
    split_name = split_name or DEFAULT_SPLIT[mode]
    dataset = _dataset_path(cfg)
    records = _select(cfg, load_dataset(dataset), split_name)
    enriched = _load_enriched(cfg, records)
    out = Path(out) if out else cfg.cache_dir / f"predictions-{mode}.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)

    bundle = None
    if mode in ("embedding", "hybrid"):
        bundle_path = Path(bundle_path) if bundle_path else cfg.cache_dir / "bundle.json"
        if not bundle_path.exists():
            raise IngestError(f"model bundle {bundle_path} not found; run `cvss-predict train`")
        bundle = ModelBundle.load(bundle_path)

    llm_preds = emb_preds = None
    rows: list[dict]
    if mode in ("vanilla", "hybrid"):
        fewshot = (FewShotSet.load(cfg.prompts["fewshot_path"])
                   if variant.kind == "few-shot" else None)
        templates = (TemplateSet(cfg.prompts["template_dir"])
                     if cfg.prompts.get("template_dir") else None)
        with _chat(cfg) as client:
            predictor = VanillaPredictor(client, variant, fewshot, templates,
                                         cfg.concurrency["max_in_flight"])
            if variant.kind == "direct-score":
                scores = predictor.predict_scores(enriched)
            else:
                llm_preds = predictor.predict(enriched)
            predictor.write_audit(out.with_name("responses.jsonl"))
        if predictor.errors_:
            logger.warning("%d chat queries failed; see responses.jsonl", len(predictor.errors_))
    if bundle is not None:
        embedder = EmbeddingClient.from_env(
            cfg.endpoints["embed_url"], bundle.embed_model, cfg.endpoints.get("api_key_env"),
            cache_dir=cfg.cache_dir / "embeddings", timeout=cfg.concurrency["timeout_s"])
        try:
            X, layout = build_feature_matrix(enriched, bundle.feature_mode, embedder)
        finally:
            embedder.close()
        if layout != bundle.layout:
            raise DimensionMismatch(f"feature layout {layout} does not match bundle {bundle.layout}")
        emb_preds = predict_embeddings(bundle, [r.id for r in enriched], X)

    if variant.kind == "direct-score":
        rows = [s.to_json() for s in scores]
    elif mode == "vanilla":
        rows = [p.to_json() for p in llm_preds]
    elif mode == "embedding":
        rows = [p.to_json() for p in emb_preds]
    else:
        rows = [route(lp, ep, cfg.routing, cfg.eval["fallback"]).to_json()
                for lp, ep in zip(llm_preds, emb_preds)]
    write_jsonl(rows, out)
    meta = {
        "predictor": mode if mode != "vanilla" else f"vanilla:{cfg.endpoints['chat_model']}",
        "mode": mode,
        "variant": variant.name if mode != "embedding" else None,
        "split": split_name,
        "chat_model": cfg.endpoints["chat_model"] if mode != "embedding" else None,
        "embed_model": bundle.embed_model if bundle else None,
        "routing": cfg.routing if mode == "hybrid" else None,
        "fallback": cfg.eval["fallback"] if mode == "hybrid" else None,
        "dataset_sha256": file_sha256(dataset),
    }
    out.with_name(out.name + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_timing(out, started)
    print(f"wrote {len(rows)} predictions -> {out}")
    return out


def cmd_eval(cfg: Config, predictions, formats=None, out=None) -> dict:
    started = _now()
    predictions = Path(predictions)
    if not predictions.exists():
        raise ConfigError(f"predictions file not found: {predictions}")
    dataset = _dataset_path(cfg)
    records = load_dataset(dataset)
    by_id = {r.id: r for r in records}
    rows = read_jsonl(predictions)
    missing = [row["cve_id"] for row in rows if row["cve_id"] not in by_id]
    if missing:
        raise LengthMismatch(f"{len(missing)} predictions have no ground truth "
                             f"(first: {missing[0]})")
    truths = [by_id[row["cve_id"]] for row in rows]
    meta_path = predictions.with_name(predictions.name + ".meta.json")
    metadata = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    metadata["predictions_sha256"] = file_sha256(predictions)
    policy = cfg.eval["abstain_policy"]

    if rows and "score" in rows[0] and "components" not in rows[0]:
        scores = [ScorePrediction.from_json(r) for r in rows]
        report = evaluate(None, None, policy, [s.score for s in scores],
                          [t.base_score_truth for t in truths], metadata)
        preds = None
    else:
        preds = [PredictedVector.from_json(r) for r in rows]
        report = evaluate(preds, [t.vector for t in truths], policy,
                          [p.base_score for p in preds], [t.base_score_truth for t in truths],
                          metadata)

    out_dir = Path(out) if out else cfg.cache_dir / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [emit_report(report, fmt, out_dir / f"report.{fmt}")
               for fmt in (formats or cfg.eval["formats"])]
    if preds is not None:
        emit_plotdata({metadata.get("predictor", "predictor"): report}, out_dir / "plotdata.csv")
        subsets = _subset_accuracy(cfg, records, preds, by_id, policy)
        (out_dir / "report.subsets.json").write_text(json.dumps(subsets, indent=2, sort_keys=True)
                                                     + "\n")
    _write_timing(out_dir / "report", started)
    summary = {"mean_accuracy": report.mean_accuracy, "n": report.n,
               "score_metrics": report.score_metrics, "files": [str(p) for p in written]}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _subset_accuracy(cfg, records, preds, by_id, policy) -> dict:
    """Mean accuracy restricted to the embedding test split, the vanilla set and their overlap."""
    split = make_splits(records, cfg.dataset["split_seed"], cfg.dataset["k_vanilla"])
    test_ids = {r.id for r in split.test}
    vanilla_ids = {r.id for r in split.vanilla_test}
    subsets = {"test": test_ids, "vanilla": vanilla_ids, "intersection": test_ids & vanilla_ids}
    out = {}
    for name, ids in subsets.items():
        chosen = [p for p in preds if p.cve_id in ids]
        if chosen:
            acc = component_accuracy(chosen, [by_id[p.cve_id].vector for p in chosen], policy)
            out[name] = {"n": len(chosen), "mean_accuracy": mean_accuracy(acc),
                         "per_component_accuracy": acc}
        else:
            out[name] = {"n": 0, "mean_accuracy": None, "per_component_accuracy": None}
    return out


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvss-predict",
                                     description="Predict and evaluate CVSS v3.1 vectors for CVEs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="YAML configuration file")
        p.add_argument("--out", help="output file or directory")
        return p

    with_config(sub.add_parser("ingest", help="load a cvelistV5 snapshot into the dataset cache"))
    p = sub.add_parser("score", help="print the base score breakdown of a vector")
    p.add_argument("vector")
    with_config(sub.add_parser("train", help="train the per-component embedding classifiers"))
    p = with_config(sub.add_parser("predict", help="predict vectors or scores"))
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--variant", help="base, few-shot, cwe, per-component or direct-score")
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--bundle", help="model bundle (defaults to <cache_dir>/bundle.json)")
    p = with_config(sub.add_parser("eval", help="score a predictions file against ground truth"))
    p.add_argument("predictions")
    p.add_argument("--format", action="append", choices=("json", "csv", "md"),
                   help="report format (repeatable; defaults to eval.formats)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "score":
            cmd_score(args.vector)
            return EXIT_OK
        cfg = load_config(args.config)
        if args.command == "ingest":
            cmd_ingest(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.out)
        elif args.command == "predict":
            cmd_predict(cfg, args.mode, args.variant, args.split, args.out, args.bundle)
        elif args.command == "eval":
            cmd_eval(cfg, args.predictions, args.format, args.out)
    except (MalformedVector, ConfigError, UsageError, LengthMismatch, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestError, LlmError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
