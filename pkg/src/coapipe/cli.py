"""Command-line pipeline driver.

Each subcommand reads its declared inputs, writes its artifacts atomically
under the configured output directory (plus a manifest and a config echo),
and prints a one-line summary. Stages compose: running the whole chain in
one go or stage-by-stage produces identical bytes.

Exit codes: 0 success, 1 validation/config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import coagen, dpo, exporter, metrics, retrieval
from .config import PipelineConfig, load_config
from .corpus import (
    ModerationSample,
    SampleSet,
    Taxonomy,
    dedup as dedup_samples,
    load_dataset,
    save_dataset,
    split_balanced,
)
from .errors import (
    ConfigInvalidError,
    PipelineError,
    RuntimeStageError,
    ValidationError,
)
from .fileio import read_json, read_jsonl, sha256_file, write_json, write_jsonl
from .gateway import Gateway

SUBCOMMANDS = (
    "ingest",
    "dedup",
    "index",
    "generate",
    "refine",
    "export-sft",
    "pairs",
    "export-dpo",
    "train-toy",
    "gradcheck",
    "evaluate",
    "report",
)


def _out(cfg: PipelineConfig, *parts: str) -> Path:
    return Path(cfg.output_dir).joinpath(*parts)


def _echo_config(cfg: PipelineConfig) -> None:
    write_json(_out(cfg, "run", "config_echo.json"), cfg.raw)


def _manifest_path(artifact: Path) -> Path:
    return artifact.with_name(artifact.name + ".manifest.json")


def _write_manifest(artifact: Path, manifest: dict) -> None:
    manifest = dict(manifest)
    manifest.setdefault("sha256", sha256_file(artifact))
    manifest.setdefault("path", str(artifact))
    write_json(_manifest_path(artifact), manifest)


def _usage_dict(gateway: Gateway) -> dict:
    return {
        "prompt_tokens": gateway.usage.prompt_tokens,
        "completion_tokens": gateway.usage.completion_tokens,
        "calls": gateway.usage.calls,
    }


def _load_train(cfg: PipelineConfig, override: str | None) -> SampleSet:
    path = Path(override) if override else _out(cfg, "corpus", "train.jsonl")
    return load_dataset(path, cfg.taxonomy)


def _index_embeddings(index: retrieval.RetrievalIndex) -> dict[str, np.ndarray]:
    """Query vectors for bootstrap come from the index itself."""
    return {sid: index.matrix64[i] for i, sid in enumerate(index.ids)}


# -- stages ------------------------------------------------------------


def cmd_ingest(cfg: PipelineConfig, args) -> str:
    dataset = load_dataset(cfg.dataset_path, cfg.taxonomy)
    if cfg.split is not None:
        train, test = split_balanced(
            dataset, cfg.split.train_per_cat, cfg.split.test_per_cat, cfg.split.seed
        )
    else:
        train = SampleSet(cfg.taxonomy, [s for s in dataset if s.split == "train"])
        test = SampleSet(cfg.taxonomy, [s for s in dataset if s.split == "test"])
    train_path = _out(cfg, "corpus", "train.jsonl")
    test_path = _out(cfg, "corpus", "test.jsonl")
    save_dataset(train, train_path)
    save_dataset(test, test_path)
    per_cat = {
        c: {
            "train": sum(1 for s in train if s.label == c),
            "test": sum(1 for s in test if s.label == c),
        }
        for c in cfg.taxonomy.categories
    }
    _write_manifest(
        train_path,
        {"records": len(train), "test_records": len(test), "per_category": per_cat},
    )
    return f"ingest: {len(dataset)} samples -> {len(train)} train / {len(test)} test"


def cmd_dedup(cfg: PipelineConfig, args, gateway: Gateway) -> str:
    train = _load_train(cfg, args.input)
    embedder = cfg.backend("embedder")
    vectors = gateway.embed(embedder, [s.text for s in train])
    embeddings = {
        s.id: retrieval.normalize(v) for s, v in zip(train, vectors)
    }
    kept = dedup_samples(train, embeddings, cfg.dedup_threshold)
    out_path = _out(cfg, "corpus", "train.dedup.jsonl")
    save_dataset(kept, out_path)
    _write_manifest(
        out_path,
        {
            "records": len(kept),
            "removed": len(train) - len(kept),
            "threshold": cfg.dedup_threshold,
            "usage": _usage_dict(gateway),
        },
    )
    return f"dedup: {len(train)} -> {len(kept)} samples (threshold {cfg.dedup_threshold})"


def cmd_index(cfg: PipelineConfig, args, gateway: Gateway) -> str:
    train = _load_train(cfg, args.input)
    embedder = cfg.backend("embedder")
    vectors = gateway.embed(embedder, [s.text for s in train])
    embeddings = {s.id: v for s, v in zip(train, vectors)}
    index = retrieval.build_index(train, embeddings)
    out_path = _out(cfg, "index", "train.index")
    retrieval.save_index(index, out_path)
    _write_manifest(
        out_path,
        {"entries": len(index), "dim": index.dim, "usage": _usage_dict(gateway)},
    )
    return f"index: {len(index)} entries, dim {index.dim}"


def cmd_generate(cfg: PipelineConfig, args, gateway: Gateway) -> str:
    train = _load_train(cfg, args.input)
    index = retrieval.load_index(_out(cfg, "index", "train.index"), samples=train)
    embeddings = _index_embeddings(index)
    backend = cfg.backend("generation")
    out_path = _out(cfg, "chains", "chains.jsonl")

    existing: dict[str, dict] = {}
    if args.resume and out_path.exists():
        existing = {rec["sample_id"]: rec for _, rec in read_jsonl(out_path)}

    records: dict[str, dict] = {}
    errors: list[dict] = []
    for sample in sorted(train, key=lambda s: s.id):
        prior = existing.get(sample.id)
        if prior is not None and prior.get("status") == "ok":
            records[sample.id] = prior
            continue
        # normalize exactly as the pair-building stage does, so both stages
        # rank identically down to the last bit
        refs = retrieval.query_topk(
            index,
            retrieval.normalize(embeddings[sample.id]),
            cfg.retrieval_k,
            exclude_id=sample.id if cfg.exclude_self else None,
            require_label=sample.label if cfg.same_label_only else None,
        )
        record: dict = {
            "sample_id": sample.id,
            "ref_ids": [r.sample_id for r in refs],
        }
        try:
            chain = coagen.generate_chain(
                sample,
                refs,
                backend,
                cfg.sampling,
                gateway=gateway,
                taxonomy=cfg.taxonomy,
                include_ref_labels=cfg.include_ref_labels,
            )
            record.update(
                status="ok",
                raw_text=chain.raw_text,
                parsed={
                    "analysis_process": chain.analysis_process,
                    "harmful_content": chain.harmful_content,
                    "classification_result": chain.classification_result,
                    "parsed_label": chain.parsed_label,
                },
                completion_tokens=chain.completion_tokens,
                matches_gold=chain.parsed_label == sample.label,
                error=None,
            )
        except PipelineError as exc:
            if cfg.fail_fast or args.fail_fast:
                raise
            record.update(
                status="error",
                raw_text=getattr(exc, "raw_text", ""),
                parsed=None,
                completion_tokens=0,
                matches_gold=None,
                error={"type": type(exc).__name__, "detail": str(exc)},
            )
            errors.append({"id": sample.id, "error": type(exc).__name__})
        records[sample.id] = record

    ordered = [records[sid] for sid in sorted(records)]
    write_jsonl(out_path, ordered)
    ok = sum(1 for r in ordered if r["status"] == "ok")
    matched = sum(1 for r in ordered if r.get("matches_gold"))
    _write_manifest(
        out_path,
        {
            "records": len(ordered),
            "ok": ok,
            "matches_gold": matched,
            "errors": errors,
            "config": {
                "k": cfg.retrieval_k,
                "exclude_self": cfg.exclude_self,
                "backend": backend.name,
            },
            "usage": _usage_dict(gateway),
        },
    )
    return f"generate: {ok}/{len(ordered)} chains parsed, {matched} match gold"


def _chain_from_record(record: dict, key: str = "parsed") -> coagen.ReasoningChain:
    parsed = record[key]
    return coagen.ReasoningChain(
        analysis_process=parsed["analysis_process"],
        harmful_content=parsed["harmful_content"],
        classification_result=parsed["classification_result"],
        parsed_label=parsed["parsed_label"],
        raw_text=record["raw_text"],
        completion_tokens=record.get("completion_tokens", 0),
    )


def cmd_refine(cfg: PipelineConfig, args, gateway: Gateway) -> str:
    train = _load_train(cfg, args.input)
    by_id = train.by_id()
    backend = cfg.backend("reflection")
    chains_path = _out(cfg, "chains", "chains.jsonl")
    out_path = _out(cfg, "chains", "augmented.jsonl")

    rows: list[dict] = []
    counters = {
        coagen.ACCEPTED_FIRST_PASS: 0,
        coagen.ACCEPTED_AFTER_REFLECTION: 0,
        coagen.DROPPED: 0,
        "errors": 0,
    }
    for _, record in read_jsonl(chains_path):
        sample = by_id.get(record["sample_id"])
        if sample is None:
            raise ValidationError(
                f"chain record {record['sample_id']!r} has no corpus sample"
            )
        if record["status"] != "ok":
            counters["errors"] += 1
            rows.append(
                {
                    "sample_id": sample.id,
                    "text": sample.text,
                    "label": sample.label,
                    "status": "error",
                    "refinement_rounds": 0,
                    "chain": None,
                    "raw_text": record.get("raw_text", ""),
                    "completion_tokens": 0,
                }
            )
            continue
        chain = _chain_from_record(record)
        if chain.parsed_label == sample.label:
            aug = coagen.AugmentedSample(sample, chain, 0, coagen.ACCEPTED_FIRST_PASS)
        else:
            refs = [
                retrieval.RetrievedCase(
                    sample_id=rid,
                    text=by_id[rid].text,
                    label=by_id[rid].label,
                    score=0.0,
                )
                for rid in record["ref_ids"]
            ]
            aug = coagen.refine_chain(
                sample,
                refs,
                chain,
                backend,
                cfg.sampling,
                gateway=gateway,
                taxonomy=cfg.taxonomy,
                max_rounds=cfg.max_rounds,
                include_ref_labels=cfg.include_ref_labels,
            )
        counters[aug.status] += 1
        rows.append(
            {
                "sample_id": sample.id,
                "text": sample.text,
                "label": sample.label,
                "status": aug.status,
                "refinement_rounds": aug.refinement_rounds,
                "chain": {
                    "analysis_process": aug.chain.analysis_process,
                    "harmful_content": aug.chain.harmful_content,
                    "classification_result": aug.chain.classification_result,
                    "parsed_label": aug.chain.parsed_label,
                },
                "raw_text": aug.chain.raw_text,
                "completion_tokens": aug.chain.completion_tokens,
            }
        )

    rows.sort(key=lambda r: r["sample_id"])
    write_jsonl(out_path, rows)
    _write_manifest(
        out_path,
        {
            "records": len(rows),
            "counters": counters,
            "config": {"max_rounds": cfg.max_rounds, "backend": backend.name},
            "usage": _usage_dict(gateway),
        },
    )
    accepted = (
        counters[coagen.ACCEPTED_FIRST_PASS]
        + counters[coagen.ACCEPTED_AFTER_REFLECTION]
    )
    return (
        f"refine: {accepted} accepted "
        f"({counters[coagen.ACCEPTED_AFTER_REFLECTION]} after reflection), "
        f"{counters[coagen.DROPPED]} dropped"
    )


def _augmented_samples(cfg: PipelineConfig) -> list[coagen.AugmentedSample]:
    out: list[coagen.AugmentedSample] = []
    for _, record in read_jsonl(_out(cfg, "chains", "augmented.jsonl")):
        if record["status"] not in (
            coagen.ACCEPTED_FIRST_PASS,
            coagen.ACCEPTED_AFTER_REFLECTION,
        ):
            continue
        sample = ModerationSample(
            id=record["sample_id"], text=record["text"], label=record["label"]
        )
        chain = _chain_from_record(record, key="chain")
        out.append(
            coagen.AugmentedSample(
                sample, chain, record["refinement_rounds"], record["status"]
            )
        )
    return out


def cmd_export_sft(cfg: PipelineConfig, args) -> str:
    accepted = _augmented_samples(cfg)
    out_path = _out(cfg, "export", "sft.jsonl")
    manifest = exporter.export_sft(accepted, out_path, cfg.taxonomy)
    if cfg.sft_trainer:
        manifest["trainer_hints"] = cfg.sft_trainer
    _write_manifest(out_path, manifest)
    return f"export-sft: {manifest['records']} records, sha256 {manifest['sha256'][:12]}"


def cmd_pairs(cfg: PipelineConfig, args, gateway: Gateway) -> str:
    train = _load_train(cfg, args.input)
    index = retrieval.load_index(_out(cfg, "index", "train.index"), samples=train)
    embeddings = _index_embeddings(index)
    backend = cfg.backend("sft")
    out_path = _out(cfg, "pairs", "pairs.jsonl")

    done_ids: set[str] = set()
    existing_pairs: list[exporter.PreferencePair] = []
    prior_skips: list[dict] = []
    if args.resume and out_path.exists():
        existing_pairs = exporter.load_dpo_file(out_path)
        done_ids = {p.sample_id for p in existing_pairs}
        manifest_path = _manifest_path(out_path)
        if manifest_path.exists():
            prior_skips = read_json(manifest_path).get("skipped", [])
            done_ids |= {s["id"] for s in prior_skips}

    todo = SampleSet(cfg.taxonomy, [s for s in train if s.id not in done_ids])
    result = exporter.build_preference_pairs(
        todo,
        index,
        embeddings,
        backend,
        cfg.sampling,
        cfg.retrieval_k,
        gateway=gateway,
        exclude_self=cfg.exclude_self,
        include_ref_labels=cfg.include_ref_labels,
        same_label_only=cfg.same_label_only,
        fail_fast=cfg.fail_fast or args.fail_fast,
        workers=cfg.workers,
    )
    all_pairs = sorted(existing_pairs + result.pairs, key=lambda p: p.sample_id)
    manifest = exporter.export_dpo(all_pairs, out_path)
    manifest["skipped"] = sorted(
        prior_skips + result.manifest["skipped"], key=lambda s: s["id"]
    )
    manifest["errors"] = result.manifest["errors"]
    manifest["config"] = result.manifest["config"]
    manifest["usage"] = _usage_dict(gateway)
    _write_manifest(out_path, manifest)
    return (
        f"pairs: {len(all_pairs)} kept, {len(manifest['skipped'])} skipped, "
        f"{len(manifest['errors'])} errors"
    )


def cmd_export_dpo(cfg: PipelineConfig, args) -> str:
    pairs = exporter.load_dpo_file(_out(cfg, "pairs", "pairs.jsonl"))
    out_path = _out(cfg, "export", "dpo.jsonl")
    manifest = exporter.export_dpo(pairs, out_path)
    manifest["trainer_hints"] = {
        "beta": cfg.dpo.beta,
        "learning_rate": cfg.dpo.learning_rate,
        "epochs": cfg.dpo.epochs,
    }
    _write_manifest(out_path, manifest)
    return f"export-dpo: {manifest['records']} pairs, sha256 {manifest['sha256'][:12]}"


def cmd_train_toy(cfg: PipelineConfig, args) -> str:
    spec = cfg.dpo
    if spec.pairs_path:
        pairs = dpo.load_toy_pairs(spec.pairs_path)
    else:
        pairs = dpo.synth_separable_pairs(
            spec.n_synthetic_pairs, spec.vocab_size, seed=cfg.seed
        )
        dpo.save_toy_pairs(pairs, _out(cfg, "toy", "pairs.jsonl"))
    init = dpo.ToyPolicy.uniform(spec.vocab_size).freeze_reference()
    config = dpo.DpoConfig(
        beta=spec.beta,
        learning_rate=spec.learning_rate,
        epochs=spec.epochs,
        seed=cfg.seed,
    )
    policy, trace = dpo.train_toy_dpo(pairs, config, init)
    trace_path = _out(cfg, "toy", "trace.jsonl")
    dpo.save_trace(trace, trace_path)
    dpo.save_policy(policy, _out(cfg, "toy", "policy.json"))
    summary = {
        "pairs": len(pairs),
        "epochs": config.epochs,
        "beta": config.beta,
        "learning_rate": config.learning_rate,
        "final_mean_loss": trace.mean_loss[-1] if len(trace) else None,
        "final_mean_margin": trace.mean_margin[-1] if len(trace) else None,
        "final_accuracy": trace.preference_accuracy[-1] if len(trace) else None,
    }
    _write_manifest(trace_path, summary)
    if len(trace):
        return (
            f"train-toy: {len(pairs)} pairs, {config.epochs} epochs, "
            f"loss {trace.mean_loss[-1]:.6f}, accuracy {trace.preference_accuracy[-1]:.3f}"
        )
    return f"train-toy: {len(pairs)} pairs, 0 epochs (no updates)"


def cmd_gradcheck(cfg: PipelineConfig, args) -> str:
    rng = np.random.default_rng(cfg.seed)
    worst = 0.0
    worst_case = None
    for trial in range(args.trials):
        vocab = int(rng.integers(2, 9))
        policy = dpo.ToyPolicy(rng.standard_normal((vocab, vocab))).freeze_reference()
        prompt_last = int(rng.integers(0, vocab))
        chosen = rng.integers(0, vocab, size=int(rng.integers(1, 13))).tolist()
        rejected = rng.integers(0, vocab, size=int(rng.integers(1, 13))).tolist()
        pair = (prompt_last, chosen, rejected)
        err = dpo.gradcheck(policy, pair, beta=cfg.dpo.beta, epsilon=args.epsilon)
        batch = [(prompt_last, chosen), (prompt_last, rejected)]
        err = max(err, dpo.gradcheck_sft(policy, batch, epsilon=args.epsilon))
        if err > worst:
            worst, worst_case = err, (policy, pair)
    report_path = _out(cfg, "toy", "gradcheck.txt")
    if worst_case is not None:
        table = dpo.gradcheck_report(
            worst_case[0], worst_case[1], beta=cfg.dpo.beta, epsilon=args.epsilon
        )
    else:
        table = "no trials run"
    header = f"trials: {args.trials}  epsilon: {args.epsilon:g}  max rel err: {worst:.3e}"
    from .fileio import atomic_write_text

    atomic_write_text(report_path, header + "\n\n" + table + "\n")
    if worst > 1e-4:
        raise RuntimeStageError(f"gradcheck failed: max rel err {worst:.3e} > 1e-4")
    return f"gradcheck: {args.trials} trials, max rel err {worst:.3e}"


def _load_predictions(path: Path, taxonomy: Taxonomy):
    labels: dict[str, str] = {}
    texts: dict[str, str] = {}
    tokens: dict[str, int] = {}
    for lineno, record in read_jsonl(path):
        sample_id = str(record.get("id", lineno))
        if "label" in record:
            labels[sample_id] = record["label"]
        elif "text" in record:
            chain = coagen.parse_chain(record["text"], taxonomy)
            labels[sample_id] = chain.parsed_label
        else:
            raise ValidationError(
                f"prediction at line {lineno} has neither 'label' nor 'text'"
            )
        if "text" in record:
            texts[sample_id] = record["text"]
        if "completion_tokens" in record:
            tokens[sample_id] = int(record["completion_tokens"])
    return labels, texts, tokens


def cmd_evaluate(cfg: PipelineConfig, args) -> str:
    gold_set = load_dataset(args.gold, cfg.taxonomy)
    labels, texts, tokens = _load_predictions(Path(args.predictions), cfg.taxonomy)
    missing = [s.id for s in gold_set if s.id not in labels]
    if missing:
        raise ValidationError(
            f"{len(missing)} gold samples lack predictions, first: {missing[:5]}"
        )
    ordered = sorted(gold_set, key=lambda s: s.id)
    golds = [s.label for s in ordered]
    preds = [labels[s.id] for s in ordered]
    report = metrics.f1_report(metrics.confusion(preds, golds, cfg.taxonomy))
    coa = None
    if texts:
        coa = metrics.coa_ratio(
            [texts[s.id] for s in ordered if s.id in texts], cfg.coa_lexicon
        )
    payload = metrics.report_to_dict(report, cfg.taxonomy, coa=coa)
    if tokens:
        payload["completion_tokens"] = [
            tokens[s.id] for s in ordered if s.id in tokens
        ]
    out_path = _out(cfg, "eval", "eval.json")
    write_json(out_path, payload)
    return (
        f"evaluate: n={report.n} macro_f1={report.macro_f1:.4f} "
        f"weighted_f1={report.weighted_f1:.4f}"
    )


def cmd_report(cfg: PipelineConfig, args) -> str:
    eval_path = Path(args.eval) if args.eval else _out(cfg, "eval", "eval.json")
    payload = read_json(eval_path)
    per_category = {
        c: metrics.CategoryMetrics(
            precision=v["precision"],
            recall=v["recall"],
            f1=v["f1"],
            support=v["support"],
            predicted=v["predicted"],
        )
        for c, v in payload["per_category"].items()
    }
    report = metrics.EvalReport(
        per_category=per_category,
        macro_f1=payload["macro_f1"],
        weighted_f1=payload["weighted_f1"],
        n=payload["n"],
    )
    coa = None
    if "coa" in payload:
        coa = metrics.CoaStats(
            n_outputs=payload["coa"]["n_outputs"],
            n_analogical=payload["coa"]["n_analogical"],
        )
    cost = None
    if args.baseline:
        base = read_json(args.baseline)
        if "completion_tokens" in payload and "completion_tokens" in base:
            cost = metrics.token_cost(
                payload["completion_tokens"],
                base["completion_tokens"],
                payload["macro_f1"],
                base["macro_f1"],
                unit="fraction",
            )
    text = metrics.render_text_report(report, cfg.taxonomy, coa=coa, cost=cost)
    from .fileio import atomic_write_text

    atomic_write_text(_out(cfg, "eval", "report.txt"), text)
    write_json(
        _out(cfg, "eval", "report.json"),
        metrics.report_to_dict(report, cfg.taxonomy, coa=coa, cost=cost),
    )
    return f"report: macro_f1={report.macro_f1:.4f} written to eval/report.txt"


# -- argument plumbing -------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coapipe",
        description="Analogical moderation-chain bootstrap pipeline",
    )
    parser.add_argument("--config", required=True, help="TOML config file")
    parser.add_argument("--seed", type=int, default=None, help="override run seed")
    parser.add_argument(
        "--backend-override",
        action="append",
        default=[],
        metavar="ROLE=NAME",
        help="use configured backend NAME for ROLE (repeatable)",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add(name: str, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--fail-fast", action="store_true")
        return p

    add("ingest", help="load, validate and split the raw dataset")
    for name in ("dedup", "index", "generate", "pairs"):
        p = add(name)
        p.add_argument("--input", default=None, help="override the train corpus path")
        if name in ("generate", "pairs"):
            p.add_argument(
                "--resume",
                action="store_true",
                help="skip samples already completed in the existing artifact",
            )
    p = add("refine")
    p.add_argument("--input", default=None)
    add("export-sft")
    add("export-dpo")
    add("train-toy")
    p = add("gradcheck")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p = add("evaluate")
    p.add_argument("--predictions", required=True)
    p.add_argument("--gold", required=True)
    p = add("report")
    p.add_argument("--eval", default=None)
    p.add_argument("--baseline", default=None)
    return parser


def _apply_overrides(cfg: PipelineConfig, overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigInvalidError("--backend-override", f"expected ROLE=NAME, got {item!r}")
        role, name = item.split("=", 1)
        if name not in cfg.backends:
            raise ConfigInvalidError(
                "--backend-override", f"backend {name!r} is not configured"
            )
        cfg.backends[role] = cfg.backends[name]


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        _apply_overrides(cfg, args.backend_override)
        _echo_config(cfg)
        gateway = Gateway(
            max_in_flight=cfg.max_in_flight, rate_limit_per_s=cfg.rate_limit_per_s
        )
        if args.subcommand == "ingest":
            summary = cmd_ingest(cfg, args)
        elif args.subcommand == "dedup":
            summary = cmd_dedup(cfg, args, gateway)
        elif args.subcommand == "index":
            summary = cmd_index(cfg, args, gateway)
        elif args.subcommand == "generate":
            summary = cmd_generate(cfg, args, gateway)
        elif args.subcommand == "refine":
            summary = cmd_refine(cfg, args, gateway)
        elif args.subcommand == "export-sft":
            summary = cmd_export_sft(cfg, args)
        elif args.subcommand == "pairs":
            summary = cmd_pairs(cfg, args, gateway)
        elif args.subcommand == "export-dpo":
            summary = cmd_export_dpo(cfg, args)
        elif args.subcommand == "train-toy":
            summary = cmd_train_toy(cfg, args)
        elif args.subcommand == "gradcheck":
            summary = cmd_gradcheck(cfg, args)
        elif args.subcommand == "evaluate":
            summary = cmd_evaluate(cfg, args)
        elif args.subcommand == "report":
            summary = cmd_report(cfg, args)
        else:  # pragma: no cover - argparse enforces the choice
            raise ValidationError(f"unknown subcommand {args.subcommand!r}")
    except (ConfigInvalidError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(summary)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
