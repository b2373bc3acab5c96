"""Trainer-ready exports: SFT records and preference pairs.

The SFT file pairs a plain (reference-free) prompt with the refined chain,
so the trained model learns to produce analogical reasoning without any
retrieved context at inference. Preference pairs contrast a chain generated
with retrieved reference cases (chosen) against one generated from the bare
input (rejected); the stored prompt is the bare-input prompt for the same
reason. Both files are JSON lines with fixed key order so exports are
byte-stable.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .coagen import (
    AugmentedSample,
    build_generation_prompt,
    parse_chain,
    render_chain,
)
from .corpus import ModerationSample, SampleSet, Taxonomy
from .errors import (
    AmbiguousLabelError,
    InvariantViolationError,
    MalformedChainError,
    PipelineError,
    UnknownLabelError,
)
from .fileio import read_jsonl, sha256_file, write_jsonl
from .gateway import BackendSpec, Gateway, SamplingParams
from .retrieval import RetrievalIndex, normalize, query_topk


@dataclass(frozen=True)
class SftRecord:
    prompt: str
    completion: str
    sample_id: str
    category: str


@dataclass(frozen=True)
class PairSideMeta:
    had_references: bool
    parsed_label: str | None
    completion_tokens: int


@dataclass(frozen=True)
class PreferencePair:
    prompt: str
    chosen: str
    rejected: str
    sample_id: str
    chosen_meta: PairSideMeta
    rejected_meta: PairSideMeta


def sft_record(aug: AugmentedSample, taxonomy: Taxonomy) -> SftRecord:
    prompt = build_generation_prompt(aug.sample, [], taxonomy).render()
    completion = render_chain(aug.chain)
    return SftRecord(
        prompt=prompt,
        completion=completion,
        sample_id=aug.sample.id,
        category=aug.sample.label,
    )


def export_sft(
    augmented: Sequence[AugmentedSample],
    path: str | Path,
    taxonomy: Taxonomy,
) -> dict:
    """Write one SFT record per accepted sample; returns the manifest.

    Every completion must parse back to the gold label (the acceptance gate
    re-checked at the export boundary); a violation aborts the export.
    """
    records = []
    for aug in augmented:
        if not aug.accepted:
            raise InvariantViolationError(
                f"sample {aug.sample.id!r} has status {aug.status!r}; only "
                "accepted samples may be exported"
            )
        record = sft_record(aug, taxonomy)
        try:
            parsed = parse_chain(record.completion, taxonomy)
        except PipelineError as exc:
            raise InvariantViolationError(
                f"completion for {aug.sample.id!r} does not parse back: {exc}"
            ) from exc
        if parsed.parsed_label != aug.sample.label:
            raise InvariantViolationError(
                f"completion for {aug.sample.id!r} parses to "
                f"{parsed.parsed_label!r}, expected {aug.sample.label!r}"
            )
        records.append(
            {
                "prompt": record.prompt,
                "completion": record.completion,
                "meta": {"sample_id": record.sample_id, "category": record.category},
            }
        )
    write_jsonl(path, records)
    return {"records": len(records), "sha256": sha256_file(path), "path": str(path)}


def load_sft_file(path: str | Path) -> list[SftRecord]:
    records = []
    for _, rec in read_jsonl(path):
        meta = rec.get("meta", {})
        records.append(
            SftRecord(
                prompt=rec["prompt"],
                completion=rec["completion"],
                sample_id=meta.get("sample_id", ""),
                category=meta.get("category", ""),
            )
        )
    return records


@dataclass
class PairBuildResult:
    pairs: list[PreferencePair] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)


def _try_parse(text: str, taxonomy: Taxonomy) -> str | None:
    try:
        return parse_chain(text, taxonomy).parsed_label
    except (MalformedChainError, UnknownLabelError, AmbiguousLabelError):
        return None


def build_preference_pairs(
    samples: SampleSet,
    index: RetrievalIndex,
    embeddings: Mapping[str, np.ndarray],
    sft_backend: BackendSpec,
    params: SamplingParams,
    k: int = 32,
    *,
    gateway: Gateway,
    exclude_self: bool = True,
    include_ref_labels: bool = True,
    same_label_only: bool = False,
    strict: bool = False,
    fail_fast: bool = False,
    workers: int = 1,
) -> PairBuildResult:
    """Two generations per sample: with retrieved references, and without.

    A pair is kept when the with-references chain parses to the gold label
    (strict mode additionally requires the plain chain to be wrong). The
    stored prompt is always the plain variant. Skips and per-sample errors
    are recorded in the manifest.
    """
    taxonomy = samples.taxonomy
    ordered = sorted(samples, key=lambda s: s.id)
    skipped: list[dict] = []
    errors: list[dict] = []
    kept: dict[str, PreferencePair] = {}

    def process(sample: ModerationSample) -> tuple[PreferencePair | None, str]:
        query = normalize(np.asarray(embeddings[sample.id], dtype=np.float64))
        refs = query_topk(
            index,
            query,
            k,
            exclude_id=sample.id if exclude_self else None,
            require_label=sample.label if same_label_only else None,
        )
        with_refs_prompt = build_generation_prompt(
            sample, refs, taxonomy, include_ref_labels
        )
        plain_prompt = build_generation_prompt(sample, [], taxonomy)
        chosen = gateway.chat_complete(sft_backend, with_refs_prompt.messages(), params)
        rejected = gateway.chat_complete(sft_backend, plain_prompt.messages(), params)
        chosen_label = _try_parse(chosen.text, taxonomy)
        rejected_label = _try_parse(rejected.text, taxonomy)
        if chosen_label != sample.label:
            return None, f"chosen label {chosen_label!r} != gold {sample.label!r}"
        if strict and rejected_label == sample.label:
            return None, "strict mode: rejected chain also has the gold label"
        pair = PreferencePair(
            prompt=plain_prompt.render(),
            chosen=chosen.text,
            rejected=rejected.text,
            sample_id=sample.id,
            chosen_meta=PairSideMeta(True, chosen_label, chosen.completion_tokens),
            rejected_meta=PairSideMeta(False, rejected_label, rejected.completion_tokens),
        )
        return pair, ""

    def run_one(sample: ModerationSample):
        try:
            pair, reason = process(sample)
            return sample.id, pair, reason, None
        except PipelineError as exc:
            return sample.id, None, "", exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, ordered))
    else:
        results = [run_one(s) for s in ordered]

    for sample_id, pair, reason, exc in results:
        if exc is not None:
            if fail_fast:
                raise exc
            errors.append(
                {"id": sample_id, "error": type(exc).__name__, "detail": str(exc)}
            )
        elif pair is None:
            skipped.append({"id": sample_id, "reason": reason})
        else:
            kept[sample_id] = pair

    pairs = [kept[sid] for sid in sorted(kept)]
    manifest = {
        "pairs": len(pairs),
        "skipped": skipped,
        "errors": errors,
        "config": {
            "k": k,
            "exclude_self": exclude_self,
            "include_ref_labels": include_ref_labels,
            "strict": strict,
            "backend": sft_backend.name,
        },
    }
    return PairBuildResult(pairs=pairs, manifest=manifest)


def _pair_record(pair: PreferencePair) -> dict:
    return {
        "prompt": pair.prompt,
        "chosen": pair.chosen,
        "rejected": pair.rejected,
        "meta": {
            "sample_id": pair.sample_id,
            "chosen": {
                "had_references": pair.chosen_meta.had_references,
                "parsed_label": pair.chosen_meta.parsed_label,
                "completion_tokens": pair.chosen_meta.completion_tokens,
            },
            "rejected": {
                "had_references": pair.rejected_meta.had_references,
                "parsed_label": pair.rejected_meta.parsed_label,
                "completion_tokens": pair.rejected_meta.completion_tokens,
            },
        },
    }


def export_dpo(pairs: Sequence[PreferencePair], path: str | Path) -> dict:
    """Write preference pairs as JSON lines; empty exports are valid."""
    write_jsonl(path, (_pair_record(p) for p in pairs))
    return {"records": len(pairs), "sha256": sha256_file(path), "path": str(path)}


def load_dpo_file(path: str | Path) -> list[PreferencePair]:
    pairs = []
    for _, rec in read_jsonl(path):
        meta = rec.get("meta", {})
        chosen_meta = meta.get("chosen", {})
        rejected_meta = meta.get("rejected", {})
        pairs.append(
            PreferencePair(
                prompt=rec["prompt"],
                chosen=rec["chosen"],
                rejected=rec["rejected"],
                sample_id=meta.get("sample_id", ""),
                chosen_meta=PairSideMeta(
                    had_references=bool(chosen_meta.get("had_references", True)),
                    parsed_label=chosen_meta.get("parsed_label"),
                    completion_tokens=int(chosen_meta.get("completion_tokens", 0)),
                ),
                rejected_meta=PairSideMeta(
                    had_references=bool(rejected_meta.get("had_references", False)),
                    parsed_label=rejected_meta.get("parsed_label"),
                    completion_tokens=int(rejected_meta.get("completion_tokens", 0)),
                ),
            )
        )
    return pairs
