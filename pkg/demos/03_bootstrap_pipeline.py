"""End-to-end bootstrap on mock backends: retrieve, generate, reflect, export.

Every chat response is scripted, keyed by a stable hash of the request, so
the whole run is offline and reproducible. One sample is scripted to be
mislabeled at first pass and corrected by reflection; another stays wrong
and is dropped by the gate.

Run with: python demos/03_bootstrap_pipeline.py
"""

import tempfile
from pathlib import Path

from coapipe import (
    DEFAULT_TAXONOMY,
    BackendSpec,
    Gateway,
    ModerationSample,
    SampleSet,
    SamplingParams,
    augment_dataset,
    build_generation_prompt,
    build_preference_pairs,
    build_reflection_prompt,
    export_dpo,
    export_sft,
    parse_chain,
    request_fingerprint,
)
from coapipe.gateway import mock_embedding
from coapipe.retrieval import build_index, normalize, query_topk

cats = DEFAULT_TAXONOMY.categories
samples = SampleSet(
    DEFAULT_TAXONOMY,
    [
        ModerationSample(f"s{i}", f"demo case {i}, {cats[i % 6].lower()} leaning", cats[i % 6], "train")
        for i in range(12)
    ],
)
embeddings = {s.id: mock_embedding(s.text, seed=3, dim=12) for s in samples}
index = build_index(samples, embeddings)
params = SamplingParams(temperature=0.8)


def chain(label, sid, analogical=True):
    opening = (
        f"Like a similar case in the references, {sid} fits {label}."
        if analogical
        else f"Direct reading of {sid} suggests {label}."
    )
    harm = "none" if label == "Harmless" else "the flagged span"
    return (
        f"Analysis Process: {opening}\n"
        f"Harmful Content: {harm}\n"
        f"Classification Result: {label}"
    )


def wrong(label):
    return cats[(cats.index(label) + 1) % 6]


# ---------------------------------------------------------------------
# Script the mock: s3 is wrong then fixed, s7 stays wrong (will drop).

entries = []
for s in sorted(samples, key=lambda x: x.id):
    refs = query_topk(index, normalize(embeddings[s.id]), 8, exclude_id=s.id)
    gen_prompt = build_generation_prompt(s, refs, DEFAULT_TAXONOMY)
    first_label = wrong(s.label) if s.id in ("s3", "s7") else s.label
    first = chain(first_label, s.id)
    entries.append({"key": request_fingerprint(gen_prompt.messages()), "text": first,
                    "prompt_tokens": 40, "completion_tokens": 25})
    if s.id in ("s3", "s7"):
        prior = parse_chain(first, DEFAULT_TAXONOMY)
        refl = build_reflection_prompt(s, refs, prior, DEFAULT_TAXONOMY)
        second_label = s.label if s.id == "s3" else wrong(s.label)
        entries.append({"key": request_fingerprint(refl.messages()),
                        "text": chain(second_label, s.id),
                        "prompt_tokens": 60, "completion_tokens": 25})
    # preference-pair stage responses: with references vs without
    plain_prompt = build_generation_prompt(s, [], DEFAULT_TAXONOMY)
    entries.append({"key": request_fingerprint(gen_prompt.messages()),
                    "text": chain(s.label, s.id, analogical=True),
                    "prompt_tokens": 40, "completion_tokens": 30})
    entries.append({"key": request_fingerprint(plain_prompt.messages()),
                    "text": chain(s.label, s.id, analogical=False),
                    "prompt_tokens": 20, "completion_tokens": 18})

backend = BackendSpec(name="demo", kind="mock_chat", script=tuple(entries))
gateway = Gateway()

# ---------------------------------------------------------------------
# Bootstrap: generate, gate on label agreement, reflect on mismatches.

result = augment_dataset(
    samples, index, embeddings, backend, params,
    gateway=gateway, k=8, max_rounds=1,
)
print("bootstrap counters:", result.manifest["counters"])
accepted = [a for a in result.samples if a.accepted]
print(f"accepted {len(accepted)} of {len(samples)} (s7 dropped by the gate)")

# ---------------------------------------------------------------------
# Exports: SFT records and preference pairs, byte-stable JSON lines.

with tempfile.TemporaryDirectory() as tmp:
    sft_manifest = export_sft(accepted, Path(tmp) / "sft.jsonl", DEFAULT_TAXONOMY)
    print(f"sft.jsonl: {sft_manifest['records']} records, sha256 {sft_manifest['sha256'][:12]}")

    pair_result = build_preference_pairs(
        samples, index, embeddings, backend, params, 8, gateway=gateway
    )
    dpo_manifest = export_dpo(pair_result.pairs, Path(tmp) / "dpo.jsonl")
    print(f"dpo.jsonl: {dpo_manifest['records']} pairs, sha256 {dpo_manifest['sha256'][:12]}")

print(f"total mock tokens consumed: {gateway.usage.total_tokens}")
