"""Exact top-k cosine retrieval over unit embeddings, with persistence.

Run with: python demos/02_retrieval.py
"""

import tempfile
from pathlib import Path

from coapipe import DEFAULT_TAXONOMY, ModerationSample, SampleSet
from coapipe.gateway import mock_embedding
from coapipe.retrieval import build_index, load_index, normalize, query_topk, save_index

# ---------------------------------------------------------------------
# Index a small corpus with the deterministic mock embedder.

cats = DEFAULT_TAXONOMY.categories
samples = SampleSet(
    DEFAULT_TAXONOMY,
    [
        ModerationSample(
            id=f"s{i:02d}",
            text=f"statement {i} with a {cats[i % 6].lower()} slant",
            label=cats[i % 6],
            split="train",
        )
        for i in range(24)
    ],
)
embeddings = {s.id: mock_embedding(s.text, seed=13, dim=16) for s in samples}
index = build_index(samples, embeddings)
print(f"index: {len(index)} entries, dim {index.dim}")

# ---------------------------------------------------------------------
# Query: nearest neighbours of sample s05, excluding itself (bootstrap
# retrieval never lets a sample cite itself as precedent).

query = index.matrix64[5]
hits = query_topk(index, query, k=5, exclude_id="s05")
print("top-5 neighbours of s05 (self excluded):")
for rank, hit in enumerate(hits, start=1):
    print(f"  {rank}. {hit.sample_id}  [{hit.label}]  score={hit.score:+.4f}")

# sanity: the raw normalize helper agrees with what the index stores
print("normalize((3,4)) ->", normalize([3.0, 4.0]))

# ---------------------------------------------------------------------
# Persistence is bit-exact: save, reload, compare scores.

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "demo.index"
    save_index(index, path)
    reloaded = load_index(path, samples=samples)
    again = query_topk(reloaded, query, k=5, exclude_id="s05")
    same = [(h.sample_id, h.score) for h in hits] == [
        (h.sample_id, h.score) for h in again
    ]
    print(f"reloaded index reproduces scores exactly: {same}")
    print(f"on-disk size: {path.stat().st_size} bytes for {len(index)} vectors")
