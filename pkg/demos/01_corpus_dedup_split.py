"""Corpus handling: validation, near-duplicate collapse, balanced splits.

Run with: python demos/01_corpus_dedup_split.py
"""

import tempfile
from pathlib import Path

import numpy as np

from coapipe import (
    DEFAULT_TAXONOMY,
    ModerationSample,
    SampleSet,
    dedup,
    load_dataset,
    save_dataset,
    split_balanced,
)

# ---------------------------------------------------------------------
# A tiny corpus: four samples per category, two of them near-duplicates.

print("categories:", ", ".join(DEFAULT_TAXONOMY.categories))

samples = []
for cat in DEFAULT_TAXONOMY.categories:
    for i in range(4):
        samples.append(
            ModerationSample(
                id=f"{cat.lower()}-{i}",
                text=f"a {cat.lower()} flavoured statement number {i}",
                label=cat,
                split="unassigned",
                source="demo",
            )
        )
corpus = SampleSet(DEFAULT_TAXONOMY, samples)
print(f"corpus size: {len(corpus)}")

# round-trip through the JSON-lines format
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "corpus.jsonl"
    save_dataset(corpus, path)
    reloaded = load_dataset(path, DEFAULT_TAXONOMY)
    print(f"round-trip equal: {reloaded.samples == corpus.samples}")

# ---------------------------------------------------------------------
# Dedup: unit embeddings where sample 0 and 1 of each category nearly
# coincide. Greedy clustering keeps each cluster's medoid.

rng = np.random.default_rng(0)
embeddings = {}
for cat in DEFAULT_TAXONOMY.categories:
    base = rng.standard_normal(8)
    base /= np.linalg.norm(base)
    for i in range(4):
        if i == 1:  # near-duplicate of sample 0
            vec = base + 0.01 * rng.standard_normal(8)
        elif i == 0:
            vec = base.copy()
        else:
            vec = rng.standard_normal(8)
        embeddings[f"{cat.lower()}-{i}"] = vec / np.linalg.norm(vec)

kept = dedup(corpus, embeddings, threshold=0.92)
print(f"dedup at 0.92: {len(corpus)} -> {len(kept)} samples")
removed = sorted(set(corpus.ids()) - set(kept.ids()))
print("removed near-duplicates:", ", ".join(removed))

# ---------------------------------------------------------------------
# Balanced split: two train and one test sample per category, seeded.

train, test = split_balanced(kept, train_per_cat=2, test_per_cat=1, seed=7)
print(f"train size: {len(train)}, test size: {len(test)}")
again, _ = split_balanced(kept, train_per_cat=2, test_per_cat=1, seed=7)
print(f"same seed, same membership: {train.ids() == again.ids()}")
