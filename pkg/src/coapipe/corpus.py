"""Labeled moderation corpora: loading, validation, balanced splits, dedup.

A corpus is a list of (text, label) samples under a fixed category taxonomy.
Files are JSON lines, one object per line, with keys id, text, label, split,
source; unknown keys are preserved on round-trip.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import (
    DimensionMismatchError,
    DuplicateIdError,
    EmptyTextError,
    InsufficientSamplesError,
    MalformedRecordError,
    MissingEmbeddingError,
    UnknownLabelError,
    ValidationError,
)
from .fileio import read_jsonl, write_jsonl

SPLITS = ("train", "test", "unassigned")

KNOWN_KEYS = ("id", "text", "label", "split", "source")


@dataclass(frozen=True)
class Taxonomy:
    """Ordered category set with a designated non-harmful category.

    Order is significant: it drives report layout and tie-breaking, so two
    taxonomies with the same names in different orders are not equal.
    """

    categories: tuple[str, ...]
    harmless_label: str

    def __post_init__(self):
        if not self.categories:
            raise ValidationError("taxonomy has no categories")
        if len(set(self.categories)) != len(self.categories):
            raise ValidationError("taxonomy category names are not unique")
        if self.harmless_label not in self.categories:
            raise ValidationError(
                f"harmless label {self.harmless_label!r} is not a category"
            )

    def __contains__(self, label: str) -> bool:
        return label in self.categories


DEFAULT_TAXONOMY = Taxonomy(
    categories=("Politics", "Pornography", "Violence", "Bias", "Gambling", "Harmless"),
    harmless_label="Harmless",
)


@dataclass(frozen=True)
class ModerationSample:
    """One labeled text instance."""

    id: str
    text: str
    label: str
    split: str = "unassigned"
    source: str = ""
    extra: tuple[tuple[str, object], ...] = ()

    def to_record(self) -> dict:
        record = {
            "id": self.id,
            "text": self.text,
            "label": self.label,
            "split": self.split,
            "source": self.source,
        }
        record.update(dict(self.extra))
        return record


@dataclass
class SampleSet:
    """An ordered, validated collection of samples under one taxonomy."""

    taxonomy: Taxonomy
    samples: list[ModerationSample] = field(default_factory=list)

    def __post_init__(self):
        seen: set[str] = set()
        for sample in self.samples:
            if sample.label not in self.taxonomy:
                raise UnknownLabelError(sample.label, f"sample {sample.id!r}")
            if sample.id in seen:
                raise DuplicateIdError(f"duplicate sample id {sample.id!r}")
            seen.add(sample.id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ModerationSample]:
        return iter(self.samples)

    def by_id(self) -> dict[str, ModerationSample]:
        return {s.id: s for s in self.samples}

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def per_category(self) -> dict[str, list[ModerationSample]]:
        groups: dict[str, list[ModerationSample]] = {
            c: [] for c in self.taxonomy.categories
        }
        for sample in self.samples:
            groups[sample.label].append(sample)
        return groups


def _derived_id(lineno: int, text: str) -> str:
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]
    return f"line{lineno:06d}-{digest}"


def load_dataset(path: str | Path, taxonomy: Taxonomy) -> SampleSet:
    """Load and validate a JSON-lines corpus file.

    Records missing an id get a deterministic one derived from the line
    number and a content hash, so reloading the same file yields the same
    ids. Raises on the first invalid record, naming the line.
    """
    samples: list[ModerationSample] = []
    seen: set[str] = set()
    for lineno, record in read_jsonl(path):
        if "text" not in record:
            raise MalformedRecordError(lineno, "missing 'text' field")
        if "label" not in record:
            raise MalformedRecordError(lineno, "missing 'label' field")
        text = record["text"]
        if not isinstance(text, str):
            raise MalformedRecordError(lineno, "'text' is not a string")
        if not text.strip():
            raise EmptyTextError(f"empty text at line {lineno}")
        label = record["label"]
        if label not in taxonomy:
            raise UnknownLabelError(str(label), f"line {lineno}")
        split = record.get("split", "unassigned")
        if split not in SPLITS:
            raise MalformedRecordError(lineno, f"unknown split {split!r}")
        sample_id = str(record.get("id") or _derived_id(lineno, text))
        if sample_id in seen:
            raise DuplicateIdError(f"duplicate sample id {sample_id!r} at line {lineno}")
        seen.add(sample_id)
        extra = tuple(
            (k, v) for k, v in record.items() if k not in KNOWN_KEYS
        )
        samples.append(
            ModerationSample(
                id=sample_id,
                text=text,
                label=label,
                split=split,
                source=str(record.get("source", "")),
                extra=extra,
            )
        )
    return SampleSet(taxonomy=taxonomy, samples=samples)


def save_dataset(sample_set: SampleSet, path: str | Path) -> None:
    """Write a SampleSet back to JSON lines; inverse of load_dataset."""
    write_jsonl(path, (s.to_record() for s in sample_set))


def _category_seed(seed: int, category: str) -> int:
    digest = hashlib.sha256(f"{seed}:{category}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def split_balanced(
    sample_set: SampleSet,
    train_per_cat: int,
    test_per_cat: int,
    seed: int,
) -> tuple[SampleSet, SampleSet]:
    """Select a balanced train/test split with a per-category seeded shuffle.

    Membership depends only on (seed, category name, input order within the
    category), so adding samples of one category never perturbs another.
    Output order follows input order; chosen samples get their split field
    set accordingly.
    """
    need = train_per_cat + test_per_cat
    groups = sample_set.per_category()
    chosen_split: dict[str, str] = {}
    for category in sample_set.taxonomy.categories:
        members = groups[category]
        if len(members) < need:
            raise InsufficientSamplesError(category, len(members), need)
        order = list(range(len(members)))
        random.Random(_category_seed(seed, category)).shuffle(order)
        for position in order[:train_per_cat]:
            chosen_split[members[position].id] = "train"
        for position in order[train_per_cat : train_per_cat + test_per_cat]:
            chosen_split[members[position].id] = "test"

    train = [
        replace(s, split="train")
        for s in sample_set
        if chosen_split.get(s.id) == "train"
    ]
    test = [
        replace(s, split="test")
        for s in sample_set
        if chosen_split.get(s.id) == "test"
    ]
    taxonomy = sample_set.taxonomy
    return SampleSet(taxonomy, train), SampleSet(taxonomy, test)


def _check_embeddings(
    sample_set: SampleSet, embeddings: Mapping[str, np.ndarray]
) -> int:
    dim = -1
    for sample in sample_set:
        vec = embeddings.get(sample.id)
        if vec is None:
            raise MissingEmbeddingError(sample.id)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1:
            raise DimensionMismatchError(
                f"embedding for {sample.id!r} is not a vector"
            )
        if dim == -1:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise DimensionMismatchError(
                f"embedding for {sample.id!r} has dim {vec.shape[0]}, expected {dim}"
            )
    return dim


def dedup(
    sample_set: SampleSet,
    embeddings: Mapping[str, np.ndarray],
    threshold: float,
) -> SampleSet:
    """Collapse near-duplicates per category, keeping each cluster's medoid.

    Greedy single pass in input order: a sample joins the first existing
    cluster (same category) whose seed vector has cosine >= threshold with
    it, else starts a new cluster. The survivor of each cluster is the
    member with the highest mean cosine to the other members (ties go to
    the earlier sample). Output keeps input order.

    Embeddings must be unit-norm so cosine reduces to a dot product.
    """
    _check_embeddings(sample_set, embeddings)

    # clusters[category] -> list of clusters; a cluster is a list of input positions
    clusters: dict[str, list[list[int]]] = {}
    vectors: list[np.ndarray] = []
    for position, sample in enumerate(sample_set):
        vec = np.asarray(embeddings[sample.id], dtype=np.float64)
        vectors.append(vec)
        placed = False
        for cluster in clusters.setdefault(sample.label, []):
            seed_vec = vectors[cluster[0]]
            if float(np.dot(vec, seed_vec)) >= threshold:
                cluster.append(position)
                placed = True
                break
        if not placed:
            clusters[sample.label].append([position])

    survivors: set[int] = set()
    for category_clusters in clusters.values():
        for cluster in category_clusters:
            if len(cluster) == 1:
                survivors.add(cluster[0])
                continue
            best_position = -1
            best_mean = -np.inf
            for member in cluster:
                sims = [
                    float(np.dot(vectors[member], vectors[other]))
                    for other in cluster
                    if other != member
                ]
                mean_sim = sum(sims) / len(sims)
                # strict > keeps the earliest member on ties
                if mean_sim > best_mean:
                    best_mean = mean_sim
                    best_position = member
            survivors.add(best_position)

    kept = [s for i, s in enumerate(sample_set) if i in survivors]
    return SampleSet(sample_set.taxonomy, kept)
