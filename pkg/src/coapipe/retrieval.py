"""Exact top-k cosine retrieval over unit-normalized sentence embeddings.

Embeddings are plain 1-D numpy arrays. The index stores little-endian
float32 vectors (the persisted precision) and scores queries in float64,
so an index built in memory and one reloaded from disk rank identically.
Search is exhaustive by design; index sizes here are small enough that
exactness is worth more than speed.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import SampleSet
from .errors import (
    DimensionMismatchError,
    EmptyIndexError,
    MalformedRecordError,
    MissingEmbeddingError,
    NonFiniteEntryError,
    ValidationError,
    ZeroVectorError,
)
from .fileio import atomic_write_text

INDEX_FORMAT_VERSION = 1


def normalize(vector: Sequence[float] | np.ndarray) -> np.ndarray:
    """Return vector / ||vector||_2 as float64.

    Raises ZeroVectorError when the norm is below 1e-12 and
    NonFiniteEntryError when any entry is nan or inf.
    """
    arr = np.asarray(vector, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError("expected a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteEntryError("vector has non-finite entries")
    norm = float(np.linalg.norm(arr))
    if norm < 1e-12:
        raise ZeroVectorError("cannot normalize a (near-)zero vector")
    return arr / norm


@dataclass(frozen=True)
class RetrievedCase:
    """One retrieval hit, ready to be rendered into a prompt."""

    sample_id: str
    text: str
    label: str
    score: float


@dataclass
class RetrievalIndex:
    """Immutable exact-search index: ids, labels and unit vectors.

    `texts` is an in-memory convenience for prompt rendering; it is not part
    of the persisted format and may be rejoined from a corpus after loading.
    """

    ids: tuple[str, ...]
    labels: tuple[str, ...]
    matrix: np.ndarray  # (n, dim) float32 unit rows
    texts: dict[str, str] = field(default_factory=dict)
    _matrix64: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def matrix64(self) -> np.ndarray:
        if self._matrix64 is None:
            object.__setattr__(self, "_matrix64", self.matrix.astype(np.float64))
        return self._matrix64


def build_index(
    samples: SampleSet, embeddings: Mapping[str, np.ndarray]
) -> RetrievalIndex:
    """Build an index over all samples, preserving sample order.

    Vectors are normalized here, then rounded to float32 (the persisted
    precision) so that in-memory and reloaded indexes score identically.
    """
    ids: list[str] = []
    labels: list[str] = []
    rows: list[np.ndarray] = []
    texts: dict[str, str] = {}
    dim = -1
    for sample in samples:
        vec = embeddings.get(sample.id)
        if vec is None:
            raise MissingEmbeddingError(sample.id)
        unit = normalize(vec)
        if dim == -1:
            dim = unit.shape[0]
        elif unit.shape[0] != dim:
            raise DimensionMismatchError(
                f"embedding for {sample.id!r} has dim {unit.shape[0]}, expected {dim}"
            )
        ids.append(sample.id)
        labels.append(sample.label)
        rows.append(unit.astype(np.float32))
        texts[sample.id] = sample.text
    matrix = (
        np.vstack(rows) if rows else np.zeros((0, max(dim, 0)), dtype=np.float32)
    )
    return RetrievalIndex(tuple(ids), tuple(labels), matrix, texts)


def cosine_scores(index: RetrievalIndex, query: np.ndarray) -> np.ndarray:
    """Cosine of the query against every index row (unit vectors: plain dot)."""
    return index.matrix64 @ np.asarray(query, dtype=np.float64)


def query_topk(
    index: RetrievalIndex,
    query: np.ndarray,
    k: int,
    exclude_id: str | None = None,
    require_label: str | None = None,
) -> list[RetrievedCase]:
    """Exact top-k by cosine, ties broken by ascending sample id.

    Returns min(k, remaining entries) cases sorted by descending score.
    `exclude_id` removes one entry (self-exclusion during bootstrap so a
    sample never retrieves itself as its own precedent); `require_label`
    restricts neighbours to one category (all labels are eligible by
    default).
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise EmptyIndexError("cannot query an empty index")
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1 or query.shape[0] != index.dim:
        raise DimensionMismatchError(
            f"query dim {query.shape} does not match index dim {index.dim}"
        )
    scores = cosine_scores(index, query)
    ids_arr = np.array(index.ids)
    keep = np.ones(len(index), dtype=bool)
    if exclude_id is not None:
        keep &= ids_arr != exclude_id
    if require_label is not None:
        keep &= np.array(index.labels) == require_label
    candidates = np.nonzero(keep)[0]
    # lexsort: last key is primary, so order by score desc then id asc
    order = np.lexsort((ids_arr[candidates], -scores[candidates]))
    top = candidates[order[: min(k, len(candidates))]]
    return [
        RetrievedCase(
            sample_id=index.ids[i],
            text=index.texts.get(index.ids[i], ""),
            label=index.labels[i],
            score=float(scores[i]),
        )
        for i in top
    ]


def _encode_vec(row: np.ndarray) -> str:
    return base64.b64encode(row.astype("<f4").tobytes()).decode("ascii")


def _decode_vec(data: str, dim: int, where: str) -> np.ndarray:
    raw = base64.b64decode(data.encode("ascii"))
    vec = np.frombuffer(raw, dtype="<f4")
    if vec.shape[0] != dim:
        raise DimensionMismatchError(f"{where}: vector dim {vec.shape[0]} != {dim}")
    return vec


def save_index(index: RetrievalIndex, path: str | Path) -> None:
    """Persist as a header line followed by one JSON entry per vector."""
    lines = [
        json.dumps(
            {"version": INDEX_FORMAT_VERSION, "dim": index.dim, "count": len(index)},
            separators=(",", ":"),
        )
    ]
    for i, sample_id in enumerate(index.ids):
        lines.append(
            json.dumps(
                {
                    "id": sample_id,
                    "label": index.labels[i],
                    "vec": _encode_vec(index.matrix[i]),
                },
                ensure_ascii=False,
                separators=(",", ":"),
            )
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_index(path: str | Path, samples: SampleSet | None = None) -> RetrievalIndex:
    """Load a persisted index; optionally rejoin texts from a corpus."""
    raw_lines = Path(path).read_text(encoding="utf-8").split("\n")
    if not raw_lines:
        raise MalformedRecordError(1, "index file is empty")
    header = json.loads(raw_lines[0])
    if header.get("version") != INDEX_FORMAT_VERSION:
        raise MalformedRecordError(1, f"unsupported index version {header.get('version')!r}")
    dim = int(header["dim"])
    count = int(header["count"])
    ids: list[str] = []
    labels: list[str] = []
    rows: list[np.ndarray] = []
    for lineno, line in enumerate(raw_lines[1:], start=2):
        if not line.strip():
            continue
        entry = json.loads(line)
        ids.append(entry["id"])
        labels.append(entry["label"])
        rows.append(_decode_vec(entry["vec"], dim, f"line {lineno}"))
    if len(ids) != count:
        raise MalformedRecordError(1, f"header count {count} != {len(ids)} entries")
    if len(set(ids)) != len(ids):
        raise ValidationError("index file has duplicate ids")
    matrix = np.vstack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    texts = {}
    if samples is not None:
        texts = {s.id: s.text for s in samples if s.id in set(ids)}
    return RetrievalIndex(tuple(ids), tuple(labels), matrix, texts)
