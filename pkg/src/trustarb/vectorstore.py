"""Exact inner-product store over unit-norm embeddings plus weighted voting.

The on-disk layout is a manifest JSON next to a JSONL record file; a saved
index directory uses the same schema as sidecar-emitted embedding dirs, so
one loader serves both.
"""

from __future__ import annotations

import json
import os
import warnings as _warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import LabelSet

FORMAT_VERSION = 1
MANIFEST_NAME = "embeddings.manifest.json"
RECORDS_NAME = "embeddings.jsonl"

DEFAULT_DIM = 512


class ZeroVector(ValueError):
    """Normalization was asked of the zero vector."""


class DimensionMismatch(ValueError):
    pass


class DuplicateId(ValueError):
    pass


class EmptyIndex(ValueError):
    pass


class EmptyHits(ValueError):
    pass


class ZeroSimilarityMass(ValueError):
    """Every hit similarity clamped to zero; no vote mass remains."""


class FormatVersionMismatch(ValueError):
    pass


class CorruptRecord(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"corrupt record at line {line_no}: {reason}")
        self.line_no = line_no


class NormalizationWarning(UserWarning):
    """An ingested vector needed more than a cosmetic norm correction."""


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    id: str
    label: str
    vector: np.ndarray
    meta: Mapping[str, str] = field(default_factory=dict)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, EmbeddingRecord)
            and self.id == other.id
            and self.label == other.label
            and np.array_equal(self.vector, other.vector)
            and dict(self.meta) == dict(other.meta)
        )


@dataclass(frozen=True)
class RetrievalHit:
    record_id: str
    label: str
    similarity: float


@dataclass(frozen=True)
class ClassVote:
    category: str
    confidence: float


class VectorIndex:
    """Immutable flat index; queries scan every record, so results are exact."""

    def __init__(self, records: tuple[EmbeddingRecord, ...], matrix: np.ndarray):
        self._records = records
        self._matrix = matrix
        self._ids = np.array([r.id for r in records], dtype=object)
        self._labels = [r.label for r in records]
        matrix.setflags(write=False)

    @property
    def records(self) -> tuple[EmbeddingRecord, ...]:
        return self._records

    @property
    def count(self) -> int:
        return len(self._records)

    @property
    def dim(self) -> int:
        return int(self._matrix.shape[1]) if self.count else int(self._matrix.shape[-1])

    @property
    def manifest(self) -> dict:
        return {
            "dim": self.dim,
            "count": self.count,
            "normalized": True,
            "format_version": FORMAT_VERSION,
        }

    def similarities(self, query: np.ndarray) -> np.ndarray:
        # multiply-then-reduce keeps each row's accumulation order fixed, so
        # bit-identical vectors get bit-identical similarities (BLAS gemv is
        # position-dependent in its last ulp, which would corrupt tie-breaks)
        return np.add.reduce(self._matrix * query, axis=1)


def normalize(vector) -> np.ndarray:
    """Scale onto the unit hypersphere; direction is preserved."""
    v = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not np.isfinite(norm):
        raise ZeroVector("cannot normalize a zero or non-finite vector")
    return v / norm


def build_index(records: Sequence[EmbeddingRecord], *, dim: int | None = None) -> VectorIndex:
    """Validate, normalize where needed, and freeze records into an index.

    A correction larger than 1e-3 in norm triggers a NormalizationWarning;
    the record is stored re-normalized either way.
    """
    seen: set[str] = set()
    kept: list[EmbeddingRecord] = []
    vectors: list[np.ndarray] = []
    for rec in records:
        if rec.id in seen:
            raise DuplicateId(rec.id)
        seen.add(rec.id)
        v = np.asarray(rec.vector, dtype=np.float64)
        if dim is None:
            dim = int(v.shape[0])
        elif v.shape[0] != dim:
            raise DimensionMismatch(f"record {rec.id!r} has dim {v.shape[0]}, expected {dim}")
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise ZeroVector(f"record {rec.id!r} has a zero vector")
        if abs(norm - 1.0) > 1e-12:
            if abs(norm - 1.0) > 1e-3:
                _warnings.warn(
                    f"record {rec.id!r} re-normalized (norm was {norm:.6f})",
                    NormalizationWarning,
                    stacklevel=2,
                )
            v = v / norm
        kept.append(EmbeddingRecord(rec.id, rec.label, v, dict(rec.meta)))
        vectors.append(v)
    matrix = np.vstack(vectors) if vectors else np.empty((0, dim or 0), dtype=np.float64)
    return VectorIndex(tuple(kept), matrix)


def knn_query(index: VectorIndex, query, k: int) -> list[RetrievalHit]:
    """Exact top-k by inner product; ties break on ascending record id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.count == 0:
        raise EmptyIndex("index holds no records")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise DimensionMismatch(f"query dim {q.shape} vs index dim {index.dim}")
    sims = index.similarities(q)
    # lexsort: last key is primary -> similarity desc, then record id asc.
    order = np.lexsort((index._ids, -sims))
    top = order[: min(k, index.count)]
    return [
        RetrievalHit(record_id=str(index._ids[i]), label=index._labels[i], similarity=float(sims[i]))
        for i in top
    ]


def weighted_vote(hits: Sequence[RetrievalHit], labels: LabelSet | None = None) -> list[ClassVote]:
    """Similarity-weighted class confidences over the hit set.

    Negative similarities are clamped to zero before voting so no class can
    carry negative mass; ties in confidence break on canonical label order
    (lexicographic when no label set is supplied).
    """
    if not hits:
        raise EmptyHits("no hits to vote over")
    mass: dict[str, float] = {}
    total = 0.0
    for hit in hits:
        s = max(hit.similarity, 0.0)
        total += s
        mass[hit.label] = mass.get(hit.label, 0.0) + s
    if total <= 0.0:
        raise ZeroSimilarityMass("every similarity clamped to zero")

    def rank(label: str) -> int | str:
        return labels.rank(label) if labels is not None else label

    # classes whose every hit clamped to zero carry no evidence; drop them
    votes = [ClassVote(category=lab, confidence=m / total) for lab, m in mass.items() if m > 0.0]
    votes.sort(key=lambda v: (-v.confidence, rank(v.category)))
    return votes


def ranked_votes_json(votes: Sequence[ClassVote]) -> str:
    """Serialize votes in the ranked-array reply shape, 4-decimal confidences."""
    lines = ",\n".join(
        f'  {{"category": "{v.category}", "confidence": {v.confidence:.4f}}}' for v in votes
    )
    return "[\n" + lines + "\n]"


def parse_ranked_votes(text: str) -> list[ClassVote]:
    data = json.loads(text)
    votes = []
    for item in data:
        conf = float(item["confidence"])
        if not 0.0 <= conf <= 1.0:
            raise ValueError(f"vote confidence out of [0,1]: {conf}")
        votes.append(ClassVote(category=item["category"], confidence=conf))
    return votes


def _read_manifest(path: str) -> dict:
    with open(os.path.join(path, MANIFEST_NAME), encoding="utf-8") as fh:
        manifest = json.load(fh)
    for key in ("dim", "count", "normalized", "format_version"):
        if key not in manifest:
            raise CorruptRecord(0, f"manifest missing key {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"format_version {manifest['format_version']} (supported: {FORMAT_VERSION})"
        )
    return manifest


def read_embedding_records(
    path: str, *, max_norm_drift: float | None = None
) -> tuple[dict, list[EmbeddingRecord]]:
    """Load an embedding/index directory, validating per line.

    max_norm_drift, when given, rejects records whose norm strays further
    than that from 1 (the loaded-index re-normalization check).
    """
    manifest = _read_manifest(path)
    records: list[EmbeddingRecord] = []
    with open(os.path.join(path, RECORDS_NAME), encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptRecord(line_no, f"invalid JSON ({exc.msg})") from exc
            for key in ("id", "label", "vector"):
                if key not in raw:
                    raise CorruptRecord(line_no, f"missing key {key!r}")
            vector = np.asarray(raw["vector"], dtype=np.float64)
            if vector.ndim != 1 or vector.shape[0] != manifest["dim"]:
                raise CorruptRecord(
                    line_no, f"vector dim {vector.shape} does not match manifest dim {manifest['dim']}"
                )
            if max_norm_drift is not None:
                norm = float(np.linalg.norm(vector))
                if abs(norm - 1.0) > max_norm_drift:
                    raise CorruptRecord(line_no, f"vector norm {norm:.8f} outside unit tolerance")
            records.append(
                EmbeddingRecord(
                    id=str(raw["id"]),
                    label=str(raw["label"]),
                    vector=vector,
                    meta=dict(raw.get("meta", {})),
                )
            )
    if len(records) != manifest["count"]:
        raise CorruptRecord(
            len(records) + 1, f"manifest count {manifest['count']} but file holds {len(records)}"
        )
    return manifest, records


def save_index(index: VectorIndex, path: str) -> None:
    """Persist manifest + records; loadable back record-identically."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, MANIFEST_NAME), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(index.manifest, fh)
        fh.write("\n")
    with open(os.path.join(path, RECORDS_NAME), "w", encoding="utf-8", newline="\n") as fh:
        for rec in index.records:
            obj = {
                "id": rec.id,
                "label": rec.label,
                "vector": [float(x) for x in rec.vector],
                "meta": dict(rec.meta),
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_index(path: str) -> VectorIndex:
    """Load a saved index; unit-norm is validated, not silently repaired."""
    manifest, records = read_embedding_records(path, max_norm_drift=1e-6)
    index = build_index(records, dim=manifest["dim"])
    return index


def load_embedding_map(path: str) -> dict[str, np.ndarray]:
    """id -> vector for query-side embedding files (labels ignored)."""
    _, records = read_embedding_records(path, max_norm_drift=1e-6)
    return {rec.id: rec.vector for rec in records}
