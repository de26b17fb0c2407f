"""Batch embedding of dataset manifests into the shared embedding file format."""

from __future__ import annotations

import json
import os

import numpy as np

from .encoders import DecodeError, EMBED_DIM

MANIFEST_NAME = "embeddings.manifest.json"
RECORDS_NAME = "embeddings.jsonl"
SIDECAR_MANIFEST_NAME = "sidecar.manifest.json"
FORMAT_VERSION = 1


class NothingEmbedded(RuntimeError):
    """Every input image failed to decode."""


def read_dataset_manifest(path: str) -> list[dict]:
    """Read JSONL dataset entries: {"id" (or "image_id"), "label", "path"}."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            entry_id = raw.get("id", raw.get("image_id"))
            if entry_id is None or "path" not in raw:
                raise ValueError(f"{path}:{line_no}: entry needs 'id' and 'path'")
            entries.append({"id": str(entry_id), "label": str(raw.get("label", "")), "path": raw["path"]})
    return entries


def vector_values(vector: np.ndarray) -> list[float]:
    # float() of a float32 is exact, and json emits the shortest decimal that
    # round-trips, so the stored text reproduces the float32 values bit-for-bit
    return [float(x) for x in np.asarray(vector, dtype=np.float32)]


def embed_dataset(manifest_path: str, out_dir: str, encoder, *, batch_size: int = 16) -> dict:
    """Embed every manifest entry; skip undecodable images (recorded), fail
    only when nothing embeds. Returns the sidecar manifest."""
    entries = read_dataset_manifest(manifest_path)
    os.makedirs(out_dir, exist_ok=True)
    embedded = []
    skipped = []
    with open(os.path.join(out_dir, RECORDS_NAME), "w", encoding="utf-8", newline="\n") as fh:
        for entry in entries:
            try:
                vector = encoder.encode_path(entry["path"])
            except DecodeError as exc:
                skipped.append({"id": entry["id"], "path": entry["path"], "error": str(exc)})
                continue
            record = {
                "id": entry["id"],
                "label": entry["label"],
                "vector": vector_values(vector),
                "meta": {"source": entry["path"]},
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
            embedded.append(entry)
    if not embedded:
        raise NothingEmbedded(f"none of the {len(entries)} images could be embedded")
    manifest = {
        "dim": EMBED_DIM,
        "count": len(embedded),
        "normalized": True,
        "format_version": FORMAT_VERSION,
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh)
        fh.write("\n")
    sidecar_manifest = {
        "model": encoder.model_id,
        "dim": encoder.dim,
        "normalized": True,
        "count": len(embedded),
        "images": [{"id": e["id"], "label": e["label"], "source": e["path"]} for e in embedded],
        "skipped": skipped,
    }
    with open(os.path.join(out_dir, SIDECAR_MANIFEST_NAME), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(sidecar_manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return sidecar_manifest


def embed_query(image_path: str, encoder) -> dict:
    """One record for a query image: id from the file stem, label omitted."""
    vector = encoder.encode_path(image_path)
    return {
        "id": os.path.splitext(os.path.basename(image_path))[0],
        "vector": vector_values(vector),
        "meta": {"model": encoder.model_id},
    }
