"""Dataset ingestion: deterministic stratified splits and the run manifest."""

from __future__ import annotations

import hashlib
import json
import os
import random
from dataclasses import dataclass
from typing import Sequence

from .core import Clock, LabelSet, Sample, canonical_form, write_jsonl

DEFAULT_RATIOS = (0.64, 0.16, 0.20)
SPLITS = ("train", "val", "test")
IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


class UnknownLabelDir(ValueError):
    pass


class EmptyClass(ValueError):
    pass


@dataclass(frozen=True)
class SampleEntry:
    image_id: str
    path: str
    label: str
    split: str


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    created_at: float
    seed: int
    ratios: tuple[float, float, float]
    labels: tuple[str, ...]
    samples: tuple[SampleEntry, ...]
    config: dict | None = None

    def split_ids(self, split: str) -> list[str]:
        return [s.image_id for s in self.samples if s.split == split]

    def samples_for(self, split: str | None = None) -> list[Sample]:
        return [
            Sample(image_id=s.image_id, image_ref=s.path or None, true_label=s.label)
            for s in self.samples
            if split is None or s.split == split
        ]

    def truth(self) -> dict[str, str]:
        return {s.image_id: s.label for s in self.samples}

    def to_json_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "created_at": self.created_at,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "labels": list(self.labels),
            "config": self.config,
            "samples": [
                {"image_id": s.image_id, "path": s.path, "label": s.label, "split": s.split}
                for s in self.samples
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "RunManifest":
        return cls(
            run_id=data["run_id"],
            created_at=float(data["created_at"]),
            seed=int(data["seed"]),
            ratios=tuple(data["ratios"]),
            labels=tuple(data["labels"]),
            config=data.get("config"),
            samples=tuple(
                SampleEntry(
                    image_id=s["image_id"], path=s["path"], label=s["label"], split=s["split"]
                )
                for s in data["samples"]
            ),
        )


def largest_remainder_split(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer allocation of n items to ratios, off by at most 1 per bucket."""
    floors = [int(n * r) for r in ratios]
    remainders = [n * r - f for r, f in zip(ratios, floors)]
    leftover = n - sum(floors)
    # hand leftovers to the largest remainders; ties keep bucket order
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        floors[i] += 1
    return floors


def assign_splits(
    ids_by_label: dict[str, Sequence[str]], seed: int, ratios=DEFAULT_RATIOS
) -> dict[str, str]:
    """Stratified split, a pure function of (seed, sorted image ids)."""
    assignment: dict[str, str] = {}
    for label in sorted(ids_by_label):
        ids = sorted(ids_by_label[label])
        rng = random.Random(f"{seed}/{label}")
        rng.shuffle(ids)
        sizes = largest_remainder_split(len(ids), ratios)
        start = 0
        for split, size in zip(SPLITS, sizes):
            for image_id in ids[start : start + size]:
                assignment[image_id] = split
            start += size
    return assignment


def _manifest_run_id(seed: int, labels, ids: Sequence[str]) -> str:
    digest = hashlib.sha256(
        json.dumps({"seed": seed, "labels": list(labels), "ids": sorted(ids)}).encode()
    ).hexdigest()
    return f"run-{digest[:12]}"


def ingest_dataset(
    root_dir: str,
    labels: LabelSet,
    seed: int,
    clock: Clock,
    ratios=DEFAULT_RATIOS,
) -> RunManifest:
    """Walk one subdirectory per label and build a deterministic manifest."""
    found: dict[str, list[tuple[str, str]]] = {lab: [] for lab in labels}
    for entry in sorted(os.listdir(root_dir)):
        full = os.path.join(root_dir, entry)
        if not os.path.isdir(full) or entry.startswith("."):
            continue
        label = canonical_form(entry)
        if label not in labels:
            raise UnknownLabelDir(f"directory {entry!r} does not match any configured label")
        for fname in sorted(os.listdir(full)):
            if os.path.splitext(fname)[1].lower() in IMAGE_EXTENSIONS:
                image_id = f"{label}/{fname}"
                found[label].append((image_id, os.path.join(full, fname)))
    for label, items in found.items():
        if not items:
            raise EmptyClass(f"label {label!r} has no images under {root_dir!r}")
    ids_by_label = {lab: [i for i, _ in items] for lab, items in found.items()}
    assignment = assign_splits(ids_by_label, seed, ratios)
    paths = {i: p for items in found.values() for i, p in items}
    samples = tuple(
        SampleEntry(image_id=i, path=paths[i], label=lab, split=assignment[i])
        for lab in labels
        for i in sorted(ids_by_label[lab])
    )
    return RunManifest(
        run_id=_manifest_run_id(seed, labels, list(paths)),
        created_at=clock.now(),
        seed=seed,
        ratios=tuple(ratios),
        labels=tuple(labels),
        samples=samples,
        config={"root_dir": root_dir, "seed": seed, "ratios": list(ratios)},
    )


def save_manifest(manifest: RunManifest, out_dir: str) -> str:
    """Write manifest.json plus per-split samples_<split>.jsonl feed files."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for split in SPLITS:
        write_jsonl(
            os.path.join(out_dir, f"samples_{split}.jsonl"),
            (
                {"id": s.image_id, "label": s.label, "path": s.path}
                for s in manifest.samples
                if s.split == split
            ),
        )
        write_jsonl(
            os.path.join(out_dir, f"truth_{split}.jsonl"),
            (
                {"image_id": s.image_id, "label": s.label}
                for s in manifest.samples
                if s.split == split
            ),
        )
    return path


def load_manifest(path: str) -> RunManifest:
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path, encoding="utf-8") as fh:
        return RunManifest.from_json_dict(json.load(fh))
