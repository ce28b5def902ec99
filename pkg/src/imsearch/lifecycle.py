"""Daily item-feature pipeline.

A feature partition is the day's snapshot of every live catalog entry:
content hash, embedding, and embed timestamp.  Each day the previous
partition is copied forward (minus deleted/changed entries), new or changed
entries are embedded and validated, and a diff between the two days emits
delete/update commands for the ANN index.  Keeping the full partition on
disk is what makes index reconstruction possible at any day, and unlike the
index itself the records are inspectable.

The same pipeline runs in two instances: one keyed per product (multimodal
embeddings) and one keyed per image ("pid#idx" keys, pooled image
embeddings).  Timestamps are logical (derived from the day key), so
re-running a day is byte-idempotent.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .hnsw import HnswIndex
from .synth import ProductRecord
from .towers import ItemInput, TwoTowerModel

IMAGE_KEY_SEP = "#"


def make_image_key(product_id: str, image_index: int) -> str:
    return f"{product_id}{IMAGE_KEY_SEP}{image_index}"


def split_image_key(key: str) -> tuple[str, int]:
    pid, idx = key.rsplit(IMAGE_KEY_SEP, 1)
    return pid, int(idx)


# -- validation -------------------------------------------------------------------

def image_decodes(img) -> bool:
    """Desk-scale stand-in for image decoding: a finite, nonempty 2-d array."""
    try:
        arr = np.asarray(img, dtype=np.float64)
    except (TypeError, ValueError):
        return False
    return arr.ndim == 2 and arr.size > 0 and bool(np.isfinite(arr).all())


def validate_item(item: ProductRecord) -> str | None:
    """Return a rejection reason, or None if the item is indexable.

    Rejected: titles containing only punctuation marks or spaces, and items
    where every image fails to decode.
    """
    if not any(ch.isalnum() for ch in item.title):
        return "title"
    if not any(image_decodes(img) for img in item.images):
        return "images"
    return None


# -- partitions ----------------------------------------------------------------------

@dataclass
class FeatureEntry:
    content_hash: bytes
    embedding: np.ndarray
    timestamp: float


@dataclass
class FeaturePartition:
    day: str
    entries: dict[str, FeatureEntry] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class CatalogSnapshot:
    """The day's live product table (unavailable items already dropped)."""

    day: str
    records: dict[str, ProductRecord]

    @classmethod
    def build(cls, day: str, catalog: list[ProductRecord]) -> "CatalogSnapshot":
        return cls(day, {r.product_id: r for r in catalog if r.available})


def _image_bytes(img) -> bytes:
    arr = np.ascontiguousarray(np.asarray(img, dtype=np.float64))
    return struct.pack("<II", *arr.shape) + arr.tobytes()


def item_content_hash(record: ProductRecord) -> bytes:
    h = hashlib.sha256()
    h.update(record.title.encode("utf-8"))
    for img in record.images:
        h.update(b"\x00")
        h.update(_image_bytes(img))
    return h.digest()


def image_content_hash(record: ProductRecord, image_index: int) -> bytes:
    return hashlib.sha256(_image_bytes(record.images[image_index])).digest()


@dataclass
class EmbeddingJob:
    """One pipeline instance: how catalog records map to keys and vectors."""

    name: str
    keys_for: Callable[[ProductRecord], list[str]]
    content_hash: Callable[[ProductRecord, str], bytes]
    embed: Callable[[TwoTowerModel, ProductRecord, str], np.ndarray]


def item_job(k_images: int | None = None) -> EmbeddingJob:
    """Per-product multimodal embeddings keyed by product id."""

    def embed(model: TwoTowerModel, record: ProductRecord, key: str) -> np.ndarray:
        item = ItemInput.build(record.title,
                               [img for img in record.images if image_decodes(img)],
                               model.cfg, k=k_images)
        return model.item_embedding(item)

    return EmbeddingJob(
        name="item",
        keys_for=lambda record: [record.product_id],
        content_hash=lambda record, key: item_content_hash(record),
        embed=embed)


def image_job() -> EmbeddingJob:
    """Per-image pooled embeddings keyed by pid#idx (decodable images only)."""

    def keys_for(record: ProductRecord) -> list[str]:
        return [make_image_key(record.product_id, i)
                for i, img in enumerate(record.images) if image_decodes(img)]

    def embed(model: TwoTowerModel, record: ProductRecord, key: str) -> np.ndarray:
        _, idx = split_image_key(key)
        _, pooled = model.encode_image(record.images[idx])
        return pooled

    return EmbeddingJob(
        name="image",
        keys_for=keys_for,
        content_hash=lambda record, key: image_content_hash(
            record, split_image_key(key)[1]),
        embed=embed)


# -- pipeline steps ---------------------------------------------------------------------

def copy_forward(prev: FeaturePartition | None, catalog: CatalogSnapshot,
                 job: EmbeddingJob) -> FeaturePartition:
    """Carry over entries whose item still exists with unchanged content."""
    out = FeaturePartition(catalog.day)
    if prev is None:
        return out
    current_keys: dict[str, bytes] = {}
    for record in catalog.records.values():
        for key in job.keys_for(record):
            current_keys[key] = job.content_hash(record, key)
    for key, entry in prev.entries.items():
        if current_keys.get(key) == entry.content_hash:
            out.entries[key] = entry
    return out


def embed_new_items(catalog: CatalogSnapshot, partition: FeaturePartition,
                    model: TwoTowerModel, job: EmbeddingJob
                    ) -> tuple[FeaturePartition, list[tuple[str, str]]]:
    """Embed every catalog key missing from the partition; skip invalid items.

    Returns the completed partition and a list of (product_id, reason)
    failures.  A failure never aborts the job.
    """
    failures: list[tuple[str, str]] = []
    ts = day_timestamp(catalog.day)
    for pid in sorted(catalog.records):
        record = catalog.records[pid]
        reason = validate_item(record)
        if reason is not None:
            failures.append((pid, reason))
            continue
        for key in job.keys_for(record):
            if key in partition.entries:
                continue
            try:
                vec = job.embed(model, record, key)
            except Exception as exc:   # noqa: BLE001 - batch job must survive
                failures.append((pid, f"embed: {exc}"))
                continue
            partition.entries[key] = FeatureEntry(
                content_hash=job.content_hash(record, key),
                embedding=np.asarray(vec, dtype=np.float64), timestamp=ts)
    return partition, failures


@dataclass
class IndexCommand:
    kind: str                       # "delete" | "update"
    key: str
    embedding: np.ndarray | None = None


def diff_partitions(prev: FeaturePartition | None,
                    curr: FeaturePartition) -> list[IndexCommand]:
    """Delete keys that vanished; update keys that are new or re-embedded."""
    prev_entries = prev.entries if prev is not None else {}
    commands = [IndexCommand("delete", key)
                for key in sorted(prev_entries.keys() - curr.entries.keys())]
    for key in sorted(curr.entries):
        entry = curr.entries[key]
        old = prev_entries.get(key)
        if old is None or not np.array_equal(old.embedding, entry.embedding):
            commands.append(IndexCommand("update", key, entry.embedding))
    return commands


def apply_commands(index: HnswIndex, commands: list[IndexCommand]) -> dict:
    """Apply deletes then updates; unknown deletes are warnings, not errors."""
    stats = {"deleted": 0, "updated": 0, "missing_deletes": 0}
    for cmd in commands:
        if cmd.kind != "delete":
            continue
        try:
            index.delete(cmd.key)
            stats["deleted"] += 1
        except KeyError:
            stats["missing_deletes"] += 1   # replay tolerated
    for cmd in commands:
        if cmd.kind != "update":
            continue
        if cmd.key in index:
            index.delete(cmd.key)
        index.insert(cmd.key, cmd.embedding)
        stats["updated"] += 1
    return stats


def day_timestamp(day: str) -> float:
    """Logical timestamp for a day key; deterministic, so reruns are exact."""
    try:
        return float(datetime.date.fromisoformat(day).toordinal())
    except ValueError:
        return float(zlib.crc32(day.encode("utf-8")))


def daily_job(day: str, catalog: list[ProductRecord] | CatalogSnapshot,
              prev: FeaturePartition | None, model: TwoTowerModel,
              index: HnswIndex | None, job: EmbeddingJob,
              bootstrap: bool = False) -> tuple[FeaturePartition,
                                                list[IndexCommand], dict]:
    """One day of the pipeline: copy forward, embed, diff, apply.

    ``prev`` may be None only on a bootstrap day.  ``index`` may be None to
    produce the partition and commands without applying them.
    """
    if prev is None and not bootstrap:
        raise ValueError("no previous partition; pass bootstrap=True for day one")
    started = time.monotonic()
    snapshot = catalog if isinstance(catalog, CatalogSnapshot) \
        else CatalogSnapshot.build(day, catalog)
    partition = copy_forward(prev, snapshot, job)
    copied = len(partition)
    partition, failures = embed_new_items(snapshot, partition, model, job)
    commands = diff_partitions(prev, partition)
    report = {
        "day": day, "job": job.name, "copied": copied,
        "embedded": len(partition) - copied, "skipped": len(failures),
        "failures": failures,
        "deleted": sum(1 for c in commands if c.kind == "delete"),
        "updated": sum(1 for c in commands if c.kind == "update"),
    }
    if index is not None:
        report["apply"] = apply_commands(index, commands)
    report["duration_s"] = time.monotonic() - started
    return partition, commands, report


# -- persistence -----------------------------------------------------------------------

class PartitionStore:
    """Directory of day partitions: a manifest plus a sorted binary record file."""

    def __init__(self, root, retention: int = 7):
        self.root = Path(root)
        self.retention = retention

    def _day_dir(self, day: str, job_name: str) -> Path:
        return self.root / job_name / day

    def days(self, job_name: str) -> list[str]:
        base = self.root / job_name
        if not base.exists():
            return []
        return sorted(p.name for p in base.iterdir() if p.is_dir())

    def save(self, partition: FeaturePartition, job_name: str,
             model_checkpoint_hash: str = "") -> Path:
        directory = self._day_dir(partition.day, job_name)
        directory.mkdir(parents=True, exist_ok=True)
        record_file = "records.bin"
        with open(directory / record_file, "wb") as fh:
            for key in sorted(partition.entries):
                entry = partition.entries[key]
                raw = key.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(entry.content_hash)
                fh.write(struct.pack("<I", entry.embedding.shape[0]))
                fh.write(entry.embedding.tobytes())
                fh.write(struct.pack("<d", entry.timestamp))
        manifest = {"day": partition.day, "record_file": record_file,
                    "count": len(partition.entries),
                    "model_checkpoint_hash": model_checkpoint_hash}
        with open(directory / "manifest.json", "w") as fh:
            json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
        self._apply_retention(job_name)
        return directory

    def load(self, day: str, job_name: str) -> FeaturePartition:
        directory = self._day_dir(day, job_name)
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
        partition = FeaturePartition(day)
        with open(directory / manifest["record_file"], "rb") as fh:
            for _ in range(manifest["count"]):
                (key_len,) = struct.unpack("<H", fh.read(2))
                key = fh.read(key_len).decode("utf-8")
                digest = fh.read(32)
                (dim,) = struct.unpack("<I", fh.read(4))
                vec = np.frombuffer(fh.read(8 * dim), dtype=np.float64).copy()
                (ts,) = struct.unpack("<d", fh.read(8))
                partition.entries[key] = FeatureEntry(digest, vec, ts)
        return partition

    def _apply_retention(self, job_name: str) -> None:
        days = self.days(job_name)
        for stale in days[:-self.retention] if self.retention else []:
            directory = self._day_dir(stale, job_name)
            for child in directory.iterdir():
                child.unlink()
            directory.rmdir()


def save_commands(path, commands: list[IndexCommand]) -> None:
    with open(path, "w") as fh:
        for cmd in commands:
            payload = {"kind": cmd.kind, "product_id": cmd.key}
            if cmd.embedding is not None:
                payload["embedding"] = cmd.embedding.tolist()
            fh.write(json.dumps(payload, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_commands(path) -> list[IndexCommand]:
    commands = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            payload = json.loads(line)
            emb = payload.get("embedding")
            commands.append(IndexCommand(
                payload["kind"], payload["product_id"],
                np.array(emb, dtype=np.float64) if emb is not None else None))
    return commands


def build_index_from_partition(partition: FeaturePartition, dim: int,
                               **index_kw) -> HnswIndex:
    """From-scratch index over a partition (keys in sorted order)."""
    index = HnswIndex(dim, **index_kw)
    for key in sorted(partition.entries):
        index.insert(key, partition.entries[key].embedding)
    return index
