"""Online serving flow: request handling, detection stub, dual recall with
deduplication, score fusion, ranking, and activity logging.

Two recall sources feed every query: the per-image index (keys encode
product id + image id; hits are deduplicated to each product's best image)
and the per-product multimodal index.  Scores fuse as
``i2i + weight * multimodal`` with a missing source contributing zero, and
ranking adds a configurable popularity bonus (the production ranking model
is out of scope; the hook keeps the pipeline shape).

Every handled request appends one request event plus one impression event
per returned item to the activity log.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hnsw import HnswIndex
from .lifecycle import make_image_key, split_image_key
from .synth import ProductRecord
from .towers import ItemInput, TwoTowerModel

EVENT_KINDS = ("request", "impression", "click", "add_to_cart", "order")
USER_EVENT_KINDS = ("click", "add_to_cart", "order")


@dataclass
class EngineConfig:
    overfetch: int = 3              # I2I images fetched per requested product
    fusion_weight: float = 1.0
    popularity_weight: float = 0.0
    ef_search: int = 64
    union_cap_factor: int = 2       # recall union capped at factor * page_size
    crop_fraction: float | None = None


@dataclass
class SearchRequest:
    request_id: str
    image: np.ndarray | None = None
    vector: np.ndarray | None = None
    page_size: int = 10

    def __post_init__(self):
        if (self.image is None) == (self.vector is None):
            raise ValueError("exactly one of image/vector must be present")
        if self.page_size < 1:
            raise ValueError("page_size must be >= 1")


@dataclass
class RecallCandidate:
    product_id: str
    source: str                     # "i2i" | "mm"
    score: float
    image_id: int | None = None


@dataclass
class RankedItem:
    product_id: str
    score: float
    rank: int


@dataclass
class SearchResponse:
    request_id: str
    items: list[RankedItem]
    timings: dict[str, float]


@dataclass
class DualIndexSet:
    i2i: HnswIndex                  # keys "pid#idx"
    mm: HnswIndex                   # keys pid
    catalog: dict[str, ProductRecord]


class ActivityLog:
    """Append-only newline-delimited JSON event log; single writer at a time."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._seq = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)

    def append(self, kind: str, request_id: str, **payload) -> None:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        with self._lock:
            self._seq += 1
            event = {"seq": self._seq, "ts": time.time(),
                     "request_id": request_id, "kind": kind, **payload}
            with open(self.path, "a") as fh:
                fh.write(json.dumps(event, sort_keys=True))
                fh.write("\n")

    def events(self) -> list[dict]:
        with open(self.path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


def detect_stub(image: np.ndarray,
                crop_fraction: float | None = None) -> list[tuple[int, int, int, int]]:
    """Whole-image bounding box; an optional centered crop exercises the
    cropping plumbing the production detector would drive."""
    h, w = image.shape
    if crop_fraction is None or crop_fraction >= 1.0:
        return [(0, 0, w, h)]
    inset_w = int(round(w * (1.0 - crop_fraction) / 2.0))
    inset_h = int(round(h * (1.0 - crop_fraction) / 2.0))
    return [(inset_w, inset_h, w - inset_w, h - inset_h)]


def crop_and_resize(image: np.ndarray, box: tuple[int, int, int, int],
                    out_size: int) -> np.ndarray:
    """Nearest-neighbor resize of the box region back to the model's input size."""
    x0, y0, x1, y1 = box
    region = image[y0:y1, x0:x1]
    if region.shape == (out_size, out_size):
        return region
    rows = np.minimum((np.arange(out_size) * region.shape[0]) // out_size,
                      region.shape[0] - 1)
    cols = np.minimum((np.arange(out_size) * region.shape[1]) // out_size,
                      region.shape[1] - 1)
    return region[np.ix_(rows, cols)]


def recall_with_dedup(indexes: DualIndexSet, query_emb: np.ndarray, k: int,
                      source: str, overfetch: int = 3,
                      ef_search: int = 64) -> list[RecallCandidate]:
    """Top-k products from one recall source.

    The i2i path overfetches k*overfetch images, keeps each product's best-
    scoring image, and truncates back to k; the mm path maps straight to
    product ids.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if source == "mm":
        hits = indexes.mm.search(query_emb, k, ef_search=max(ef_search, k))
        return [RecallCandidate(h.key, "mm", h.score) for h in hits]
    if source != "i2i":
        raise ValueError(f"unknown recall source {source!r}")
    fetch = k * overfetch
    hits = indexes.i2i.search(query_emb, fetch, ef_search=max(ef_search, fetch))
    best: dict[str, RecallCandidate] = {}
    for hit in hits:
        pid, image_id = split_image_key(hit.key)
        if pid not in best:        # hits arrive best-first
            best[pid] = RecallCandidate(pid, "i2i", hit.score, image_id)
    ranked = sorted(best.values(), key=lambda c: (-c.score, c.product_id))
    return ranked[:k]


def fuse_scores(i2i: list[RecallCandidate], mm: list[RecallCandidate],
                weight: float) -> list[tuple[str, float]]:
    """Union of both candidate sets with per-product fused scores,
    ``i2i + weight * mm``; a missing source contributes zero."""
    if weight < 0:
        raise ValueError("fusion weight must be nonnegative")
    i2i_scores = {c.product_id: c.score for c in i2i}
    mm_scores = {c.product_id: c.score for c in mm}
    fused = [(pid, i2i_scores.get(pid, 0.0) + weight * mm_scores.get(pid, 0.0))
             for pid in i2i_scores.keys() | mm_scores.keys()]
    fused.sort(key=lambda item: (-item[1], item[0]))
    return fused


def rank_candidates(candidates: list[tuple[str, float]],
                    catalog: dict[str, ProductRecord],
                    popularity_weight: float = 0.0) -> list[RankedItem]:
    """Final ordering: fused score plus a popularity bonus, ties by id."""
    if popularity_weight:
        max_pop = max((rec.popularity for rec in catalog.values()), default=0.0)
    scored = []
    for pid, fused in candidates:
        if pid not in catalog:
            raise KeyError(f"recalled product {pid!r} missing from catalog")
        score = fused
        if popularity_weight and max_pop > 0:
            score += popularity_weight * catalog[pid].popularity / max_pop
        scored.append((pid, score))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return [RankedItem(pid, score, rank + 1)
            for rank, (pid, score) in enumerate(scored)]


class SearchEngine:
    def __init__(self, model: TwoTowerModel, indexes: DualIndexSet,
                 log: ActivityLog, cfg: EngineConfig | None = None):
        self.model = model
        self.indexes = indexes
        self.log = log
        self.cfg = cfg or EngineConfig()

    def handle_search(self, request: SearchRequest) -> SearchResponse:
        timings: dict[str, float] = {}

        def timed(name):
            class _Timer:
                def __enter__(self_inner):
                    self_inner.t0 = time.perf_counter()

                def __exit__(self_inner, *exc):
                    timings[name] = (time.perf_counter() - self_inner.t0) * 1000.0

            return _Timer()

        if request.image is not None:
            with timed("detect"):
                image = np.asarray(request.image, dtype=np.float64)
                box = detect_stub(image, self.cfg.crop_fraction)[0]
                image = crop_and_resize(image, box, self.model.cfg.image_size)
            with timed("embed"):
                query_emb = self.model.query_embedding(image)
        else:
            with timed("embed"):
                query_emb = np.asarray(request.vector, dtype=np.float64)

        k = request.page_size
        with timed("recall_i2i"):
            i2i = recall_with_dedup(self.indexes, query_emb, k, "i2i",
                                    self.cfg.overfetch, self.cfg.ef_search) \
                if self.indexes.i2i.live_count else []
        with timed("recall_mm"):
            mm = recall_with_dedup(self.indexes, query_emb, k, "mm",
                                   self.cfg.overfetch, self.cfg.ef_search) \
                if self.indexes.mm.live_count else []
        with timed("fuse"):
            fused = fuse_scores(i2i, mm, self.cfg.fusion_weight)
            fused = fused[:self.cfg.union_cap_factor * k]
        with timed("rank"):
            ranked = rank_candidates(fused, self.indexes.catalog,
                                     self.cfg.popularity_weight)[:k]
            ranked = [RankedItem(item.product_id, item.score, i + 1)
                      for i, item in enumerate(ranked)]
        with timed("log"):
            self.log.append("request", request.request_id,
                            page_size=request.page_size, returned=len(ranked))
            for item in ranked:
                self.log.append("impression", request.request_id,
                                product_id=item.product_id, rank=item.rank)
        return SearchResponse(request.request_id, ranked, timings)

    def handle_event(self, request_id: str, kind: str, product_id: str) -> None:
        if kind not in USER_EVENT_KINDS:
            raise ValueError(f"unsupported interaction kind {kind!r}")
        self.log.append(kind, request_id, product_id=product_id)

    def index_counts(self) -> dict[str, int]:
        return {"i2i": self.indexes.i2i.live_count,
                "mm": self.indexes.mm.live_count}


def build_dual_indexes(model: TwoTowerModel, catalog: list[ProductRecord],
                       seed: int = 0, m: int = 16, ef_construction: int = 200,
                       ) -> DualIndexSet:
    """Embed the whole catalog and build both ANN indexes."""
    dim = model.cfg.output_dim
    i2i = HnswIndex(dim, m=m, ef_construction=ef_construction, seed=seed)
    mm = HnswIndex(dim, m=m, ef_construction=ef_construction, seed=seed + 1)

    items = [ItemInput.build(rec.title, list(rec.images), model.cfg)
             for rec in catalog]
    for rec, emb in zip(catalog, model.item_embeddings(items)):
        mm.insert(rec.product_id, emb)

    flat_imgs, keys = [], []
    for rec in catalog:
        for idx, img in enumerate(rec.images):
            flat_imgs.append(img)
            keys.append(make_image_key(rec.product_id, idx))
    if flat_imgs:
        for key, emb in zip(keys, model.image_embeddings(np.stack(flat_imgs))):
            i2i.insert(key, emb)
    return DualIndexSet(i2i, mm, {rec.product_id: rec for rec in catalog})


def new_request_id() -> str:
    return uuid.uuid4().hex
