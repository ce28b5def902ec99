"""Synthetic catalog and click-log generation.

Classes are separable by construction: each class owns a visual motif (a
low-resolution pixel pattern) and a title motif (a small word pool).  Visual
motifs are shared pairwise so that image-only retrieval confuses class 2c
with class 2c+1, while titles stay class-specific; that is what makes the
multimodal embedding earn its keep.  Click triplets come in three flavours:
"identical" reuses one of the clicked item's own images as the query,
"similar" queries with an image of a different item from the same class, and
"noise" pairs two unrelated classes.

Everything is driven by one seeded generator, so a spec with the same seed
reproduces the corpus byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ProductRecord:
    product_id: str
    title: str
    images: list[np.ndarray]
    category: int
    available: bool = True
    popularity: float = 0.0
    latent_item: int = -1       # products sharing this id are the same physical item


@dataclass
class ClickLogTriplet:
    query_image: np.ndarray
    product_id: str
    product_index: int
    class_id: int
    relation: str               # identical | similar | noise


@dataclass
class EvalQuery:
    query_image: np.ndarray
    truth_pids: set[str]
    category: int


@dataclass
class GroundTruth:
    category: dict[str, int]
    latent_item: dict[str, int]
    same_item: dict[str, set[str]]
    eval_queries: list[EvalQuery]


@dataclass
class SyntheticCatalogSpec:
    n_classes: int = 200
    items_per_class: int = 10
    images_per_item: tuple[int, int] = (2, 6)    # uniform bounds, mean 4
    vocab_size: int = 1000
    relation_mix: tuple[float, float, float] = (0.45, 0.50, 0.05)
    seed: int = 0
    n_triplets: int | None = None                # default: 2 per product
    twin_rate: float = 0.05
    image_size: int = 16
    motif_cells: int = 4
    shared_motif_weight: float = 0.8             # visual confusability of a class pair
    item_jitter: float = 0.10
    view_noise: float = 0.10
    words_per_class: int = 6
    n_eval_queries: int = 200

    def __post_init__(self):
        if abs(sum(self.relation_mix) - 1.0) > 1e-9:
            raise ValueError("relation mix must sum to 1")
        if min(self.n_classes, self.items_per_class, self.images_per_item[0]) < 1:
            raise ValueError("all counts must be >= 1")


RELATIONS = ("identical", "similar", "noise")


def _upscale(cells: np.ndarray, size: int) -> np.ndarray:
    factor = size // cells.shape[0]
    return np.kron(cells, np.ones((factor, factor)))


def _render_view(pattern: np.ndarray, noise: float,
                 rng: np.random.Generator) -> np.ndarray:
    return np.clip(pattern + noise * rng.standard_normal(pattern.shape), 0.0, 1.0)


class _Latents:
    """Per-item latent patterns; kept to mint fresh views for eval queries."""

    def __init__(self):
        self.pattern: dict[str, np.ndarray] = {}


def generate_synthetic_logs(spec: SyntheticCatalogSpec
                            ) -> tuple[list[ProductRecord], list[ClickLogTriplet],
                                       GroundTruth]:
    """Build (catalog, click logs, ground truth) for the given spec."""
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size

    n_pairs = (spec.n_classes + 1) // 2
    pair_base = [rng.uniform(0, 1, (spec.motif_cells, spec.motif_cells))
                 for _ in range(n_pairs)]
    class_motif = []
    for c in range(spec.n_classes):
        own = rng.uniform(0, 1, (spec.motif_cells, spec.motif_cells))
        mixed = spec.shared_motif_weight * pair_base[c // 2] \
            + (1.0 - spec.shared_motif_weight) * own
        class_motif.append(_upscale(mixed, size))
    class_words = [[f"k{c:03d}w{j}" for j in range(spec.words_per_class)]
                   for c in range(spec.n_classes)]

    catalog: list[ProductRecord] = []
    latents = _Latents()
    latent_counter = 0

    def add_product(cls: int, pattern: np.ndarray, words: list[str],
                    latent: int) -> None:
        pid = f"p{len(catalog):06d}"
        n_imgs = int(rng.integers(spec.images_per_item[0],
                                  spec.images_per_item[1] + 1))
        images = [_render_view(pattern, spec.view_noise, rng)
                  for _ in range(n_imgs)]
        catalog.append(ProductRecord(
            product_id=pid, title=" ".join(words), images=images, category=cls,
            popularity=float(rng.uniform()), latent_item=latent))
        latents.pattern[pid] = pattern

    for cls in range(spec.n_classes):
        for item in range(spec.items_per_class):
            pattern = np.clip(class_motif[cls]
                              + spec.item_jitter * rng.standard_normal((size, size)),
                              0.0, 1.0)
            k = int(rng.integers(3, spec.words_per_class + 1))
            words = [class_words[cls][w]
                     for w in rng.permutation(spec.words_per_class)[:k]]
            words.append(f"v{cls}x{item}")
            latent = latent_counter
            latent_counter += 1
            add_product(cls, pattern, words, latent)
            if rng.uniform() < spec.twin_rate:
                twin_words = [words[w] for w in rng.permutation(len(words))]
                add_product(cls, pattern, twin_words, latent)

    by_class: dict[int, list[int]] = {}
    for idx, rec in enumerate(catalog):
        by_class.setdefault(rec.category, []).append(idx)

    n_triplets = spec.n_triplets if spec.n_triplets is not None else 2 * len(catalog)
    quotas = [int(round(m * n_triplets)) for m in spec.relation_mix]
    quotas[0] += n_triplets - sum(quotas)
    relations = np.concatenate([np.full(q, i) for i, q in enumerate(quotas)])
    relations = relations[rng.permutation(n_triplets)]

    logs: list[ClickLogTriplet] = []
    for rel_idx in relations:
        relation = RELATIONS[rel_idx]
        target = int(rng.integers(len(catalog)))
        rec = catalog[target]
        if relation == "identical":
            query = rec.images[int(rng.integers(len(rec.images)))]
        elif relation == "similar":
            peers = [i for i in by_class[rec.category] if i != target]
            source = catalog[peers[int(rng.integers(len(peers)))]] if peers else rec
            query = source.images[int(rng.integers(len(source.images)))]
        else:
            other = int(rng.integers(len(catalog)))
            query = catalog[other].images[int(rng.integers(len(catalog[other].images)))]
        logs.append(ClickLogTriplet(query_image=query, product_id=rec.product_id,
                                    product_index=target, class_id=rec.category,
                                    relation=relation))

    groups: dict[int, set[str]] = {}
    for rec in catalog:
        groups.setdefault(rec.latent_item, set()).add(rec.product_id)
    truth = GroundTruth(
        category={r.product_id: r.category for r in catalog},
        latent_item={r.product_id: r.latent_item for r in catalog},
        same_item={r.product_id: groups[r.latent_item] for r in catalog},
        eval_queries=[])

    eval_rng = np.random.default_rng(spec.seed + records_salt(spec))
    for _ in range(spec.n_eval_queries):
        rec = catalog[int(eval_rng.integers(len(catalog)))]
        view = _render_view(latents.pattern[rec.product_id], spec.view_noise,
                            eval_rng)
        truth.eval_queries.append(EvalQuery(
            query_image=view, truth_pids=set(truth.same_item[rec.product_id]),
            category=rec.category))
    return catalog, logs, truth


def records_salt(spec: SyntheticCatalogSpec) -> int:
    # fixed offset keeps the eval stream independent of the corpus stream
    return 7_654_321


def churn_catalog(catalog: list[ProductRecord], rng: np.random.Generator,
                  frac_delete: float = 0.05, frac_add: float = 0.05,
                  frac_modify: float = 0.05) -> list[ProductRecord]:
    """One day of catalog churn: drop, modify, and add products.

    Returns a new record list; input records are never mutated.  New product
    ids continue the existing numbering, modified items get a title suffix or
    a replaced first image (either way their content hash changes).
    """
    n = len(catalog)
    dead = set(rng.choice(n, size=int(frac_delete * n), replace=False).tolist())
    kept = [rec for i, rec in enumerate(catalog) if i not in dead]

    n_modify = int(frac_modify * len(kept))
    for i in rng.choice(len(kept), size=n_modify, replace=False):
        rec = kept[i]
        if rng.uniform() < 0.5:
            kept[i] = ProductRecord(rec.product_id, rec.title + " promo",
                                    rec.images, rec.category, rec.available,
                                    rec.popularity, rec.latent_item)
        else:
            images = list(rec.images)
            images[0] = np.clip(images[0]
                                + 0.05 * rng.standard_normal(images[0].shape),
                                0.0, 1.0)
            kept[i] = ProductRecord(rec.product_id, rec.title, images,
                                    rec.category, rec.available,
                                    rec.popularity, rec.latent_item)

    next_id = 1 + max((int(rec.product_id[1:]) for rec in catalog
                       if rec.product_id[1:].isdigit()), default=-1)
    added = []
    for j in range(int(frac_add * n)):
        template = kept[int(rng.integers(len(kept)))]
        images = [np.clip(img + 0.08 * rng.standard_normal(img.shape), 0.0, 1.0)
                  for img in template.images]
        added.append(ProductRecord(
            f"p{next_id + j:06d}", template.title + f" baru{j}", images,
            template.category, True, float(rng.uniform()), -1))
    return kept + added


# -- corpus files ---------------------------------------------------------------

def save_corpus(directory, catalog: list[ProductRecord],
                logs: list[ClickLogTriplet], truth: GroundTruth) -> None:
    """Write the corpus as deterministic .npy arrays plus a sorted-key manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.stack([img for rec in catalog for img in rec.images])
    counts = [len(rec.images) for rec in catalog]
    offsets = np.concatenate([[0], np.cumsum(counts)]).tolist()
    np.save(directory / "catalog_images.npy", images)
    np.save(directory / "query_images.npy",
            np.stack([t.query_image for t in logs]) if logs
            else np.empty((0, 16, 16)))
    np.save(directory / "eval_images.npy",
            np.stack([q.query_image for q in truth.eval_queries])
            if truth.eval_queries else np.empty((0, 16, 16)))
    manifest = {
        "products": [{
            "product_id": r.product_id, "title": r.title, "category": r.category,
            "available": r.available, "popularity": r.popularity,
            "latent_item": r.latent_item, "image_offset": offsets[i],
            "image_count": counts[i],
        } for i, r in enumerate(catalog)],
        "triplets": [{
            "product_id": t.product_id, "product_index": t.product_index,
            "class_id": t.class_id, "relation": t.relation,
        } for t in logs],
        "eval_queries": [{
            "truth_pids": sorted(q.truth_pids), "category": q.category,
        } for q in truth.eval_queries],
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))


def load_corpus(directory) -> tuple[list[ProductRecord], list[ClickLogTriplet],
                                    GroundTruth]:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    images = np.load(directory / "catalog_images.npy")
    query_images = np.load(directory / "query_images.npy")
    eval_images = np.load(directory / "eval_images.npy")

    catalog = []
    for entry in manifest["products"]:
        lo, n = entry["image_offset"], entry["image_count"]
        catalog.append(ProductRecord(
            product_id=entry["product_id"], title=entry["title"],
            images=[images[lo + j] for j in range(n)],
            category=entry["category"], available=entry["available"],
            popularity=entry["popularity"], latent_item=entry["latent_item"]))

    logs = [ClickLogTriplet(query_image=query_images[i],
                            product_id=e["product_id"],
                            product_index=e["product_index"],
                            class_id=e["class_id"], relation=e["relation"])
            for i, e in enumerate(manifest["triplets"])]

    groups: dict[int, set[str]] = {}
    for rec in catalog:
        groups.setdefault(rec.latent_item, set()).add(rec.product_id)
    truth = GroundTruth(
        category={r.product_id: r.category for r in catalog},
        latent_item={r.product_id: r.latent_item for r in catalog},
        same_item={r.product_id: groups[r.latent_item] for r in catalog},
        eval_queries=[EvalQuery(query_image=eval_images[i],
                                truth_pids=set(e["truth_pids"]),
                                category=e["category"])
                      for i, e in enumerate(manifest["eval_queries"])])
    return catalog, logs, truth
