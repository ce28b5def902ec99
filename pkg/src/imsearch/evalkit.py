"""Offline evaluation harness.

Retrieval metrics (Recall@k over ground-truth same-item sets, category
accuracy over the modal top-10 category), a pairwise same-item classifier
with union-find merging, a fusion-weight sweep, and a report that renders
one row per retrieval configuration.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .engine import DualIndexSet, fuse_scores, recall_with_dedup
from .hnsw import HnswIndex
from .lifecycle import make_image_key, split_image_key
from .synth import EvalQuery, ProductRecord
from .tensor import Tensor, no_grad
from .towers import ItemInput, TwoTowerModel
from .trainer import adamw_state, adamw_step

RECALL_KS = (1, 5, 10, 50, 100)


def recall_at_k(results: list[str], truth: set[str], k: int) -> int:
    """1 iff any of the top-k result ids is in the truth set."""
    if not truth:
        raise ValueError("empty truth set")
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(any(pid in truth for pid in results[:k]))


def category_accuracy(results: list[str], categories: dict[str, int],
                      truth_category: int) -> int:
    """1 iff the modal category of the top-10 results matches the truth.

    Ties go to the category of the highest-ranked item among the tied
    categories.
    """
    if not results:
        raise ValueError("no results to score")
    top = results[:10]
    cats = []
    for pid in top:
        if pid not in categories:
            raise KeyError(f"result {pid!r} missing from catalog")
        cats.append(categories[pid])
    counts = Counter(cats)
    best_count = max(counts.values())
    tied = {cat for cat, n in counts.items() if n == best_count}
    for cat in cats:                    # first-ranked tied category wins
        if cat in tied:
            return int(cat == truth_category)
    raise AssertionError("unreachable")


# -- same-item merging ---------------------------------------------------------------

@dataclass
class PairClassifier:
    """Two-layer perceptron over concatenated embedding pairs."""

    params: dict[str, np.ndarray]
    threshold: float = 0.5

    def logits(self, pairs: np.ndarray) -> np.ndarray:
        hidden = np.tanh(pairs @ self.params["w1"] + self.params["b1"])
        return (hidden @ self.params["w2"] + self.params["b2"]).reshape(-1)

    def predict_proba(self, a: np.ndarray, b: np.ndarray) -> float:
        pair = np.concatenate([a, b])[None, :]
        return float(1.0 / (1.0 + np.exp(-self.logits(pair)[0])))


def train_pair_classifier(embeddings: dict[str, np.ndarray],
                          same_item: dict[str, set[str]],
                          rng: np.random.Generator, hidden: int = 32,
                          steps: int = 400, lr: float = 1e-2,
                          threshold: float = 0.5,
                          hard_negatives: int = 5) -> PairClassifier:
    """Fit the pair classifier on labeled same-item pairs.

    Positives are all same-item pairs.  Negatives mix each product's nearest
    different-item neighbors (the pairs merging will actually probe) with
    random pairs, 4x the positive count in total.
    """
    pids = sorted(embeddings)
    positives = []
    for pid in pids:
        for other in sorted(same_item.get(pid, ())):
            if other != pid and other in embeddings:
                positives.append((pid, other))
    if not positives:
        raise ValueError("no positive same-item pairs to train on")

    matrix = np.stack([embeddings[pid] for pid in pids])
    sims = matrix @ matrix.T
    negatives = []
    for i, pid in enumerate(pids):
        order = np.argsort(-sims[i])
        taken = 0
        for j in order:
            if taken >= hard_negatives:
                break
            if j == i or pids[j] in same_item.get(pid, ()):
                continue
            negatives.append((pid, pids[j]))
            taken += 1
    while len(negatives) < 4 * len(positives):
        a, b = rng.choice(len(pids), size=2, replace=False)
        if pids[b] not in same_item.get(pids[a], ()):
            negatives.append((pids[a], pids[b]))

    pairs = positives + negatives
    x = np.stack([np.concatenate([embeddings[a], embeddings[b]])
                  for a, b in pairs])
    y = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    dim = x.shape[1]

    w1 = Tensor(rng.standard_normal((dim, hidden)) * (1.0 / np.sqrt(dim)),
                requires_grad=True)
    b1 = Tensor(np.zeros(hidden), requires_grad=True)
    w2 = Tensor(rng.standard_normal((hidden, 1)) * (1.0 / np.sqrt(hidden)),
                requires_grad=True)
    b2 = Tensor(np.zeros(1), requires_grad=True)
    params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}
    state = adamw_state({k: t.data for k, t in params.items()})
    xt, yt = Tensor(x), Tensor(y)
    for _ in range(steps):
        for t in params.values():
            t.zero_grad()
        z = ((xt @ w1 + b1).tanh() @ w2 + b2).reshape(len(pairs))
        loss = (z.softplus() - yt * z).mean()       # BCE with logits
        loss.backward()
        adamw_step({k: t.data for k, t in params.items()},
                   {k: t.grad for k, t in params.items()}, state, lr, 0.0)
    return PairClassifier({k: t.data for k, t in params.items()}, threshold)


class _UnionFind:
    def __init__(self, keys):
        self.parent = {k: k for k in keys}

    def find(self, k):
        while self.parent[k] != k:
            self.parent[k] = self.parent[self.parent[k]]
            k = self.parent[k]
        return k

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic: smaller key becomes the root
            lo, hi = sorted((ra, rb))
            self.parent[hi] = lo


def merge_same_items(embeddings: dict[str, np.ndarray],
                     classifier: PairClassifier, k_probe: int = 10,
                     threshold: float | None = None,
                     seed: int = 0) -> list[set[str]]:
    """Group products into same-item clusters.

    Each product probes its top-k ANN neighbors; pairs the classifier scores
    above the threshold merge via union-find, so the output is a partition
    of all product ids (symmetric and transitive by construction).
    """
    threshold = classifier.threshold if threshold is None else threshold
    pids = sorted(embeddings)
    uf = _UnionFind(pids)
    if len(pids) > 1:
        dim = len(next(iter(embeddings.values())))
        index = HnswIndex(dim, seed=seed)
        for pid in pids:
            index.insert(pid, embeddings[pid])
        for pid in pids:
            hits = index.search(embeddings[pid], k=min(k_probe + 1, len(pids)),
                                ef_search=max(64, k_probe + 1))
            for hit in hits:
                if hit.key == pid:
                    continue
                if classifier.predict_proba(embeddings[pid],
                                            embeddings[hit.key]) > threshold:
                    uf.union(pid, hit.key)
    groups: dict[str, set[str]] = {}
    for pid in pids:
        groups.setdefault(uf.find(pid), set()).add(pid)
    return [groups[root] for root in sorted(groups)]


# -- retrieval configurations -----------------------------------------------------------

def build_per_image_index(model: TwoTowerModel, catalog: list[ProductRecord],
                          seed: int = 7, m: int = 16,
                          ef_construction: int = 200) -> HnswIndex:
    """One fused embedding per (image, title) pair, keyed pid#idx.

    The variant trades the storage win for a little recall; it is reported
    alongside the deployed configurations.
    """
    index = HnswIndex(model.cfg.output_dim, m=m,
                      ef_construction=ef_construction, seed=seed)
    items, keys = [], []
    for rec in catalog:
        for idx, img in enumerate(rec.images):
            items.append(ItemInput.build(rec.title, [img], model.cfg, k=1))
            keys.append(make_image_key(rec.product_id, idx))
    if items:
        for key, emb in zip(keys, model.item_embeddings(items)):
            index.insert(key, emb)
    return index


def _dedup_image_hits(hits, k):
    best: dict[str, float] = {}
    for hit in hits:
        pid, _ = split_image_key(hit.key)
        if pid not in best:
            best[pid] = hit.score
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:k]


def ranked_products(query_emb: np.ndarray, indexes: DualIndexSet, config: str,
                    max_k: int, weight: float = 1.0,
                    per_image_index: HnswIndex | None = None,
                    ef_search: int | None = None) -> list[str]:
    """Ranked product ids for one query under a retrieval configuration."""
    ef = ef_search if ef_search is not None else max(64, max_k * 2)

    if config == "i2i":
        cands = recall_with_dedup(indexes, query_emb, max_k, "i2i",
                                  ef_search=ef)
        return [c.product_id for c in cands]
    if config == "mm":
        cands = recall_with_dedup(indexes, query_emb, max_k, "mm",
                                  ef_search=ef)
        return [c.product_id for c in cands]
    if config == "mm+i2i":
        i2i = recall_with_dedup(indexes, query_emb, max_k, "i2i", ef_search=ef)
        mm = recall_with_dedup(indexes, query_emb, max_k, "mm", ef_search=ef)
        return [pid for pid, _ in fuse_scores(i2i, mm, weight)][:max_k]
    if config == "mm_per_image":
        if per_image_index is None:
            raise ValueError("mm_per_image requires the per-image index")
        fetch = max_k * 3
        hits = per_image_index.search(query_emb, fetch,
                                      ef_search=max(ef, fetch))
        return [pid for pid, _ in _dedup_image_hits(hits, max_k)]
    raise ValueError(f"unknown configuration {config!r}")


@dataclass
class EvalReport:
    rows: dict[str, dict[str, float]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    COLUMNS = ("category_accuracy",) + tuple(f"recall@{k}" for k in RECALL_KS)

    def add(self, name: str, metrics: dict[str, float]) -> None:
        recalls = [metrics[f"recall@{k}"] for k in RECALL_KS]
        if any(b < a - 1e-12 for a, b in zip(recalls, recalls[1:])):
            raise ValueError("recall must be non-decreasing in k")
        self.rows[name] = metrics

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("model",) + self.COLUMNS)
            for name, metrics in self.rows.items():
                writer.writerow([name] + [f"{metrics[c]:.4f}"
                                          for c in self.COLUMNS])

    def to_text(self) -> str:
        headers = ("Model", "Category Accuracy", "Recall@1", "Recall@5",
                   "Recall@10", "Recall@50", "Recall@100")
        table = [headers]
        for name, metrics in self.rows.items():
            table.append((name,) + tuple(f"{metrics[c]:.4f}"
                                         for c in self.COLUMNS))
        widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
        lines = []
        for i, row in enumerate(table):
            lines.append("  ".join(cell.ljust(widths[j])
                                   for j, cell in enumerate(row)).rstrip())
            if i == 0:
                lines.append("  ".join("-" * widths[j]
                                       for j in range(len(headers))))
        return "\n".join(lines)


def evaluate_config(query_embs: np.ndarray, queries: list[EvalQuery],
                    indexes: DualIndexSet, config: str, weight: float = 1.0,
                    per_image_index: HnswIndex | None = None,
                    ef_search: int | None = None) -> dict[str, float]:
    max_k = max(RECALL_KS)
    categories = {pid: rec.category for pid, rec in indexes.catalog.items()}
    recall_sums = {k: 0 for k in RECALL_KS}
    cat_sum = 0
    for emb, query in zip(query_embs, queries):
        results = ranked_products(emb, indexes, config, max_k, weight,
                                  per_image_index, ef_search)
        for k in RECALL_KS:
            recall_sums[k] += recall_at_k(results, query.truth_pids, k)
        cat_sum += category_accuracy(results, categories, query.category)
    n = len(queries)
    metrics = {f"recall@{k}": recall_sums[k] / n for k in RECALL_KS}
    metrics["category_accuracy"] = cat_sum / n
    return metrics


def sweep_fusion_weight(query_embs: np.ndarray, queries: list[EvalQuery],
                        indexes: DualIndexSet, grid: list[float],
                        ef_search: int | None = None
                        ) -> tuple[float, list[tuple[float, float]]]:
    """Recall@5 per fusion weight; returns (best weight, full curve), ties
    going to the smaller weight."""
    if not grid:
        raise ValueError("empty weight grid")
    curve = []
    for weight in grid:
        score = 0
        for emb, query in zip(query_embs, queries):
            results = ranked_products(emb, indexes, "mm+i2i", 5, weight,
                                      ef_search=ef_search)
            score += recall_at_k(results, query.truth_pids, 5)
        curve.append((float(weight), score / len(queries)))
    best = max(curve, key=lambda pair: (pair[1], -pair[0]))
    return best[0], curve


def run_offline_eval(model: TwoTowerModel, indexes: DualIndexSet,
                     queries: list[EvalQuery], weight: float = 1.0,
                     include_per_image: bool = False,
                     per_image_index: HnswIndex | None = None,
                     ef_search: int | None = None) -> EvalReport:
    """One report row per retrieval configuration, deterministic given inputs."""
    if not queries:
        raise ValueError("no evaluation queries")
    query_embs = model.image_embeddings(
        np.stack([q.query_image for q in queries]))
    report = EvalReport(config={"weight": weight, "n_queries": len(queries),
                                "ef_search": ef_search})
    configs = ["i2i", "mm", "mm+i2i"]
    if include_per_image:
        configs.append("mm_per_image")
    for config in configs:
        report.add(config, evaluate_config(query_embs, queries, indexes,
                                           config, weight, per_image_index,
                                           ef_search))
    return report
