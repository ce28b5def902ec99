"""Offline evaluation: metrics vs brute-force oracles, merging, the report."""

import numpy as np
import pytest

from imsearch.engine import DualIndexSet, build_dual_indexes
from imsearch.evalkit import (EvalReport, RECALL_KS, build_per_image_index,
                              category_accuracy, merge_same_items,
                              recall_at_k, run_offline_eval,
                              sweep_fusion_weight, train_pair_classifier)
from imsearch.hnsw import HnswIndex
from imsearch.synth import (EvalQuery, ProductRecord, SyntheticCatalogSpec,
                            generate_synthetic_logs)
from imsearch.towers import ModelConfig, TwoTowerModel

MODEL_CFG = ModelConfig(token_dim=16, n_heads=2, ffn_dim=32, output_dim=16,
                        vocab_size=128, max_title_len=8, k_images=4)


class TestRecallAtK:
    def test_truth_outside_top1(self):
        assert recall_at_k(["b", "a", "c"], {"a"}, 1) == 0

    def test_truth_inside_top2(self):
        assert recall_at_k(["b", "a", "c"], {"a"}, 2) == 1

    def test_empty_truth_rejected(self):
        with pytest.raises(ValueError):
            recall_at_k(["a"], set(), 1)

    def test_matches_independent_scan(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            results = [f"p{i}" for i in rng.permutation(20)]
            truth = {f"p{i}" for i in rng.choice(20, size=3, replace=False)}
            k = int(rng.integers(1, 20))
            want = 0
            for pid in results[:k]:          # independent scan
                if pid in truth:
                    want = 1
                    break
            assert recall_at_k(results, truth, k) == want

    def test_non_decreasing_in_k(self):
        rng = np.random.default_rng(1)
        results = [f"p{i}" for i in rng.permutation(30)]
        truth = {"p7", "p19"}
        values = [recall_at_k(results, truth, k) for k in range(1, 31)]
        assert all(b >= a for a, b in zip(values, values[1:]))


class TestCategoryAccuracy:
    def _cats(self, labels):
        return {f"p{i}": c for i, c in enumerate(labels)}

    def test_clear_majority(self):
        cats = self._cats("AAAAAABBBB")
        results = [f"p{i}" for i in range(10)]
        assert category_accuracy(results, cats, "A") == 1
        assert category_accuracy(results, cats, "B") == 0

    def test_tie_goes_to_highest_ranked(self):
        cats = self._cats("ABABABABAB")       # 5-5 tie, A ranked first
        results = [f"p{i}" for i in range(10)]
        assert category_accuracy(results, cats, "A") == 1
        assert category_accuracy(results, cats, "B") == 0

    def test_matches_mode_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            labels = rng.integers(0, 4, size=10)
            cats = {f"p{i}": int(c) for i, c in enumerate(labels)}
            results = [f"p{i}" for i in range(10)]
            counts = {}
            for c in labels:
                counts[int(c)] = counts.get(int(c), 0) + 1
            best = max(counts.values())
            modal = next(int(c) for c in labels if counts[int(c)] == best)
            truth = int(rng.integers(0, 4))
            assert category_accuracy(results, cats, truth) == int(modal == truth)

    def test_unknown_result_id(self):
        with pytest.raises(KeyError):
            category_accuracy(["ghost"], {}, "A")


def synthetic_embeddings(rng, n_latents=12, twins_every=3, dim=16, noise=0.05):
    """Products clustered by latent item; every third latent has a twin."""
    latents = rng.standard_normal((n_latents, dim))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    embeddings, same_item = {}, {}
    pid = 0
    for latent_id in range(n_latents):
        ids = [f"p{pid:03d}"]
        pid += 1
        if latent_id % twins_every == 0:
            ids.append(f"p{pid:03d}")
            pid += 1
        for one in ids:
            vec = latents[latent_id] + noise * rng.standard_normal(dim)
            embeddings[one] = vec / np.linalg.norm(vec)
            same_item[one] = set(ids)
    return embeddings, same_item


class TestSameItemMerging:
    def test_twins_merge_into_one_group(self):
        rng = np.random.default_rng(3)
        embeddings, same_item = synthetic_embeddings(rng)
        clf = train_pair_classifier(embeddings, same_item, rng)
        groups = merge_same_items(embeddings, clf)
        by_pid = {pid: g for g in groups for pid in g}
        for pid, want in same_item.items():
            assert by_pid[pid] == want

    def test_threshold_one_means_no_merges(self):
        rng = np.random.default_rng(4)
        embeddings, same_item = synthetic_embeddings(rng)
        clf = train_pair_classifier(embeddings, same_item, rng)
        groups = merge_same_items(embeddings, clf, threshold=1.0)
        assert all(len(g) == 1 for g in groups)
        assert len(groups) == len(embeddings)

    def test_output_is_a_partition(self):
        rng = np.random.default_rng(5)
        embeddings, same_item = synthetic_embeddings(rng, n_latents=9)
        clf = train_pair_classifier(embeddings, same_item, rng)
        groups = merge_same_items(embeddings, clf, threshold=0.2)
        seen = [pid for g in groups for pid in g]
        assert sorted(seen) == sorted(embeddings)
        assert len(seen) == len(set(seen))

    def test_classifier_probability_range(self):
        rng = np.random.default_rng(6)
        embeddings, same_item = synthetic_embeddings(rng)
        clf = train_pair_classifier(embeddings, same_item, rng)
        pids = sorted(embeddings)
        for a, b in zip(pids, pids[1:]):
            p = clf.predict_proba(embeddings[a], embeddings[b])
            assert 0.0 < p < 1.0


def crafted_indexes(rng, n=20, dim=8):
    """mm retrieval is perfect; i2i is scrambled, so fusion must help."""
    catalog = {}
    mm = HnswIndex(dim, seed=0)
    i2i = HnswIndex(dim, seed=1)
    latents = rng.standard_normal((n, dim))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    for i in range(n):
        pid = f"p{i:03d}"
        catalog[pid] = ProductRecord(pid, f"item {i}", [], category=i % 4)
        mm.insert(pid, latents[i])
        noise = rng.standard_normal(dim)
        i2i.insert(f"{pid}#0", noise / np.linalg.norm(noise))
    queries = [EvalQuery(np.zeros((16, 16)), {f"p{i:03d}"}, i % 4)
               for i in range(n)]
    return DualIndexSet(i2i, mm, catalog), latents, queries


class TestSweep:
    def test_single_point_grid(self):
        rng = np.random.default_rng(7)
        indexes, latents, queries = crafted_indexes(rng)
        best, curve = sweep_fusion_weight(latents, queries, indexes, [0.0])
        assert best == 0.0
        assert len(curve) == 1

    def test_fusion_helps_when_mm_is_better(self):
        rng = np.random.default_rng(8)
        indexes, latents, queries = crafted_indexes(rng)
        best, curve = sweep_fusion_weight(latents, queries, indexes,
                                          [0.0, 1.0])
        assert best == 1.0
        assert len(curve) == 2
        assert curve[1][1] > curve[0][1]

    def test_tie_prefers_smaller_weight(self):
        rng = np.random.default_rng(9)
        indexes, latents, queries = crafted_indexes(rng)
        best, curve = sweep_fusion_weight(latents, queries, indexes,
                                          [2.0, 1.0, 3.0])
        scores = dict(curve)
        assert scores[best] == max(s for _, s in curve)
        assert all(w >= best for w, s in curve if s == scores[best])

    def test_empty_grid_rejected(self):
        rng = np.random.default_rng(10)
        indexes, latents, queries = crafted_indexes(rng)
        with pytest.raises(ValueError):
            sweep_fusion_weight(latents, queries, indexes, [])


@pytest.fixture(scope="module")
def eval_setup():
    model = TwoTowerModel.init(MODEL_CFG, seed=6)
    catalog, _, truth = generate_synthetic_logs(SyntheticCatalogSpec(
        n_classes=4, items_per_class=4, images_per_item=(2, 3),
        vocab_size=128, seed=13, n_triplets=8, twin_rate=0.0,
        n_eval_queries=25))
    indexes = build_dual_indexes(model, catalog, seed=2)
    return model, catalog, indexes, truth.eval_queries


class TestRunOfflineEval:

    def test_single_product_catalog_all_recalls_one(self):
        model = TwoTowerModel.init(MODEL_CFG, seed=6)
        rng = np.random.default_rng(11)
        rec = ProductRecord("p0", "gelang emas",
                            [rng.uniform(size=(16, 16))], 0)
        indexes = build_dual_indexes(model, [rec], seed=0)
        queries = [EvalQuery(rng.uniform(size=(16, 16)), {"p0"}, 0)
                   for _ in range(5)]
        report = run_offline_eval(model, indexes, queries)
        for row in report.rows.values():
            for k in RECALL_KS:
                assert row[f"recall@{k}"] == 1.0
            assert row["category_accuracy"] == 1.0

    def test_rows_and_recall_monotonicity(self, setup):
        model, catalog, indexes, queries = setup
        per_image = build_per_image_index(model, catalog, seed=5)
        report = run_offline_eval(model, indexes, queries,
                                  include_per_image=True,
                                  per_image_index=per_image)
        assert list(report.rows) == ["i2i", "mm", "mm+i2i", "mm_per_image"]
        for row in report.rows.values():
            values = [row[f"recall@{k}"] for k in RECALL_KS]
            assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))

    def test_deterministic(self, setup):
        model, catalog, indexes, queries = setup
        a = run_offline_eval(model, indexes, queries)
        b = run_offline_eval(model, indexes, queries)
        assert a.rows == b.rows

    def test_csv_and_text_outputs(self, setup, tmp_path):
        model, catalog, indexes, queries = setup
        report = run_offline_eval(model, indexes, queries)
        path = tmp_path / "report.csv"
        report.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("model,category_accuracy,recall@1")
        assert len(lines) == 4
        text = report.to_text()
        assert "Category Accuracy" in text and "Recall@100" in text
        assert text.splitlines()[2].startswith("i2i")
