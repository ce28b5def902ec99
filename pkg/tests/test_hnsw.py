"""HNSW index: oracle equivalence, tombstones, rebuild, snapshots."""

import numpy as np
import pytest

from imsearch.hnsw import (DuplicateKeyError, HnswIndex, SearchHit,
                           brute_force_knn, rebuild)

import oracles


def unit_vectors(rng, n, dim=16):
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def build_index(rng, n, dim=16, **kw):
    kw.setdefault("ef_construction", 64)
    index = HnswIndex(dim, m=8, seed=0, **kw)
    vectors = unit_vectors(rng, n, dim)
    for i, v in enumerate(vectors):
        index.insert(f"k{i:04d}", v)
    return index, vectors


def check_graph_invariants(index):
    for node, key in enumerate(index._keys):
        if key is None:
            continue
        adj = index._adj[node]
        assert len(adj) == index._levels[node] + 1
        for lc, neighbors in enumerate(adj):
            bound = index.m_max0 if lc == 0 else index.m
            assert len(neighbors) <= bound
            assert len(set(neighbors)) == len(neighbors)
            for other in neighbors:
                assert index._levels[other] >= lc


class TestInsert:
    def test_first_insert_becomes_entry_point(self):
        index = HnswIndex(4, seed=1)
        index.insert("a", [1.0, 0.0, 0.0, 0.0])
        assert index._keys[index._entry] == "a"
        assert index.search([1, 0, 0, 0], k=1)[0] == SearchHit("a", pytest.approx(1.0))

    def test_duplicate_live_key_rejected(self):
        index = HnswIndex(4, seed=1)
        index.insert("a", [1.0, 0.0, 0.0, 0.0])
        with pytest.raises(DuplicateKeyError):
            index.insert("a", [0.0, 1.0, 0.0, 0.0])

    def test_dim_mismatch_rejected(self):
        index = HnswIndex(4, seed=1)
        with pytest.raises(ValueError):
            index.insert("a", [1.0, 0.0])

    def test_self_query_top_hit_all_100(self):
        rng = np.random.default_rng(2)
        index, vectors = build_index(rng, 100)
        for i, v in enumerate(vectors):
            hits = index.search(v, k=1, ef_search=100)
            assert hits[0].key == f"k{i:04d}"
            assert hits[0].score == pytest.approx(1.0)

    def test_reinsert_deleted_key_with_new_vector(self):
        rng = np.random.default_rng(3)
        index, vectors = build_index(rng, 60, auto_rebuild=False)
        replacement = unit_vectors(rng, 1)[0]
        index.delete("k0007")
        index.insert("k0007", replacement)
        store = dict(index.items())
        for q in unit_vectors(rng, 10):
            got = index.search(q, k=5, ef_search=60)
            want = brute_force_knn(store, q, 5)
            assert [h.key for h in got] == [h.key for h in want]
        np.testing.assert_allclose(index.get_vector("k0007"), replacement)
        check_graph_invariants(index)

    def test_graph_invariants_after_inserts(self):
        rng = np.random.default_rng(4)
        index, _ = build_index(rng, 150)
        check_graph_invariants(index)


class TestDelete:
    def test_two_keys_delete_one(self):
        index = HnswIndex(3, seed=0)
        index.insert("a", [1, 0, 0])
        index.insert("b", [0, 1, 0])
        index.delete("a")
        hits = index.search([1, 0, 0], k=5, ef_search=5)
        assert [h.key for h in hits] == ["b"]

    def test_delete_all_empties_results(self):
        rng = np.random.default_rng(5)
        index, _ = build_index(rng, 20)
        for i in range(20):
            index.delete(f"k{i:04d}")
        assert index.search(unit_vectors(rng, 1)[0], k=3) == []

    def test_unknown_key(self):
        index = HnswIndex(3, seed=0)
        index.insert("a", [1, 0, 0])
        with pytest.raises(KeyError):
            index.delete("zz")
        index.delete("a")
        with pytest.raises(KeyError):
            index.delete("a")

    def test_tombstoned_keys_never_surface(self):
        rng = np.random.default_rng(6)
        index, _ = build_index(rng, 120, auto_rebuild=False)
        dead = {f"k{i:04d}" for i in rng.choice(120, size=50, replace=False)}
        for key in sorted(dead):
            index.delete(key)
        for q in unit_vectors(rng, 25):
            for ef in (8, 30, 200):
                for hit in index.search(q, k=8, ef_search=max(ef, 8)):
                    assert hit.key not in dead

    def test_recall_after_30pct_deletes(self):
        rng = np.random.default_rng(7)
        index, _ = build_index(rng, 400, dim=16, auto_rebuild=False)
        dead = {f"k{i:04d}" for i in rng.choice(400, size=120, replace=False)}
        for key in sorted(dead):
            index.delete(key)
        store = dict(index.items())
        hits = 0
        for q in unit_vectors(rng, 50):
            got = {h.key for h in index.search(q, k=10, ef_search=64)}
            want = {h.key for h in brute_force_knn(store, q, 10)}
            hits += len(got & want)
        assert hits / (50 * 10) >= 0.95


class TestSearch:
    def test_exact_when_ef_covers_live_count(self):
        rng = np.random.default_rng(8)
        index, _ = build_index(rng, 80)
        store = dict(index.items())
        for q in unit_vectors(rng, 20):
            got = index.search(q, k=10, ef_search=80)
            want = brute_force_knn(store, q, 10)
            assert got == want

    def test_k_larger_than_live_returns_all(self):
        rng = np.random.default_rng(9)
        index, _ = build_index(rng, 7)
        hits = index.search(unit_vectors(rng, 1)[0], k=50, ef_search=50)
        assert sorted(h.key for h in hits) == [f"k{i:04d}" for i in range(7)]

    def test_stored_vector_query_scores_one(self):
        rng = np.random.default_rng(10)
        index, vectors = build_index(rng, 40)
        hits = index.search(vectors[13], k=3, ef_search=40)
        assert hits[0].key == "k0013"
        assert hits[0].score == pytest.approx(1.0)

    def test_empty_index_returns_empty(self):
        assert HnswIndex(8).search(np.ones(8), k=5) == []

    def test_parameter_validation(self):
        index = HnswIndex(4)
        index.insert("a", [1, 0, 0, 0])
        with pytest.raises(ValueError):
            index.search([1, 0, 0, 0], k=0)
        with pytest.raises(ValueError):
            index.search([1, 0, 0, 0], k=5, ef_search=3)

    def test_determinism(self):
        runs = []
        for _ in range(2):
            rng = np.random.default_rng(11)
            index, _ = build_index(rng, 90)
            q = unit_vectors(rng, 1)[0]
            runs.append((index._adj, index._levels,
                         index.search(q, k=5, ef_search=16)))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]
        assert runs[0][2] == runs[1][2]


class TestRebuild:
    def test_rebuild_without_tombstones_preserves_results(self):
        rng = np.random.default_rng(12)
        index, _ = build_index(rng, 70)
        queries = unit_vectors(rng, 15)
        before = [index.search(q, k=5, ef_search=70) for q in queries]
        fresh = rebuild(index)
        after = [fresh.search(q, k=5, ef_search=70) for q in queries]
        assert before == after
        check_graph_invariants(fresh)

    def test_rebuild_halved_index_restores_recall(self):
        rng = np.random.default_rng(13)
        index, _ = build_index(rng, 200, auto_rebuild=False)
        for i in range(0, 200, 2):
            index.delete(f"k{i:04d}")
        fresh = rebuild(index)
        assert fresh.live_count == 100
        assert fresh.deleted_count == 0
        store = dict(fresh.items())
        hits = 0
        for q in unit_vectors(rng, 40):
            got = {h.key for h in fresh.search(q, k=10, ef_search=64)}
            want = {h.key for h in brute_force_knn(store, q, 10)}
            hits += len(got & want)
        assert hits / 400 >= 0.95

    def test_empty_rebuild(self):
        fresh = rebuild(HnswIndex(8))
        assert fresh.live_count == 0
        assert fresh.search(np.ones(8), k=3) == []

    def test_auto_rebuild_triggers_on_ratio(self):
        rng = np.random.default_rng(14)
        index, _ = build_index(rng, 50, rebuild_threshold=0.2)
        for i in range(12):
            index.delete(f"k{i:04d}")
        # the ratio crossed 0.2 along the way, so a rebuild dropped the
        # accumulated tombstones; only the post-rebuild deletes remain
        assert index.live_count == 38
        assert index.deleted_count < 12
        assert not index.needs_rebuild()


class TestBruteForce:
    def test_single_vector(self):
        hits = brute_force_knn({"only": np.array([0.0, 2.0])}, [0.0, 1.0], 3)
        assert hits == [SearchHit("only", pytest.approx(1.0))]

    def test_orthogonal_ties_break_by_key(self):
        store = {"b": np.array([0.0, 1.0]), "a": np.array([0.0, -1.0])}
        hits = brute_force_knn(store, [1.0, 0.0], 2)
        assert [h.key for h in hits] == ["a", "b"]
        assert hits[0].score == pytest.approx(0.0, abs=1e-12)

    def test_matches_independent_quadratic_scan(self):
        rng = np.random.default_rng(15)
        vectors = unit_vectors(rng, 200, dim=8)
        store = {f"k{i:03d}": vectors[i] for i in range(200)}
        for q in unit_vectors(rng, 10, dim=8):
            got = brute_force_knn(store, q, 7)
            want = oracles.knn({k: v.tolist() for k, v in store.items()},
                               q.tolist(), 7)
            assert [h.key for h in got] == [key for key, _ in want]
            for hit, (_, score) in zip(got, want):
                assert hit.score == pytest.approx(score, abs=1e-12)


class TestSnapshot:
    def test_bit_exact_round_trip(self, tmp_path):
        rng = np.random.default_rng(16)
        index, _ = build_index(rng, 60, auto_rebuild=False)
        for i in range(5):
            index.delete(f"k{i:04d}")
        first = tmp_path / "index.snap"
        index.save(first)
        loaded = HnswIndex.load(first)
        second = tmp_path / "index2.snap"
        loaded.save(second)
        assert first.read_bytes() == second.read_bytes()
        q = unit_vectors(rng, 1)[0]
        assert index.search(q, k=5, ef_search=16) == \
            loaded.search(q, k=5, ef_search=16)

    def test_loaded_index_continues_level_stream(self, tmp_path):
        rng = np.random.default_rng(17)
        index, _ = build_index(rng, 30)
        extra = unit_vectors(rng, 5)

        path = tmp_path / "index.snap"
        index.save(path)
        loaded = HnswIndex.load(path)
        for i, v in enumerate(extra):
            index.insert(f"x{i}", v)
            loaded.insert(f"x{i}", v)
        assert index._levels == loaded._levels
        assert index._adj == loaded._adj

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bogus.snap"
        path.write_bytes(b"not a snapshot at all")
        with pytest.raises(ValueError):
            HnswIndex.load(path)

    def test_integer_keys_supported(self, tmp_path):
        index = HnswIndex(4, seed=3)
        for i in range(10):
            v = np.zeros(4)
            v[i % 4] = 1.0
            v[(i + 1) % 4] = 0.5
            index.insert(i, v)
        path = tmp_path / "ints.snap"
        index.save(path)
        loaded = HnswIndex.load(path)
        assert [k for k, _ in loaded.items()] == list(range(10))
