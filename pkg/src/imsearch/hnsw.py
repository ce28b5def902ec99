"""Hierarchical navigable small-world index over unit vectors.

Similarity is cosine over pre-normalized vectors, which reduces to a dot
product; results are sorted by descending score with ties broken by
ascending key, so a fixed seed and operation sequence reproduce identical
graphs and identical results.

Deletion tombstones a node: its edges stay in the graph so it keeps routing
searches, but it can never appear in results.  Because recall degrades as
tombstones accumulate, the index rebuilds itself from the live entries once
the deleted/live ratio passes a threshold (and ``rebuild`` can be called
explicitly at any time).  With ``ef_search`` at or above the live count the
search switches to an exact scan, making results equal to brute force by
construction.

Internally nodes are integer ids (ids double as matrix rows); user keys
appear only at the API boundary.
"""

from __future__ import annotations

import heapq
import math
import random
import struct
from typing import Hashable, Iterable, NamedTuple

import numpy as np


class DuplicateKeyError(ValueError):
    """Insert of a key that is already live."""


class SearchHit(NamedTuple):
    key: Hashable
    score: float


def _normalize(vector) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("cannot index a zero vector")
    return v / norm


class HnswIndex:
    def __init__(self, dim: int, m: int = 16, m_max0: int | None = None,
                 ef_construction: int = 200, seed: int = 0,
                 rebuild_threshold: float = 0.2, auto_rebuild: bool = True):
        if m < 2:
            raise ValueError("m must be >= 2")
        self.dim = dim
        self.m = m
        self.m_max0 = m_max0 if m_max0 is not None else 2 * m
        self.ef_construction = ef_construction
        self.seed = seed
        self.rebuild_threshold = rebuild_threshold
        self.auto_rebuild = auto_rebuild
        self._ml = 1.0 / math.log(m)
        self._rng = random.Random(seed)
        self._level_draws = 0

        self._matrix = np.empty((0, dim))
        self._keys: list[Hashable] = []            # by id; None once purged
        self._id: dict[Hashable, int] = {}         # live or tombstoned keys
        self._levels: list[int] = []
        self._adj: list[list[list[int]]] = []      # adj[id][level] -> ids
        self._dead: set[int] = set()               # tombstoned ids
        self._n_purged = 0
        self._entry = -1
        self._max_level = -1

    # -- bookkeeping ------------------------------------------------------------

    @property
    def live_count(self) -> int:
        return len(self._id) - len(self._dead)

    @property
    def deleted_count(self) -> int:
        return len(self._dead)

    def __len__(self) -> int:
        return self.live_count

    def __contains__(self, key: Hashable) -> bool:
        node = self._id.get(key)
        return node is not None and node not in self._dead

    def get_vector(self, key: Hashable) -> np.ndarray:
        return self._matrix[self._id[key]].copy()

    def items(self) -> Iterable[tuple[Hashable, np.ndarray]]:
        """Live (key, vector) pairs in insertion order."""
        dead = self._dead
        for node, key in enumerate(self._keys):
            if key is not None and node not in dead:
                yield key, self._matrix[node]

    # -- construction -------------------------------------------------------------

    def _draw_level(self) -> int:
        self._level_draws += 1
        u = self._rng.random()
        return int(-math.log(1.0 - u) * self._ml)

    def _purge(self, node: int) -> None:
        """Physically remove a tombstoned node so its key can be reused."""
        for level, neighbors in enumerate(self._adj[node]):
            for other in neighbors:
                lst = self._adj[other]
                if level < len(lst) and node in lst[level]:
                    lst[level].remove(node)
        self._adj[node] = []
        self._dead.discard(node)
        key = self._keys[node]
        self._keys[node] = None
        self._levels[node] = -1
        self._n_purged += 1
        del self._id[key]
        if self._entry == node:
            self._entry = -1
            self._max_level = -1
            for other, level in enumerate(self._levels):
                if self._keys[other] is not None and level > self._max_level:
                    self._entry, self._max_level = other, level

    def insert(self, key: Hashable, vector) -> None:
        """Insert a vector; re-insert of a tombstoned key replaces it."""
        self._insert_normalized(key, _normalize(vector))

    def _insert_normalized(self, key: Hashable, v: np.ndarray) -> None:
        # rebuild() enters here directly: stored vectors are already unit
        # norm and renormalizing would perturb their last bits
        if v.shape != (self.dim,):
            raise ValueError(f"expected dim {self.dim}, got {v.shape}")
        if key in self._id:
            if self._id[key] not in self._dead:
                raise DuplicateKeyError(f"key {key!r} is already live")
            self._purge(self._id[key])

        node = len(self._keys)
        if node >= self._matrix.shape[0]:
            grown = np.empty((max(64, 2 * self._matrix.shape[0]), self.dim))
            grown[:self._matrix.shape[0]] = self._matrix
            self._matrix = grown
        self._matrix[node] = v
        self._keys.append(key)
        self._id[key] = node
        level = self._draw_level()
        self._levels.append(level)
        self._adj.append([[] for _ in range(level + 1)])

        if self._entry < 0:
            self._entry = node
            self._max_level = level
            return

        cur = self._entry
        for lc in range(self._max_level, level, -1):
            cur = self._greedy_step(v, cur, lc)
        for lc in range(min(level, self._max_level), -1, -1):
            found = self._search_layer(v, [cur], self.ef_construction, lc,
                                       live_only=False)
            m_max = self.m_max0 if lc == 0 else self.m
            neighbors = self._select_neighbors(found, self.m)
            self._adj[node][lc] = list(neighbors)
            for other in neighbors:
                self._link_back(other, node, lc, m_max)
            cur = found[0][0] if found else cur
        if level > self._max_level:
            self._entry = node
            self._max_level = level

    def _greedy_step(self, query: np.ndarray, start: int, level: int) -> int:
        cur = start
        cur_score = float(self._matrix[cur] @ query)
        while True:
            levels = self._adj[cur]
            neighbors = levels[level] if level < len(levels) else ()
            if not neighbors:
                return cur
            scores = self._matrix[neighbors] @ query
            best = int(np.argmax(scores))
            if scores[best] > cur_score:
                cur, cur_score = neighbors[best], float(scores[best])
            else:
                return cur

    def _select_neighbors(self, candidates: list[tuple[int, float]],
                          m: int) -> list[int]:
        """Diversity heuristic: keep a candidate only if it is closer to the
        query than to every already-selected neighbor; backfill from the
        pruned ones."""
        if len(candidates) <= m:
            return [node for node, _ in candidates]
        ids = [node for node, _ in candidates]
        scores = [score for _, score in candidates]
        block = self._matrix[ids]
        pairwise = block @ block.T
        # best[i] tracks the max similarity of candidate i to any selected
        # neighbor; one vectorized update per selection
        best = np.full(len(ids), -np.inf)
        selected: list[int] = []
        pruned: list[int] = []
        for i, score in enumerate(scores):
            if len(selected) >= m:
                break
            if best[i] > score:
                pruned.append(i)
                continue
            selected.append(i)
            np.maximum(best, pairwise[i], out=best)
        for i in pruned:
            if len(selected) >= m:
                break
            selected.append(i)
        return [ids[i] for i in selected]

    def _link_back(self, node: int, new_node: int, level: int, m_max: int) -> None:
        lst = self._adj[node][level]
        if new_node in lst:
            return
        lst.append(new_node)
        if len(lst) > m_max:
            vec = self._matrix[node]
            scores = self._matrix[lst] @ vec
            order = sorted(range(len(lst)), key=lambda i: (-scores[i], lst[i]))
            ranked = [(lst[i], float(scores[i])) for i in order]
            self._adj[node][level] = self._select_neighbors(ranked, m_max)

    # -- search ---------------------------------------------------------------------

    def _search_layer(self, query: np.ndarray, entries: list[int], ef: int,
                      level: int, live_only: bool) -> list[tuple[int, float]]:
        matrix, adj, dead = self._matrix, self._adj, self._dead
        heappush, heappop = heapq.heappush, heapq.heappop
        visited = set(entries)
        candidates: list[tuple[float, int]] = []
        results: list[tuple[float, int]] = []      # min-heap: worst kept on top
        for node in entries:
            score = float(matrix[node] @ query)
            heappush(candidates, (-score, node))
            if not live_only or node not in dead:
                heappush(results, (score, node))
        n_results = len(results)
        while candidates:
            neg, cur = heappop(candidates)
            if n_results >= ef and -neg < results[0][0]:
                break
            levels = adj[cur]
            neighbors = levels[level] if level < len(levels) else ()
            fresh = [n for n in neighbors if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            scores = (matrix[fresh] @ query).tolist()
            worst = results[0][0] if results else -np.inf
            for node, score in zip(fresh, scores):
                if n_results < ef or score > worst:
                    heappush(candidates, (-score, node))
                    if not live_only or node not in dead:
                        heappush(results, (score, node))
                        if len(results) > ef:
                            heappop(results)
                        worst = results[0][0]
                        n_results = len(results)
        keys = self._keys
        return sorted(((node, score) for score, node in results),
                      key=lambda hit: (-hit[1], keys[hit[0]]))

    def search(self, query, k: int, ef_search: int = 64) -> list[SearchHit]:
        """Top-k live keys by cosine, descending; ties by ascending key."""
        if k < 1:
            raise ValueError("k must be >= 1")
        if ef_search < k:
            raise ValueError("ef_search must be >= k")
        if self.live_count == 0:
            return []
        v = _normalize(query)
        if v.shape != (self.dim,):
            raise ValueError(f"expected dim {self.dim}, got {v.shape}")
        if ef_search >= self.live_count:
            return brute_force_knn(dict(self.items()), v, k)
        cur = self._entry
        for lc in range(self._max_level, 0, -1):
            cur = self._greedy_step(v, cur, lc)
        hits = self._search_layer(v, [cur], ef_search, 0, live_only=True)
        return [SearchHit(self._keys[node], score) for node, score in hits[:k]]

    # -- deletion & rebuild ------------------------------------------------------------

    def delete(self, key: Hashable) -> None:
        """Tombstone a live key; edges stay until the next rebuild."""
        node = self._id.get(key)
        if node is None or node in self._dead:
            raise KeyError(key)
        self._dead.add(node)
        if self.auto_rebuild and self.needs_rebuild():
            self._become(rebuild(self))

    def needs_rebuild(self) -> bool:
        if not self._dead:
            return False
        live = max(self.live_count, 1)
        return len(self._dead) / live > self.rebuild_threshold

    def _become(self, other: "HnswIndex") -> None:
        self.__dict__.update(other.__dict__)

    # -- persistence ---------------------------------------------------------------------

    SNAPSHOT_MAGIC = b"IMHN"
    SNAPSHOT_VERSION = 1

    @staticmethod
    def _encode_key(key: Hashable) -> bytes:
        if isinstance(key, str):
            raw = key.encode("utf-8")
            return struct.pack("<BH", 1, len(raw)) + raw
        if isinstance(key, (int, np.integer)):
            return struct.pack("<Bq", 0, int(key))
        raise TypeError(f"unsupported key type {type(key).__name__}")

    @staticmethod
    def _decode_key(fh) -> Hashable:
        (tag,) = struct.unpack("<B", fh.read(1))
        if tag == 0:
            return struct.unpack("<q", fh.read(8))[0]
        (length,) = struct.unpack("<H", fh.read(2))
        return fh.read(length).decode("utf-8")

    def save(self, path) -> None:
        nodes = [n for n, key in enumerate(self._keys) if key is not None]
        file_index = {n: i for i, n in enumerate(nodes)}
        with open(path, "wb") as fh:
            fh.write(self.SNAPSHOT_MAGIC)
            fh.write(struct.pack("<IIIIq", self.SNAPSHOT_VERSION, self.m,
                                 self.m_max0, self.ef_construction, self.seed))
            fh.write(struct.pack("<Id", self.dim, self.rebuild_threshold))
            fh.write(struct.pack("<BQq", int(self.auto_rebuild),
                                 self._level_draws,
                                 file_index.get(self._entry, -1)))
            fh.write(struct.pack("<iQ", self._max_level, len(nodes)))
            for n in nodes:
                fh.write(self._encode_key(self._keys[n]))
                fh.write(struct.pack("<IB", self._levels[n],
                                     int(n in self._dead)))
                fh.write(self._matrix[n].tobytes())
            for n in nodes:
                for neighbors in self._adj[n]:
                    fh.write(struct.pack("<I", len(neighbors)))
                    fh.write(struct.pack(f"<{len(neighbors)}Q",
                                         *[file_index[x] for x in neighbors]))

    @classmethod
    def load(cls, path) -> "HnswIndex":
        with open(path, "rb") as fh:
            if fh.read(4) != cls.SNAPSHOT_MAGIC:
                raise ValueError(f"{path}: not an index snapshot")
            version, m, m_max0, efc, seed = struct.unpack("<IIIIq", fh.read(24))
            if version != cls.SNAPSHOT_VERSION:
                raise ValueError(f"unsupported snapshot version {version}")
            dim, threshold = struct.unpack("<Id", fh.read(12))
            auto, draws, entry_idx = struct.unpack("<BQq", fh.read(17))
            max_level, n = struct.unpack("<iQ", fh.read(12))
            index = cls(dim, m=m, m_max0=m_max0, ef_construction=efc, seed=seed,
                        rebuild_threshold=threshold, auto_rebuild=bool(auto))
            index._matrix = np.empty((max(n, 1), dim))
            for node in range(n):
                key = cls._decode_key(fh)
                level, dead = struct.unpack("<IB", fh.read(5))
                index._matrix[node] = np.frombuffer(fh.read(8 * dim),
                                                    dtype=np.float64)
                index._keys.append(key)
                index._id[key] = node
                index._levels.append(level)
                if dead:
                    index._dead.add(node)
            for node in range(n):
                adj = []
                for _ in range(index._levels[node] + 1):
                    (count,) = struct.unpack("<I", fh.read(4))
                    adj.append(list(struct.unpack(f"<{count}Q",
                                                  fh.read(8 * count))))
                index._adj.append(adj)
            index._entry = entry_idx
            index._max_level = max_level
            # fast-forward the level stream so future inserts stay deterministic
            for _ in range(draws):
                index._rng.random()
            index._level_draws = draws
        return index


def rebuild(index: HnswIndex) -> HnswIndex:
    """Fresh index from the live entries only, in original insertion order."""
    fresh = HnswIndex(index.dim, m=index.m, m_max0=index.m_max0,
                      ef_construction=index.ef_construction, seed=index.seed,
                      rebuild_threshold=index.rebuild_threshold,
                      auto_rebuild=index.auto_rebuild)
    for key, vector in index.items():
        fresh._insert_normalized(key, vector.copy())
    return fresh


def brute_force_knn(store: dict[Hashable, np.ndarray], query,
                    k: int) -> list[SearchHit]:
    """Exact top-k by cosine; ties broken by ascending key."""
    if not store:
        return []
    q = _normalize(query)
    keys = list(store)
    matrix = np.stack([store[key] for key in keys])
    norms = np.linalg.norm(matrix, axis=1)
    if (norms == 0).any():
        raise ValueError("store contains a zero vector")
    scores = (matrix / norms[:, None]) @ q
    order = sorted(range(len(keys)), key=lambda i: (-scores[i], keys[i]))
    return [SearchHit(keys[i], float(scores[i])) for i in order[:k]]
