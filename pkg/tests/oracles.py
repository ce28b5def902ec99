"""Independent reference implementations used to freeze expected test values.

Everything here is written with plain loops and ``math`` so it shares no code
path with the package under test.
"""

from __future__ import annotations

import math


def softmax_row(row):
    m = max(row)
    exps = [math.exp(v - m) for v in row]
    s = sum(exps)
    return [e / s for e in exps]


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def similarity_matrix(queries, items):
    return [[cosine(q, t) for t in items] for q in queries]


def info_nce_from_sims(sims):
    """-mean_i log(e^{s_ii} / sum_j e^{s_ij})."""
    n = len(sims)
    total = 0.0
    for i in range(n):
        denom = sum(math.exp(s) for s in sims[i])
        total += -math.log(math.exp(sims[i][i]) / denom)
    return total / n


def am_info_nce_from_sims(sims, gamma, margin, extra_negatives=None):
    """Additive-margin InfoNCE; ``extra_negatives[i]`` lists memory similarities."""
    n = len(sims)
    total = 0.0
    for i in range(n):
        pos = math.exp(gamma * (sims[i][i] - margin))
        denom = pos
        for j in range(n):
            if j != i:
                denom += math.exp(gamma * sims[i][j])
        if extra_negatives is not None:
            for s in extra_negatives[i]:
                denom += math.exp(gamma * s)
        total += -math.log(pos / denom)
    return total / n


def attention(q_tokens, kv_tokens, mask, wq, bq, wk, bk, wv, bv, wo, bo, n_heads):
    """Dense single-example multi-head attention, all loops."""

    def project(tokens, w, b):
        rows = []
        for tok in tokens:
            rows.append([sum(tok[i] * w[i][j] for i in range(len(tok))) + b[j]
                         for j in range(len(b))])
        return rows

    dim = len(bq)
    d_head = dim // n_heads
    q = project(q_tokens, wq, bq)
    k = project(kv_tokens, wk, bk)
    v = project(kv_tokens, wv, bv)

    mixed = [[0.0] * dim for _ in q_tokens]
    for h in range(n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        for qi in range(len(q_tokens)):
            scores = []
            for ki in range(len(kv_tokens)):
                s = sum(q[qi][d] * k[ki][d] for d in range(lo, hi)) / math.sqrt(d_head)
                scores.append(s)
            m = max(s for s, ok in zip(scores, mask) if ok)
            weights = [math.exp(s - m) if ok else 0.0 for s, ok in zip(scores, mask)]
            z = sum(weights)
            weights = [w / z for w in weights]
            for d in range(lo, hi):
                mixed[qi][d] = sum(weights[ki] * v[ki][d]
                                   for ki in range(len(kv_tokens)))
    return project(mixed, wo, bo)


def knn(store, query, k):
    """Exact top-k by cosine over a {key: vector} store; ties by ascending key."""
    scored = []
    for key, vec in store.items():
        scored.append((-cosine(query, vec), key))
    scored.sort()
    return [(key, -neg) for neg, key in scored[:k]]


class FifoQueue:
    """Reference bounded FIFO used to check the cross-batch memory buffer."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.entries = []

    def push(self, entry):
        if self.capacity == 0:
            return
        self.entries.append(entry)
        while len(self.entries) > self.capacity:
            self.entries.pop(0)
