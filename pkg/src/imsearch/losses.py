"""Contrastive losses for the dual-tower model.

The stack is: plain InfoNCE, additive-margin InfoNCE (a scale ``gamma`` and a
margin subtracted from the positive logit), a modality balance term that keeps
the fusion output aligned with the query when either modality is blanked out,
and the combined objective that adds cross-batch-memory negatives.  Losses
always re-normalize their inputs, so similarity is a plain dot product.

Memory entries are stored detached: no gradient flows into past batches.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .nn import l2_normalize
from .tensor import Tensor, concat


@dataclass
class LossConfig:
    """Hyperparameters for the additive-margin losses and the memory."""

    gamma: float = 20.0
    margin: float = 0.2
    xbm_capacity: int = 1024
    batch_size: int = 32

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 0.0 <= self.margin < 1.0:
            raise ValueError("margin must be in [0, 1)")
        if self.xbm_capacity < 0:
            raise ValueError("xbm_capacity must be nonnegative")


@dataclass
class ContrastiveBatch:
    """Paired query/item embeddings with class labels; row i is the positive pair."""

    query_embs: Tensor
    item_embs: Tensor
    class_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.query_embs = self.query_embs if isinstance(self.query_embs, Tensor) \
            else Tensor(self.query_embs)
        self.item_embs = self.item_embs if isinstance(self.item_embs, Tensor) \
            else Tensor(self.item_embs)
        n = self.query_embs.shape[0]
        if self.item_embs.shape[0] != n:
            raise ValueError("query and item counts differ")
        if n == 0:
            raise ValueError("empty batch")
        if self.class_ids is None:
            self.class_ids = np.arange(n)
        for embs in (self.query_embs, self.item_embs):
            norms = np.linalg.norm(embs.data, axis=-1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError("batch embeddings must be unit-norm (within 1e-6)")

    @property
    def size(self) -> int:
        return self.query_embs.shape[0]


def _log_sum_exp_rows(logits: Tensor) -> Tensor:
    shift = logits.data.max(axis=-1, keepdims=True)
    return ((logits - shift).exp().sum(axis=-1, keepdims=True)).log() + shift


def info_nce(batch: ContrastiveBatch) -> Tensor:
    """-mean_i log( e^{s(Q_i,T_i)} / sum_j e^{s(Q_i,T_j)} )."""
    q = l2_normalize(batch.query_embs)
    t = l2_normalize(batch.item_embs)
    sims = q @ t.transpose()
    n = batch.size
    diag = sims[np.arange(n), np.arange(n)]
    return (_log_sum_exp_rows(sims).reshape(n) - diag).mean()


def _am_loss(anchors: Tensor, positives: Tensor, gamma: float, margin: float,
             extra_negatives: np.ndarray | None = None) -> Tensor:
    """Additive-margin InfoNCE with optional constant extra negatives.

    ``anchors`` and ``positives`` must already be unit-norm; row i of
    ``positives`` is the positive for row i of ``anchors``, all other rows
    (plus every ``extra_negatives`` row) are negatives.
    """
    n = anchors.shape[0]
    logits = (anchors @ positives.transpose()) * gamma - \
        (gamma * margin) * np.eye(n)
    if extra_negatives is not None and len(extra_negatives):
        mem = anchors @ Tensor(np.asarray(extra_negatives).T) * gamma
        logits = concat([logits, mem], axis=1)
    diag = logits[np.arange(n), np.arange(n)]
    return (_log_sum_exp_rows(logits).reshape(n) - diag).mean()


def am_info_nce(batch: ContrastiveBatch, cfg: LossConfig) -> Tensor:
    """Additive-margin InfoNCE; reduces exactly to info_nce at gamma=1, margin=0."""
    q = l2_normalize(batch.query_embs)
    t = l2_normalize(batch.item_embs)
    return _am_loss(q, t, cfg.gamma, cfg.margin)


# A fuser maps raw item inputs to fused embeddings; the default flags blank
# one modality (its tokens get all-invalid attention masks downstream).
Fuser = Callable[..., Tensor]


def modality_balance_loss(query_embs: Tensor, images, titles, fuser: Fuser,
                          cfg: LossConfig) -> Tensor:
    """Align the fusion output with the query when either modality is blanked.

    Sum of four directional additive-margin terms: query vs fusion-without-
    images, query vs fusion-without-titles, and the two reversed pairs.
    """
    q = l2_normalize(query_embs)
    f_no_img = l2_normalize(fuser(images, titles, image_default=True))
    f_no_txt = l2_normalize(fuser(images, titles, title_default=True))
    total = _am_loss(q, f_no_img, cfg.gamma, cfg.margin)
    total = total + _am_loss(q, f_no_txt, cfg.gamma, cfg.margin)
    total = total + _am_loss(f_no_img, q, cfg.gamma, cfg.margin)
    total = total + _am_loss(f_no_txt, q, cfg.gamma, cfg.margin)
    return total


class XbmBuffer:
    """Bounded FIFO of past embeddings, tagged by side (query or fusion).

    Entries from both sides share one ring so eviction stays synchronized.
    Stored vectors are detached copies; they act as constants when used as
    negatives.
    """

    SIDES = ("query", "fusion")

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be nonnegative")
        self.capacity = capacity
        self._entries: deque = deque()

    def __len__(self) -> int:
        return len(self._entries)

    def clear(self) -> None:
        self._entries.clear()

    def push(self, embeddings: np.ndarray, class_ids: np.ndarray, side: str) -> None:
        if side not in self.SIDES:
            raise ValueError(f"unknown side {side!r}")
        if self.capacity == 0:
            return
        for vec, cid in zip(np.asarray(embeddings, dtype=np.float64), class_ids):
            self._entries.append((vec.copy(), int(cid), side))
            while len(self._entries) > self.capacity:
                self._entries.popleft()

    def negatives(self, side: str) -> np.ndarray:
        vecs = [vec for vec, _, s in self._entries if s == side]
        return np.stack(vecs) if vecs else np.empty((0, 0))

    def entries(self) -> list[tuple[np.ndarray, int, str]]:
        return list(self._entries)


def xbm_push_and_negatives(xbm: XbmBuffer, embeddings, class_ids,
                           side: str) -> np.ndarray:
    """Return the side's current contents as negatives, then enqueue the batch."""
    data = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    negatives = xbm.negatives(side)
    xbm.push(data, class_ids, side)
    return negatives


def final_loss(query_embs: Tensor, images, titles, class_ids: np.ndarray,
               fuser: Fuser, xbm: XbmBuffer, cfg: LossConfig) -> Tensor:
    """The combined training objective.

    Two directional additive-margin terms on (query, fused item), the
    modality balance terms, and two memory-augmented terms whose negative
    sets include the buffer contents.  The current batch is pushed into the
    buffer afterwards (fusion side first, then query side).
    """
    q = l2_normalize(query_embs)
    f = l2_normalize(fuser(images, titles))

    fusion_negs = xbm_push_and_negatives(xbm, f.data, class_ids, "fusion")
    query_negs = xbm_push_and_negatives(xbm, q.data, class_ids, "query")

    total = _am_loss(q, f, cfg.gamma, cfg.margin)
    total = total + _am_loss(f, q, cfg.gamma, cfg.margin)
    total = total + modality_balance_loss(query_embs, images, titles, fuser, cfg)
    total = total + _am_loss(q, f, cfg.gamma, cfg.margin,
                             extra_negatives=fusion_negs if len(fusion_negs) else None)
    total = total + _am_loss(f, q, cfg.gamma, cfg.margin,
                             extra_negatives=query_negs if len(query_negs) else None)
    return total


def class_based_batches(dataset, batch_size: int,
                        rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (indices, filler_flags) batches grouped by class label.

    Each batch draws from a single class while that class has enough items;
    a short remainder is topped up with items popped from a uniformly random
    other class (those are flagged as fillers but remain valid negatives).
    Every item appears at most once per epoch.  Deterministic given ``rng``.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    if hasattr(dataset, "__len__") and len(dataset) and hasattr(dataset[0], "class_id"):
        labels = np.array([item.class_id for item in dataset])
    else:
        labels = np.asarray(dataset)
    if labels.size == 0:
        raise ValueError("empty dataset")

    queues: dict[int, list[int]] = {}
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        queues[int(cls)] = list(rng.permutation(idx))
    order = list(rng.permutation(sorted(queues)))

    for cls in order:
        queue = queues[cls]
        while len(queue) >= batch_size:
            chunk = [queue.pop() for _ in range(batch_size)]
            yield np.array(chunk), np.zeros(batch_size, dtype=bool)
        if not queue:
            continue
        chunk = [queue.pop() for _ in range(len(queue))]
        filler = [False] * len(chunk)
        while len(chunk) < batch_size:
            others = sorted(c for c, q in queues.items() if q and c != cls)
            if not others:
                break
            donor = others[rng.integers(len(others))]
            chunk.append(queues[donor].pop())
            filler.append(True)
        yield np.array(chunk), np.array(filler)
