"""Dual-tower model: a shared patch-transformer image encoder, a small
CLS-prefixed title encoder, and a merge-attention fusion stack that runs
self-attention over the concatenated title + image token sequence.

Desk-scale defaults (32-d tokens, 2 fusion layers, 32-d output) keep the
whole model trainable in seconds; the production-scale shape this mirrors
(6 fusion layers, 128-d output, full-size backbones) is reachable through
``ModelConfig`` alone, the topology does not change.

Image validity is carried by masks, not by pixel content: a padded image
slot keeps its all-zeros pixels but its patch tokens are excluded from
fusion attention exactly, so padded content can never influence an item
embedding.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .tensor import Tensor, concat, embedding, no_grad

CHECKPOINT_MAGIC = b"IMTW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    token_dim: int = 32
    n_heads: int = 4
    n_image_blocks: int = 1
    n_title_blocks: int = 1
    n_fusion_layers: int = 2     # production reference uses 6
    ffn_dim: int = 64
    output_dim: int = 32         # production reference uses 128
    vocab_size: int = 1000
    max_title_len: int = 16
    k_images: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image size must be divisible by patch size")
        if self.token_dim % self.n_heads != 0:
            raise ValueError("token dim must be divisible by head count")
        if self.k_images < 1:
            raise ValueError("k_images must be >= 1")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_pixels(self) -> int:
        return self.patch_size ** 2


def tokenize(title: str, vocab_size: int) -> np.ndarray:
    """Deterministic toy tokenizer: lowercase alphanumeric words hashed to ids.

    Punctuation and whitespace produce no tokens, so a title made only of
    those tokenizes to an empty sequence.
    """
    words, current = [], []
    for ch in title.lower():
        if ch.isalnum():
            current.append(ch)
        elif current:
            words.append("".join(current))
            current = []
    if current:
        words.append("".join(current))
    return np.array([zlib.crc32(w.encode("utf-8")) % vocab_size for w in words],
                    dtype=np.int64)


def empty_image(image_size: int = 16) -> np.ndarray:
    return np.zeros((image_size, image_size))


def pad_or_truncate(images: list[np.ndarray], k: int,
                    image_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Fix the image list to exactly ``k`` slots.

    Shorter lists are padded with empty (all-zero, masked-invalid) images;
    longer lists keep the first ``k`` in catalog order.  Returns the stacked
    pixel array (k, H, W) and the per-slot validity mask.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    kept = [np.asarray(img, dtype=np.float64) for img in images[:k]]
    valid = np.zeros(k, dtype=bool)
    valid[:len(kept)] = True
    while len(kept) < k:
        kept.append(empty_image(image_size))
    return np.stack(kept), valid


@dataclass
class TitleTokens:
    """Padded token ids with validity flags (True marks a real token)."""

    ids: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_text(cls, title: str, cfg: ModelConfig) -> "TitleTokens":
        ids = tokenize(title, cfg.vocab_size)[:cfg.max_title_len]
        padded = np.zeros(cfg.max_title_len, dtype=np.int64)
        valid = np.zeros(cfg.max_title_len, dtype=bool)
        padded[:len(ids)] = ids
        valid[:len(ids)] = True
        return cls(padded, valid)

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "TitleTokens":
        return cls(np.zeros(cfg.max_title_len, dtype=np.int64),
                   np.zeros(cfg.max_title_len, dtype=bool))


@dataclass
class ItemInput:
    """One catalog item ready for the item tower: title plus exactly K images."""

    title: TitleTokens
    images: np.ndarray          # (K, H, W)
    image_valid: np.ndarray     # (K,)
    class_id: int = 0

    @classmethod
    def build(cls, title: str, images: list[np.ndarray], cfg: ModelConfig,
              class_id: int = 0, k: int | None = None) -> "ItemInput":
        pixels, valid = pad_or_truncate(images, k or cfg.k_images, cfg.image_size)
        return cls(TitleTokens.from_text(title, cfg), pixels, valid, class_id)


def _init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def small(*shape):
        return Tensor(rng.standard_normal(shape) * 0.02, requires_grad=True)

    params["image_enc.patch_w"] = nn.xavier(rng, cfg.patch_pixels, cfg.token_dim)
    params["image_enc.patch_b"] = nn.zeros(cfg.token_dim)
    params["image_enc.pos"] = small(cfg.n_patches, cfg.token_dim)
    for i in range(cfg.n_image_blocks):
        for name, t in nn.init_encoder_block(rng, cfg.token_dim, cfg.ffn_dim).items():
            params[f"image_enc.blk{i}.{name}"] = t

    params["title_enc.tok_emb"] = small(cfg.vocab_size, cfg.token_dim)
    params["title_enc.cls"] = small(cfg.token_dim)
    params["title_enc.pos"] = small(cfg.max_title_len + 1, cfg.token_dim)
    for i in range(cfg.n_title_blocks):
        for name, t in nn.init_encoder_block(rng, cfg.token_dim, cfg.ffn_dim).items():
            params[f"title_enc.blk{i}.{name}"] = t

    params["fusion.slot"] = small(cfg.k_images, cfg.token_dim)
    for i in range(cfg.n_fusion_layers):
        for name, t in nn.init_encoder_block(rng, cfg.token_dim, cfg.ffn_dim).items():
            params[f"fusion.blk{i}.{name}"] = t

    for head in ("proj_image", "proj_title", "proj_fusion"):
        params[f"{head}.w"] = nn.xavier(rng, cfg.token_dim, cfg.output_dim)
        params[f"{head}.b"] = nn.zeros(cfg.output_dim)
    return params


class TwoTowerModel:
    """Query tower and item tower over one shared parameter store.

    The image encoder weights are a single set of tensors read by both
    towers; there is no copy to drift out of sync.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor],
                 trained_stages: tuple[int, ...] = ()):
        self.cfg = cfg
        self.params = params
        self.trained_stages = tuple(trained_stages)

    @classmethod
    def init(cls, cfg: ModelConfig | None = None, seed: int = 0) -> "TwoTowerModel":
        cfg = cfg or ModelConfig()
        return cls(cfg, _init_params(cfg, seed))

    # -- parameter views --------------------------------------------------

    def section(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def image_encoder_params(self) -> dict[str, Tensor]:
        """The one image-encoder weight set used by both towers."""
        return self.section("image_enc")

    def block_params(self, prefix: str, i: int) -> dict[str, Tensor]:
        plen = len(f"{prefix}.blk{i}.")
        return {k[plen:]: v for k, v in self.params.items()
                if k.startswith(f"{prefix}.blk{i}.")}

    # -- image tower -------------------------------------------------------

    def _patchify(self, imgs: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        b = imgs.shape[0]
        if imgs.shape[1:] != (cfg.image_size, cfg.image_size):
            raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} images, "
                             f"got {imgs.shape[1:]}")
        g = cfg.image_size // cfg.patch_size
        patches = imgs.reshape(b, g, cfg.patch_size, g, cfg.patch_size)
        return patches.transpose(0, 1, 3, 2, 4).reshape(b, g * g, cfg.patch_pixels)

    def image_tokens(self, imgs: np.ndarray) -> Tensor:
        """Patch-level token sequence for a batch of images (B, P, D)."""
        cfg = self.cfg
        patches = Tensor(self._patchify(np.asarray(imgs, dtype=np.float64)))
        tokens = patches @ self.params["image_enc.patch_w"] \
            + self.params["image_enc.patch_b"] + self.params["image_enc.pos"]
        mask = np.ones(tokens.shape[1], dtype=bool)
        for i in range(cfg.n_image_blocks):
            tokens = nn.encoder_block(tokens, mask,
                                      self.block_params("image_enc", i), cfg.n_heads)
        return tokens

    def image_embeddings_t(self, imgs: np.ndarray) -> Tensor:
        """Pooled per-image embeddings: projected mean of patch tokens, unit-norm."""
        pooled = self.image_tokens(imgs).mean(axis=1)
        return nn.l2_normalize(pooled @ self.params["proj_image.w"]
                               + self.params["proj_image.b"])

    def encode_image(self, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Single image -> (patch tokens, pooled unit-norm embedding)."""
        with no_grad():
            tokens = self.image_tokens(np.asarray(img)[None])
            pooled = nn.l2_normalize(tokens.mean(axis=1)
                                     @ self.params["proj_image.w"]
                                     + self.params["proj_image.b"])
        return tokens.data[0], pooled.data[0]

    def query_embeddings_t(self, imgs: np.ndarray) -> Tensor:
        return self.image_embeddings_t(imgs)

    def query_embedding(self, img: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.image_embeddings_t(np.asarray(img)[None]).data[0]

    # -- title tower ---------------------------------------------------------

    def title_tokens_t(self, ids: np.ndarray,
                       valid: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Batched title encoding -> (tokens (B, 1+L, D), mask (B, 1+L)).

        Position 0 is the CLS readout, always valid; padded positions are
        masked out of every attention mix.
        """
        cfg = self.cfg
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        valid = np.atleast_2d(np.asarray(valid, dtype=bool))
        if ids.max(initial=0) >= cfg.vocab_size or ids.min(initial=0) < 0:
            raise ValueError("token id out of vocabulary")
        b, length = ids.shape
        tok = embedding(self.params["title_enc.tok_emb"], ids)
        cls = self.params["title_enc.cls"].reshape(1, 1, cfg.token_dim)
        cls = cls + Tensor(np.zeros((b, 1, cfg.token_dim)))
        tokens = concat([cls, tok], axis=1) + self.params["title_enc.pos"][:length + 1]
        mask = np.concatenate([np.ones((b, 1), dtype=bool), valid], axis=1)
        for i in range(cfg.n_title_blocks):
            tokens = nn.encoder_block(tokens, mask,
                                      self.block_params("title_enc", i), cfg.n_heads)
        return tokens, mask

    def encode_title(self, title: TitleTokens) -> tuple[np.ndarray, np.ndarray]:
        """Single title -> (token sequence incl. CLS, CLS embedding)."""
        with no_grad():
            tokens, _ = self.title_tokens_t(title.ids[None], title.valid[None])
        return tokens.data[0], tokens.data[0, 0]

    def title_embeddings_t(self, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        """Projected title CLS embeddings (the stage-1 text alignment target)."""
        tokens, _ = self.title_tokens_t(ids, valid)
        cls = tokens[:, 0, :]
        return nn.l2_normalize(cls @ self.params["proj_title.w"]
                               + self.params["proj_title.b"])

    # -- fusion ----------------------------------------------------------------

    def fuse_t(self, title_ids: np.ndarray, title_valid: np.ndarray,
               images: np.ndarray, image_valid: np.ndarray,
               image_default: bool = False, title_default: bool = False) -> Tensor:
        """Fused item embeddings for a batch (B, out_dim), unit-norm.

        ``images`` is (B, K, H, W) with per-slot validity (B, K); K may be
        anything >= 1 (padded slots are masked exactly).  ``image_default``
        replaces the image modality by masking every image token, which is
        exactly equivalent to feeding empty images since masked content
        cannot reach any output.  ``title_default`` re-encodes the empty
        title (zero-length, all-invalid) so the CLS readout carries no title
        information, and masks the title token positions in fusion.
        """
        cfg = self.cfg
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4:
            raise ValueError("expected images of shape (B, K, H, W)")
        b, k = images.shape[:2]
        if k > cfg.k_images:
            raise ValueError(f"got {k} image slots, model supports {cfg.k_images}")
        image_valid = np.asarray(image_valid, dtype=bool).reshape(b, k)

        if title_default:
            title_ids = np.zeros((b, np.atleast_2d(title_ids).shape[1]),
                                 dtype=np.int64)
            title_valid = np.zeros_like(title_ids, dtype=bool)
        title_tokens, title_mask = self.title_tokens_t(title_ids, title_valid)

        flat = self.image_tokens(images.reshape(b * k, cfg.image_size,
                                                cfg.image_size))
        flat = flat.reshape(b, k, cfg.n_patches, cfg.token_dim)
        slots = self.params["fusion.slot"][:k].reshape(1, k, 1, cfg.token_dim)
        img_tokens = (flat + slots).reshape(b, k * cfg.n_patches, cfg.token_dim)
        img_mask = np.repeat(image_valid, cfg.n_patches, axis=1)
        if image_default:
            img_mask = np.zeros_like(img_mask)

        seq = concat([title_tokens, img_tokens], axis=1)
        mask = np.concatenate([title_mask, img_mask], axis=1)
        for i in range(cfg.n_fusion_layers):
            seq = nn.encoder_block(seq, mask, self.block_params("fusion", i),
                                   cfg.n_heads)
        cls = seq[:, 0, :]
        return nn.l2_normalize(cls @ self.params["proj_fusion.w"]
                               + self.params["proj_fusion.b"])

    def fuse_merge_attention(self, title: TitleTokens, images: np.ndarray,
                             image_valid: np.ndarray, **defaults) -> np.ndarray:
        """Single-item fusion (inference path)."""
        with no_grad():
            out = self.fuse_t(title.ids[None], title.valid[None],
                              np.asarray(images)[None], image_valid[None],
                              **defaults)
        return out.data[0]

    def item_embedding(self, item: ItemInput) -> np.ndarray:
        """Unit-norm multimodal embedding of one padded item."""
        return self.fuse_merge_attention(item.title, item.images, item.image_valid)

    def item_embeddings(self, items: list[ItemInput],
                        batch_size: int = 64) -> np.ndarray:
        """Batched inference over padded items (N, out_dim)."""
        chunks = []
        with no_grad():
            for lo in range(0, len(items), batch_size):
                chunk = items[lo:lo + batch_size]
                out = self.fuse_t(np.stack([i.title.ids for i in chunk]),
                                  np.stack([i.title.valid for i in chunk]),
                                  np.stack([i.images for i in chunk]),
                                  np.stack([i.image_valid for i in chunk]))
                chunks.append(out.data)
        return np.concatenate(chunks) if chunks else \
            np.empty((0, self.cfg.output_dim))

    def image_embeddings(self, imgs: np.ndarray,
                         batch_size: int = 256) -> np.ndarray:
        """Batched pooled image embeddings (N, out_dim)."""
        imgs = np.asarray(imgs, dtype=np.float64)
        chunks = []
        with no_grad():
            for lo in range(0, len(imgs), batch_size):
                chunks.append(self.image_embeddings_t(imgs[lo:lo + batch_size]).data)
        return np.concatenate(chunks) if chunks else \
            np.empty((0, self.cfg.output_dim))

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(self, path)

    def with_stage(self, stage: int) -> "TwoTowerModel":
        stages = tuple(sorted(set(self.trained_stages) | {stage}))
        return TwoTowerModel(self.cfg, self.params, stages)


_CFG_FIELDS = ("image_size", "patch_size", "token_dim", "n_heads",
               "n_image_blocks", "n_title_blocks", "n_fusion_layers",
               "ffn_dim", "output_dim", "vocab_size", "max_title_len",
               "k_images")


def save_checkpoint(model: TwoTowerModel, path) -> None:
    """Versioned binary checkpoint; bit-exact round-trip."""
    stage_mask = 0
    for s in model.trained_stages:
        stage_mask |= 1 << s
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, stage_mask))
        fh.write(struct.pack(f"<{len(_CFG_FIELDS)}I",
                             *[getattr(model.cfg, f) for f in _CFG_FIELDS]))
        names = sorted(model.params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            arr = model.params[name].data
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> TwoTowerModel:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        version, stage_mask = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        values = struct.unpack(f"<{len(_CFG_FIELDS)}I",
                               fh.read(4 * len(_CFG_FIELDS)))
        cfg = ModelConfig(**dict(zip(_CFG_FIELDS, values)))
        (count,) = struct.unpack("<I", fh.read(4))
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n_bytes = 8 * int(np.prod(shape)) if ndim else 8
            arr = np.frombuffer(fh.read(n_bytes), dtype=np.float64).reshape(shape)
            params[name] = Tensor(arr.copy(), requires_grad=True)
    stages = tuple(s for s in range(8) if stage_mask & (1 << s))
    return TwoTowerModel(cfg, params, stages)
