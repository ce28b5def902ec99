"""Three-stage training curriculum over synthetic click logs.

Stage 1 aligns projected query-image embeddings with projected title
embeddings (no fusion).  Stage 2 brings in the fusion module with a single
item image per product, class-grouped batches, and the cross-batch memory.
Stage 3 keeps the same objective but feeds every item padded/truncated to K
images.  AdamW (decoupled weight decay) drives all three; the optimizer
steps every parameter every stage, so unused sections only see decay and a
stage-3 run on single-image data reproduces stage-2 losses step for step.

Optimizer state and the memory buffer are reset at stage boundaries.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .losses import (LossConfig, XbmBuffer, am_info_nce, class_based_batches,
                     final_loss, ContrastiveBatch)
from .synth import ClickLogTriplet, ProductRecord
from .tensor import Tensor
from .towers import ModelConfig, TitleTokens, TwoTowerModel, pad_or_truncate

STAGE_EPOCH_DEFAULTS = {1: 8, 2: 6, 3: 4}


class MissingStageError(RuntimeError):
    """A stage was requested without its prerequisite stage's checkpoint."""


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int | None = None           # None -> STAGE_EPOCH_DEFAULTS[stage]
    loss: LossConfig = field(default_factory=lambda: LossConfig(batch_size=16))
    seed: int = 0
    drop_noise: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2 or 3")


# -- optimizer -------------------------------------------------------------------

def adamw_state(params: dict[str, np.ndarray]) -> dict:
    return {"t": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: dict, lr: float, weight_decay: float,
               betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> dict:
    """One AdamW update, in place.  Decay is decoupled: applied to the
    weights directly, not through the gradient moments."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name!r}; step aborted")
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        g = grads[name]
        p *= 1.0 - lr * weight_decay
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class AdamW:
    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = adamw_state({k: v.data for k, v in params.items()})

    def step(self) -> None:
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in self.params.items()}
        adamw_step({k: t.data for k, t in self.params.items()}, grads,
                   self.state, self.cfg.lr, self.cfg.weight_decay,
                   self.cfg.betas, self.cfg.eps)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


# -- corpus batching --------------------------------------------------------------

class CorpusArrays:
    """Corpus flattened into contiguous arrays for vectorized batches."""

    def __init__(self, catalog: list[ProductRecord], logs: list[ClickLogTriplet],
                 cfg: ModelConfig):
        self.query_images = np.stack([t.query_image for t in logs])
        self.product_index = np.array([t.product_index for t in logs])
        self.class_ids = np.array([t.class_id for t in logs])
        self.relation = np.array([t.relation for t in logs])

        titles = [TitleTokens.from_text(rec.title, cfg) for rec in catalog]
        self.title_ids = np.stack([t.ids for t in titles])
        self.title_valid = np.stack([t.valid for t in titles])

        firsts = [pad_or_truncate(rec.images[:1], 1, cfg.image_size)
                  for rec in catalog]
        self.first_images = np.stack([p for p, _ in firsts])
        self.first_valid = np.stack([v for _, v in firsts])

        padded = [pad_or_truncate(rec.images, cfg.k_images, cfg.image_size)
                  for rec in catalog]
        self.padded_images = np.stack([p for p, _ in padded])
        self.padded_valid = np.stack([v for _, v in padded])

    def __len__(self) -> int:
        return len(self.query_images)

    def keep(self, mask: np.ndarray) -> "CorpusArrays":
        out = object.__new__(CorpusArrays)
        out.query_images = self.query_images[mask]
        out.product_index = self.product_index[mask]
        out.class_ids = self.class_ids[mask]
        out.relation = self.relation[mask]
        for name in ("title_ids", "title_valid", "first_images", "first_valid",
                     "padded_images", "padded_valid"):
            setattr(out, name, getattr(self, name))
        return out


# -- training loop -----------------------------------------------------------------

def _contrastive_step(model: TwoTowerModel, arrays: CorpusArrays,
                      idx: np.ndarray, xbm: XbmBuffer, cfg: TrainConfig,
                      multi_image: bool) -> Tensor:
    prods = arrays.product_index[idx]
    q = model.query_embeddings_t(arrays.query_images[idx])
    ids = arrays.title_ids[prods]
    valid = arrays.title_valid[prods]
    if multi_image:
        pix, pix_valid = arrays.padded_images[prods], arrays.padded_valid[prods]
    else:
        pix, pix_valid = arrays.first_images[prods], arrays.first_valid[prods]

    def fuser(images, titles, image_default=False, title_default=False):
        (p, pv), (i, v) = images, titles
        return model.fuse_t(i, v, p, pv, image_default=image_default,
                            title_default=title_default)

    return final_loss(q, (pix, pix_valid), (ids, valid), arrays.class_ids[idx],
                      fuser, xbm, cfg.loss)


def train_stage(stage: int, model: TwoTowerModel, catalog: list[ProductRecord],
                logs: list[ClickLogTriplet], cfg: TrainConfig,
                override: bool = False) -> tuple[TwoTowerModel, list[tuple]]:
    """Run one curriculum stage; returns the updated model and the loss curve
    as (step, stage, loss) rows."""
    if stage > 1 and (stage - 1) not in model.trained_stages and not override:
        raise MissingStageError(
            f"stage {stage} requires a stage-{stage - 1} checkpoint "
            "(pass override to skip)")
    cfg = replace(cfg, stage=stage)
    arrays = CorpusArrays(catalog, logs, model.cfg)
    if cfg.drop_noise:
        arrays = arrays.keep(arrays.relation != "noise")
    # the batch-order stream depends on the seed alone so that a stage-3 run
    # on single-image data can replay a stage-2 run batch for batch
    rng = np.random.default_rng(cfg.seed)
    epochs = cfg.epochs if cfg.epochs is not None else STAGE_EPOCH_DEFAULTS[stage]
    optimizer = AdamW(model.params, cfg)
    xbm = XbmBuffer(cfg.loss.xbm_capacity)

    curve: list[tuple] = []
    step = 0
    for _ in range(epochs):
        if stage == 1:
            order = rng.permutation(len(arrays))
            batches = [(order[i:i + cfg.batch_size], None)
                       for i in range(0, len(order), cfg.batch_size)
                       if len(order[i:i + cfg.batch_size]) >= 2]
        else:
            batches = list(class_based_batches(arrays.class_ids, cfg.batch_size,
                                               rng))
        for idx, _filler in batches:
            if len(idx) < 2:
                continue
            optimizer.zero_grad()
            if stage == 1:
                q = model.query_embeddings_t(arrays.query_images[idx])
                prods = arrays.product_index[idx]
                t = model.title_embeddings_t(arrays.title_ids[prods],
                                             arrays.title_valid[prods])
                loss = am_info_nce(
                    ContrastiveBatch(q, t, arrays.class_ids[idx]), cfg.loss)
            else:
                loss = _contrastive_step(model, arrays, idx, xbm, cfg,
                                         multi_image=(stage == 3))
            loss.backward()
            optimizer.step()
            curve.append((step, stage, loss.item()))
            step += 1
    return model.with_stage(stage), curve


def train_all(model: TwoTowerModel, catalog, logs, cfg: TrainConfig,
              stage_epochs: dict[int, int] | None = None
              ) -> tuple[TwoTowerModel, list[tuple]]:
    """Run the full three-stage curriculum."""
    curve: list[tuple] = []
    for stage in (1, 2, 3):
        epochs = (stage_epochs or {}).get(stage, cfg.epochs)
        model, rows = train_stage(stage, model, catalog, logs,
                                  replace(cfg, epochs=epochs))
        curve.extend(rows)
    return model, curve


def save_loss_curve(path, curve: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "stage", "loss"])
        writer.writerows(curve)
