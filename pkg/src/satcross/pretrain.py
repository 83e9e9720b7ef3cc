"""Stage-two multi-modal pre-training.

Two symmetric InfoNCE terms: image-to-text over the full batch, and
segment-aggregate-to-text over the sub-batch of pairs whose segment set
survived filtering. The training loop uses Adam, multiplies the learning
rate by a decay factor on a fixed epoch schedule, evaluates validation MeanR
each epoch, and keeps the best-validation parameters.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import PairRecord, SplitSpec, build_batches, split_dataset
from .encoders import DualEncoder, wrap_tokens
from .errors import BatchTooSmall, DimensionMismatch, DivergedLoss
from .evaluation import evaluate
from .seeding import stream_seed
from .segments import FilterConfig, segment_pipeline


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    learning_rate: float = 1e-5
    lr_decay_factor: float = 0.3
    lr_decay_every: int = 10
    epochs: int = 15
    batch_size: int = 40
    l2_weight_decay: float = 0.0  # optional true L2 term, off by default

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.learning_rate < 0:  # 0 is allowed: the null-update case
            raise ValueError("learning_rate must be non-negative")


@dataclass
class PretrainLoss:
    img2text: torch.Tensor
    seg2text: torch.Tensor
    total: torch.Tensor


def contrastive_loss(left: torch.Tensor, right: torch.Tensor,
                     temperature: float) -> torch.Tensor:
    """Symmetric InfoNCE; pair i <-> i is the positive."""
    if left.shape[0] != right.shape[0]:
        raise DimensionMismatch(
            f"batch sizes differ: {left.shape[0]} vs {right.shape[0]}")
    if left.shape[0] < 2:
        raise BatchTooSmall("contrastive loss needs a batch of at least 2")
    if left.shape[1] != right.shape[1]:
        raise DimensionMismatch(
            f"embedding dims differ: {left.shape[1]} vs {right.shape[1]}")
    logits = left @ right.T / temperature
    labels = torch.arange(left.shape[0])
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def pretrain_loss(image_embs: torch.Tensor, segment_agg_embs: torch.Tensor,
                  text_embs: torch.Tensor, temperature: float,
                  seg_mask: torch.Tensor) -> PretrainLoss:
    """Image-text loss plus segment-text loss over the unmasked sub-batch."""
    img2text = contrastive_loss(image_embs, text_embs, temperature)
    norms = segment_agg_embs.norm(dim=-1)
    usable = seg_mask & (norms > 1e-12)
    if int(usable.sum()) >= 2:
        aggs = segment_agg_embs[usable]
        aggs = aggs / aggs.norm(dim=-1, keepdim=True)
        seg2text = contrastive_loss(aggs, text_embs[usable], temperature)
    else:
        seg2text = torch.zeros((), dtype=torch.float64)
    return PretrainLoss(img2text=img2text, seg2text=seg2text, total=img2text + seg2text)


def encode_batch(model: DualEncoder, records: list[PairRecord],
                 filter_config: FilterConfig):
    """Encode one batch: (image_embs, text_embs, segment_aggs, seg_mask)."""
    if records[0].image_features is not None:
        images = torch.as_tensor(
            np.stack([r.image_features for r in records]), dtype=torch.float64)
    else:
        images = torch.as_tensor(
            np.stack([r.image_pixels for r in records]), dtype=torch.float64)
    image_embs = model.encode_images(images)
    text_embs = model.encode_texts([wrap_tokens(r.caption_tokens) for r in records])

    aggs = []
    mask = []
    for i, record in enumerate(records):
        agg, kept = segment_pipeline(
            record.segments, model.encode_segments, text_embs[i], filter_config)
        aggs.append(agg)
        mask.append(bool(kept))
    return image_embs, text_embs, torch.stack(aggs), torch.tensor(mask)


@dataclass
class PretrainResult:
    model: DualEncoder
    log: list[dict]
    best_epoch: int
    best_val_mean_recall: float
    splits: tuple  # (train, val, test) record lists


def pretrain(model: DualEncoder, records: list[PairRecord],
             config: ContrastiveConfig, seed: int,
             filter_config: FilterConfig | None = None) -> PretrainResult:
    """Train on a 7:1:2 split of `records`; returns the best-validation model."""
    filter_config = filter_config or FilterConfig()
    split = SplitSpec(0.7, 0.1, 0.2, seed=stream_seed(seed, "pretrain.split"))
    train, val, test = split_dataset(records, split)

    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate,
        betas=(0.9, 0.999), eps=1e-8, weight_decay=config.l2_weight_decay)
    log: list[dict] = []
    best_state = copy.deepcopy(model.state_dict())
    best_val = -1.0
    best_epoch = 0

    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate * config.lr_decay_factor ** ((epoch - 1) // config.lr_decay_every)
        for group in optimizer.param_groups:
            group["lr"] = lr
        batches = build_batches(
            train, config.batch_size,
            stream_seed(seed, f"pretrain.batches.epoch{epoch}"), drop_last=True)
        for batch_idx, batch in enumerate(batches):
            image_embs, text_embs, seg_aggs, seg_mask = encode_batch(
                model, batch, filter_config)
            loss = pretrain_loss(
                image_embs, seg_aggs, text_embs, config.temperature, seg_mask)
            if not torch.isfinite(loss.total):
                raise DivergedLoss(
                    f"non-finite pretraining loss at epoch {epoch}, batch {batch_idx}",
                    state={"epoch": epoch, "batch": batch_idx,
                           "img2text": float(loss.img2text.detach()),
                           "seg2text": float(loss.seg2text.detach())})
            optimizer.zero_grad()
            loss.total.backward()
            optimizer.step()
            log.append({
                "epoch": epoch, "batch": batch_idx,
                "loss_img2text": float(loss.img2text.detach()),
                "loss_seg2text": float(loss.seg2text.detach()),
                "val_mean_recall": None,
            })
        val_report = evaluate(model, val) if val else None
        val_mean = val_report.mean_recall if val_report else float("nan")
        log.append({
            "epoch": epoch, "batch": None,
            "loss_img2text": None, "loss_seg2text": None,
            "val_mean_recall": val_mean,
        })
        if val_report and val_mean > best_val:
            best_val = val_mean
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    if best_epoch > 0:
        model.load_state_dict(best_state)
    return PretrainResult(model=model, log=log, best_epoch=best_epoch,
                          best_val_mean_recall=best_val, splits=(train, val, test))
