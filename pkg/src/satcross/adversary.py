"""Weighted adversarial cross-domain fine-tuning.

The source-domain triplet loss (cosine distances, hardest-in-batch negatives,
per-sample weights from the source sampler) keeps retrieval structure intact
while a 3-layer MLP domain discriminator and a label-flipped encoder
objective pull target-domain features onto the source manifold. Updates
alternate: discriminator first on detached embeddings, then the encoders on
triplet + beta * adversarial.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .corpus import PairRecord, SplitSpec, build_batches, split_dataset
from .encoders import DualEncoder, wrap_tokens
from .errors import BatchTooSmall, DimensionMismatch, DivergedLoss, IncompatibleCheckpoint
from .evaluation import encode_corpus
from .sampler import (
    CurriculumState,
    compute_w1,
    compute_w2,
    compute_weight_vector,
    curriculum_window,
    pair_features,
    select_source_subset,
)
from .seeding import stream_seed, substream

PROB_EPS = 1e-7


@dataclass
class TripletConfig:
    margin: float = 0.2
    mining: str = "hardest"  # or "random"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.mining not in ("hardest", "random"):
            raise ValueError(f"unknown mining mode '{self.mining}'")


@dataclass
class AdaptConfig:
    beta: float = 1.0
    finetune_lr: float = 1e-7
    disc_lr: float | None = None  # defaults to 10x finetune_lr
    epochs: int = 5
    target_batch: int = 16
    source_batch: int = 80
    adv_weight_target: bool = True
    allow_ratio_override: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.finetune_lr < 0:  # 0 is allowed: the null-update case
            raise ValueError("finetune_lr must be non-negative")
        if self.target_batch < 2:
            raise ValueError("target_batch must be >= 2")
        if not self.allow_ratio_override and self.source_batch != 5 * self.target_batch:
            raise ValueError(
                f"source_batch {self.source_batch} must be 5x target_batch "
                f"{self.target_batch} (set allow_ratio_override to change)")

    @property
    def effective_disc_lr(self) -> float:
        return self.disc_lr if self.disc_lr is not None else 10.0 * self.finetune_lr


@dataclass
class Toggles:
    ss: bool = True  # similarity-based source sampling
    cl: bool = True  # curriculum windowing
    at: bool = True  # adversarial training

    def label(self) -> str:
        off = [name for name in ("ss", "cl", "at") if not getattr(self, name)]
        return "full" if not off else "no_" + "_no_".join(off)


def cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - <a, b> along the last axis; in [0, 2] for unit vectors."""
    return 1.0 - (a * b).sum(dim=-1)


def weighted_triplet_loss(text_embs: torch.Tensor, image_embs: torch.Tensor,
                          w_vec: torch.Tensor, margin: float,
                          mining: str = "hardest",
                          rng: np.random.Generator | None = None) -> torch.Tensor:
    """Bidirectional hinge loss with per-sample weights.

    Anchors are texts (negatives among the other images) and images
    (negatives among the other texts); both hinges of sample i are scaled by
    w_vec[i] and the result is averaged over the batch.
    """
    n = text_embs.shape[0]
    if n < 2:
        raise BatchTooSmall("triplet loss needs a batch of at least 2")
    dmat = 1.0 - text_embs @ image_embs.T  # dmat[i, j] = d(text_i, image_j)
    pos = dmat.diagonal()
    eye = torch.eye(n, dtype=torch.bool)
    if mining == "hardest":
        masked = dmat.masked_fill(eye, 3.0)  # distances top out at 2
        neg_for_text = masked.min(dim=1).values
        neg_for_image = masked.min(dim=0).values
    else:
        if rng is None:
            raise ValueError("random mining needs an rng")
        idx_t = torch.tensor([
            (i + 1 + rng.integers(0, n - 1)) % n for i in range(n)])
        idx_i = torch.tensor([
            (i + 1 + rng.integers(0, n - 1)) % n for i in range(n)])
        neg_for_text = dmat[torch.arange(n), idx_t]
        neg_for_image = dmat[idx_i, torch.arange(n)]
    hinge_text = torch.relu(pos - neg_for_text + margin)
    hinge_image = torch.relu(pos - neg_for_image + margin)
    return (w_vec * (hinge_text + hinge_image)).mean()


class Discriminator(nn.Module):
    """3-layer MLP scoring how likely a pair embedding is source-domain."""

    def __init__(self, embed_dim: int, seed: int):
        super().__init__()
        dims = [(2 * embed_dim, embed_dim),
                (embed_dim, max(1, embed_dim // 2)),
                (max(1, embed_dim // 2), 1)]
        weights = []
        biases = []
        for i, (fan_in, fan_out) in enumerate(dims):
            rng = substream(seed, "disc-init", f"layer{i}")
            bound = 1.0 / math.sqrt(fan_in)
            weights.append(nn.Parameter(torch.from_numpy(
                rng.uniform(-bound, bound, size=(fan_in, fan_out)))))
            biases.append(nn.Parameter(torch.zeros(fan_out, dtype=torch.float64)))
        self.weights = nn.ParameterList(weights)
        self.biases = nn.ParameterList(biases)

    def forward(self, text_emb: torch.Tensor, image_emb: torch.Tensor) -> torch.Tensor:
        if text_emb.shape[-1] != image_emb.shape[-1]:
            raise DimensionMismatch(
                f"text dim {text_emb.shape[-1]} != image dim {image_emb.shape[-1]}")
        h = torch.cat([text_emb, image_emb], dim=-1)
        h = torch.relu(h @ self.weights[0] + self.biases[0])
        h = torch.relu(h @ self.weights[1] + self.biases[1])
        return torch.sigmoid(h @ self.weights[2] + self.biases[2]).squeeze(-1)


def adversarial_losses(src_text: torch.Tensor, src_image: torch.Tensor,
                       tgt_text: torch.Tensor, tgt_image: torch.Tensor,
                       w_vec: torch.Tensor, disc: Discriminator,
                       weight_target: bool = True):
    """(disc_loss, enc_loss) with probabilities clamped away from 0 and 1.

    Minimizing disc_loss trains the discriminator toward source -> 1,
    target -> 0; enc_loss is the label-flipped objective whose gradients are
    meant for the encoders only.
    """
    d_src = disc(src_text, src_image).clamp(PROB_EPS, 1.0 - PROB_EPS)
    d_tgt = disc(tgt_text, tgt_image).clamp(PROB_EPS, 1.0 - PROB_EPS)
    w_tgt = w_vec if weight_target else torch.ones_like(w_vec)
    disc_loss = -(w_vec * torch.log(d_src) + w_tgt * torch.log(1.0 - d_tgt)).mean()
    enc_loss = -(w_tgt * torch.log(d_tgt) + w_vec * torch.log(1.0 - d_src)).mean()
    return disc_loss, enc_loss


@dataclass
class FinetuneResult:
    model: DualEncoder
    discriminator: Discriminator
    log: list[dict]
    target_splits: tuple  # (train, val, test) record lists


def _encode_pairs(model: DualEncoder, records: list[PairRecord]):
    if records[0].image_features is not None:
        images = torch.as_tensor(
            np.stack([r.image_features for r in records]), dtype=torch.float64)
    else:
        images = torch.as_tensor(
            np.stack([r.image_pixels for r in records]), dtype=torch.float64)
    image_embs = model.encode_images(images)
    text_embs = model.encode_texts([wrap_tokens(r.caption_tokens) for r in records])
    return text_embs, image_embs


def finetune(pretrained: DualEncoder, source_records: list[PairRecord],
             target_records: list[PairRecord], adapt: AdaptConfig,
             toggles: Toggles, seed: int,
             triplet: TripletConfig | None = None,
             curriculum_mode: str = "window",
             curriculum_increment: float = 0.2) -> FinetuneResult:
    """Adapt a pretrained dual encoder to the target domain.

    The target corpus is split 2:1:7 internally; fine-tuning steps draw
    target batches from its train portion and source batches from
    `source_records`. The pretrained weights stay frozen for the sampler's
    similarity features; a copy receives the updates.
    """
    triplet = triplet or TripletConfig()
    if len(source_records) < adapt.source_batch:
        raise IncompatibleCheckpoint(
            f"source corpus of {len(source_records)} records cannot fill "
            f"source batches of {adapt.source_batch}")

    model = copy.deepcopy(pretrained)
    frozen = pretrained
    disc = Discriminator(model.config.embed_dim, stream_seed(seed, "finetune.disc-init"))

    split = SplitSpec(0.2, 0.1, 0.7, seed=stream_seed(seed, "finetune.split"))
    tgt_train, tgt_val, tgt_test = split_dataset(target_records, split)

    # Frozen pair features for the sampler, computed once per record pool.
    if toggles.ss:
        src_img, src_txt = encode_corpus(frozen, source_records)
        src_feats_all = pair_features(src_img, src_txt)
        tgt_img, tgt_txt = encode_corpus(frozen, tgt_train)
        tgt_feats_all = pair_features(tgt_img, tgt_txt)

    enc_opt = torch.optim.Adam(model.parameters(), lr=adapt.finetune_lr,
                               betas=(0.9, 0.999), eps=1e-8)
    disc_opt = torch.optim.Adam(disc.parameters(), lr=adapt.effective_disc_lr,
                                betas=(0.9, 0.999), eps=1e-8)

    n_windows = max(1, round(1.0 / curriculum_increment))
    log: list[dict] = []
    step = 0
    for epoch in range(1, adapt.epochs + 1):
        if toggles.ss and toggles.cl:
            state = CurriculumState(epoch=min(epoch, n_windows), n_epochs=n_windows,
                                    increment=curriculum_increment, mode=curriculum_mode)
            window = curriculum_window(state)
        else:
            window = (0.0, 1.0)

        target_batches = build_batches(
            list(range(len(tgt_train))), adapt.target_batch,
            stream_seed(seed, f"finetune.target.epoch{epoch}"), drop_last=True)
        rng_src = substream(seed, "finetune.source", f"epoch{epoch}")
        rng_pick = substream(seed, "finetune.random-select", f"epoch{epoch}")

        for tgt_idx in target_batches:
            src_idx = rng_src.choice(len(source_records), adapt.source_batch, replace=False)
            if toggles.ss:
                w1 = compute_w1(tgt_feats_all[tgt_idx], src_feats_all[src_idx],
                                require_paper_ratio=not adapt.allow_ratio_override)
                picked = select_source_subset(w1, window, adapt.target_batch)
                w2 = compute_w2(src_feats_all[src_idx][picked], tgt_feats_all[tgt_idx])
                w_vec = compute_weight_vector(w2).weights
                sel_sources = [source_records[src_idx[p]] for p in picked]
            else:
                picked = rng_pick.choice(adapt.source_batch, adapt.target_batch,
                                         replace=False)
                w_vec = np.ones(adapt.target_batch)
                sel_sources = [source_records[src_idx[p]] for p in picked]

            weights = torch.as_tensor(w_vec, dtype=torch.float64)
            src_text, src_image = _encode_pairs(model, sel_sources)
            tgt_batch = [tgt_train[i] for i in tgt_idx]
            tgt_text, tgt_image = _encode_pairs(model, tgt_batch)

            adv_disc_val = None
            adv_enc_val = None
            if toggles.at:
                disc_opt.zero_grad()
                disc_loss, _ = adversarial_losses(
                    src_text.detach(), src_image.detach(),
                    tgt_text.detach(), tgt_image.detach(),
                    weights, disc, weight_target=adapt.adv_weight_target)
                disc_loss.backward()
                disc_opt.step()
                adv_disc_val = float(disc_loss.detach())

            triplet_rng = substream(seed, "finetune.triplet", f"step{step}") \
                if triplet.mining == "random" else None
            triplet_loss = weighted_triplet_loss(
                src_text, src_image, weights, triplet.margin,
                mining=triplet.mining, rng=triplet_rng)
            if toggles.at:
                _, enc_loss = adversarial_losses(
                    src_text, src_image, tgt_text, tgt_image,
                    weights, disc, weight_target=adapt.adv_weight_target)
                total = triplet_loss + adapt.beta * enc_loss
                adv_enc_val = float(enc_loss.detach())
            else:
                total = triplet_loss

            if not torch.isfinite(total):
                raise DivergedLoss(
                    f"non-finite fine-tuning loss at step {step}",
                    state={"epoch": epoch, "step": step,
                           "triplet": float(triplet_loss.detach())})

            enc_opt.zero_grad()
            disc_opt.zero_grad()  # keep encoder-step gradients off the next disc update
            total.backward()
            enc_opt.step()

            log.append({
                "step": step,
                "window": list(window) if toggles.ss else None,
                "triplet": float(triplet_loss.detach()),
                "adv_enc": adv_enc_val,
                "adv_disc": adv_disc_val,
                "total": float(total.detach()),
                "wvec_min": float(weights.min()),
                "wvec_max": float(weights.max()),
            })
            step += 1

    return FinetuneResult(model=model, discriminator=disc, log=log,
                          target_splits=(tgt_train, tgt_val, tgt_test))
