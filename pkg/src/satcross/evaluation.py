"""Retrieval evaluation: similarity ranking, R@K both directions, MeanR.

Ground truth is a bijection (one caption per image), so query i's correct
gallery item is index i. Similarity ties break toward the lower gallery
index, making reports deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoders import DualEncoder, wrap_tokens
from .errors import DimensionMismatch, EmptyGallery

_ENCODE_CHUNK = 128


@dataclass
class RecallReport:
    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float
    mean_recall: float

    def __post_init__(self):
        values = [self.i2t_r1, self.i2t_r5, self.i2t_r10,
                  self.t2i_r1, self.t2i_r5, self.t2i_r10]
        for v in values:
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"recall {v} outside [0, 100]")
        if not (self.i2t_r1 <= self.i2t_r5 <= self.i2t_r10
                and self.t2i_r1 <= self.t2i_r5 <= self.t2i_r10):
            raise ValueError("recall must be non-decreasing in k")
        if abs(self.mean_recall - sum(values) / 6.0) > 1e-9:
            raise ValueError("mean_recall is not the mean of the six recalls")

    def to_dict(self) -> dict:
        return {
            "i2t_r1": self.i2t_r1, "i2t_r5": self.i2t_r5, "i2t_r10": self.i2t_r10,
            "t2i_r1": self.t2i_r1, "t2i_r5": self.t2i_r5, "t2i_r10": self.t2i_r10,
            "mean_recall": self.mean_recall,
        }


def rank(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Per-query gallery indices sorted by descending cosine similarity.

    Ties break toward the lower gallery index (stable sort on the negated
    similarities). Invariant to positive rescaling of any embedding.
    """
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.size == 0 or gallery.shape[0] == 0:
        raise EmptyGallery("gallery has no items")
    if queries.shape[1] != gallery.shape[1]:
        raise DimensionMismatch(
            f"query dim {queries.shape[1]} != gallery dim {gallery.shape[1]}")
    qn = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    gn = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    sims = qn @ gn.T
    return np.argsort(-sims, axis=1, kind="stable")


def recall_at_k(rankings: np.ndarray, ground_truth: np.ndarray, k: int) -> float:
    """Percent of queries whose ground-truth index appears in the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rankings = np.asarray(rankings)
    ground_truth = np.asarray(ground_truth)
    hits = (rankings[:, :k] == ground_truth[:, None]).any(axis=1)
    return 100.0 * float(hits.sum()) / rankings.shape[0]


def encode_corpus(model: DualEncoder, records) -> tuple[np.ndarray, np.ndarray]:
    """Image and text embeddings for a record list, chunked, no gradients."""
    image_chunks = []
    text_chunks = []
    with torch.no_grad():
        for start in range(0, len(records), _ENCODE_CHUNK):
            chunk = records[start:start + _ENCODE_CHUNK]
            if chunk[0].image_features is not None:
                images = torch.as_tensor(
                    np.stack([r.image_features for r in chunk]), dtype=torch.float64)
            else:
                images = torch.as_tensor(
                    np.stack([r.image_pixels for r in chunk]), dtype=torch.float64)
            image_chunks.append(model.encode_images(images).numpy())
            seqs = [wrap_tokens(r.caption_tokens) for r in chunk]
            text_chunks.append(model.encode_texts(seqs).numpy())
    return np.concatenate(image_chunks), np.concatenate(text_chunks)


def report_from_embeddings(image_embs: np.ndarray, text_embs: np.ndarray) -> RecallReport:
    n = image_embs.shape[0]
    gt = np.arange(n)
    i2t = rank(image_embs, text_embs)
    t2i = rank(text_embs, image_embs)
    values = {}
    for name, rankings in (("i2t", i2t), ("t2i", t2i)):
        for k in (1, 5, 10):
            values[f"{name}_r{k}"] = recall_at_k(rankings, gt, k)
    mean = sum(values.values()) / 6.0
    return RecallReport(mean_recall=mean, **values)


def evaluate(model: DualEncoder, records) -> RecallReport:
    """Encode a test set and fill a RecallReport for both directions."""
    if not records:
        raise EmptyGallery("test set is empty")
    image_embs, text_embs = encode_corpus(model, records)
    return report_from_embeddings(image_embs, text_embs)


def transfer_eval(pretrained: DualEncoder, adapted: DualEncoder, target_test) -> dict:
    """Direct-transfer vs adapted comparison on one identical test split."""
    direct = evaluate(pretrained, target_test)
    adapted_report = evaluate(adapted, target_test)
    return {
        "direct": direct,
        "adapted": adapted_report,
        "delta_mean_recall": adapted_report.mean_recall - direct.mean_recall,
    }
