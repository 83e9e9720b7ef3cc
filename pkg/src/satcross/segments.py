"""Segment filtering and score-weighted aggregation.

Pipeline per image: drop segments whose area fraction is at or below the
area threshold, score the survivors against the caption embedding by inner
product, drop scores at or below the score threshold (both comparisons are
strict '>'), cap at the highest-scoring `max_segments`, then combine the
kept embeddings with their scores as weights. The aggregate is deliberately
not re-normalized; normalization happens at loss time.

An image whose segments are all rejected yields a zero vector and is masked
out of the segment-to-text loss for that batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .corpus import SegmentInput
from .errors import DimensionMismatch, EmptySegmentSet


@dataclass
class FilterConfig:
    area_threshold: float = 0.2
    score_threshold: float = 0.2
    max_segments: int = 6

    def __post_init__(self):
        if not 0.0 <= self.area_threshold < 1.0:
            raise ValueError("area_threshold must be in [0, 1)")
        if self.max_segments < 1:
            raise ValueError("max_segments must be >= 1")


@dataclass
class ScoredSegment:
    """A segment with its unit embedding and caption-similarity score."""

    segment: SegmentInput
    embedding: torch.Tensor
    score: torch.Tensor  # 0-dim tensor so gradients can flow through weights
    index: int  # position in the original segment list, for tie-breaking


def filter_by_area(segments: list[SegmentInput], area_threshold: float) -> list[SegmentInput]:
    """Keep segments with area strictly above the threshold, order preserved."""
    return [s for s in segments if s.area > area_threshold]


def score_segments(segment_embeddings: torch.Tensor, text_embedding: torch.Tensor) -> torch.Tensor:
    """Inner products of (m, d) segment embeddings with one (d,) text embedding."""
    if segment_embeddings.shape[-1] != text_embedding.shape[-1]:
        raise DimensionMismatch(
            f"segment dim {segment_embeddings.shape[-1]} != text dim {text_embedding.shape[-1]}")
    return segment_embeddings @ text_embedding


def filter_by_score(scored: list[ScoredSegment], score_threshold: float,
                    max_segments: int) -> list[ScoredSegment]:
    """Keep scores strictly above the threshold, cap at the top max_segments.

    Ties break toward the lower original index; output is sorted by
    descending score.
    """
    def value(s: ScoredSegment) -> float:  # selection itself carries no gradient
        return float(s.score.detach()) if torch.is_tensor(s.score) else float(s.score)

    kept = [s for s in scored if value(s) > score_threshold]
    kept.sort(key=lambda s: (-value(s), s.index))
    return kept[:max_segments]


def aggregate_segments(scored: list[ScoredSegment]) -> torch.Tensor:
    """Score-weighted mean of segment embeddings (not re-normalized)."""
    if not scored:
        raise EmptySegmentSet("no segments survived filtering")
    weights = torch.stack([torch.as_tensor(s.score, dtype=torch.float64) for s in scored])
    embeddings = torch.stack([torch.as_tensor(s.embedding, dtype=torch.float64) for s in scored])
    return (weights.unsqueeze(1) * embeddings).sum(dim=0) / weights.sum()


def segment_pipeline(segments: list[SegmentInput], encode_segments,
                     text_embedding: torch.Tensor, config: FilterConfig):
    """Full filter/score/aggregate chain for one image.

    `encode_segments` maps a stacked (m, feat) tensor to (m, d) unit
    embeddings (the shared image tower). Returns (aggregate, kept) where
    `aggregate` is a zero vector and `kept` is empty when every segment is
    rejected.
    """
    surviving = filter_by_area(segments, config.area_threshold)
    if not surviving:
        return torch.zeros_like(text_embedding), []
    features = torch.stack([
        torch.as_tensor(s.feature, dtype=torch.float64) for s in surviving])
    embeddings = encode_segments(features)
    scores = score_segments(embeddings, text_embedding)
    scored = [
        ScoredSegment(segment=s, embedding=embeddings[i], score=scores[i], index=i)
        for i, s in enumerate(surviving)
    ]
    kept = filter_by_score(scored, config.score_threshold, config.max_segments)
    if not kept:
        return torch.zeros_like(text_embedding), []
    return aggregate_segments(kept), kept
