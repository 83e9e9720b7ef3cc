"""Curriculum-based source sampling for cross-domain fine-tuning.

Per fine-tuning step: aggregate each image-text pair into one unit feature,
build the target-by-source cosine matrix, restrict each target's ranked
source list to the epoch's percentile window, pick exactly as many distinct
sources as there are targets by round-robin, then turn the selected-source
by target cosine matrix into per-source weights (min-max normalized row
sums, rescaled to sum to n).

Features come from frozen pre-trained encoders; nothing here carries
gradients, so plain numpy is used throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InsufficientSources, ZeroVector

PAPER_SOURCE_RATIO = 5  # source batch is five target batches


@dataclass
class CurriculumState:
    epoch: int  # 1-based
    n_epochs: int = 5
    increment: float = 0.20
    mode: str = "window"

    def __post_init__(self):
        if not 1 <= self.epoch <= self.n_epochs:
            raise ValueError(f"epoch {self.epoch} outside [1, {self.n_epochs}]")
        if self.mode not in ("window", "cumulative"):
            raise ValueError(f"unknown curriculum mode '{self.mode}'")
        if self.increment * self.n_epochs > 1.0 + 1e-9:
            raise ValueError("increment * n_epochs must not exceed 1")


@dataclass
class SimilarityMatrixW1:
    matrix: np.ndarray  # (n_targets, n_sources) cosines
    target_ids: list = field(default_factory=list)
    source_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.min() < -1.0 - 1e-9 or self.matrix.max() > 1.0 + 1e-9:
            raise ValueError("similarity entries must lie in [-1, 1]")


@dataclass
class WeightVector:
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = self.weights.shape[0]
        if (self.weights < -1e-12).any():
            raise ValueError("weights must be non-negative")
        if abs(self.weights.sum() - n) > 1e-6:
            raise ValueError(f"weights must sum to {n}")


def aggregate_pair_feature(image_emb: np.ndarray, text_emb: np.ndarray) -> np.ndarray:
    """Unit-normalized mean of the two embeddings of one pair."""
    image_emb = np.asarray(image_emb, dtype=np.float64)
    text_emb = np.asarray(text_emb, dtype=np.float64)
    if image_emb.shape != text_emb.shape:
        raise DimensionMismatch(
            f"image dim {image_emb.shape} != text dim {text_emb.shape}")
    mean = (image_emb + text_emb) / 2.0
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise ZeroVector("image and text embeddings cancel exactly")
    return mean / norm


def pair_features(image_embs: np.ndarray, text_embs: np.ndarray) -> np.ndarray:
    """Row-wise aggregate_pair_feature for aligned batches."""
    means = (np.asarray(image_embs, dtype=np.float64)
             + np.asarray(text_embs, dtype=np.float64)) / 2.0
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    if (norms < 1e-12).any():
        raise ZeroVector("some image/text embeddings cancel exactly")
    return means / norms


def _cosine_matrix(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    if rows.shape[1] != cols.shape[1]:
        raise DimensionMismatch(
            f"feature dims differ: {rows.shape[1]} vs {cols.shape[1]}")
    rn = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    cn = cols / np.linalg.norm(cols, axis=1, keepdims=True)
    return np.clip(rn @ cn.T, -1.0, 1.0)


def compute_w1(target_feats: np.ndarray, source_feats: np.ndarray,
               require_paper_ratio: bool = False) -> SimilarityMatrixW1:
    """Targets-by-sources cosine similarity matrix."""
    matrix = _cosine_matrix(target_feats, source_feats)
    if require_paper_ratio and matrix.shape[1] != PAPER_SOURCE_RATIO * matrix.shape[0]:
        raise ValueError(
            f"source count {matrix.shape[1]} is not "
            f"{PAPER_SOURCE_RATIO}x target count {matrix.shape[0]}")
    return SimilarityMatrixW1(matrix=matrix)


def curriculum_window(state: CurriculumState) -> tuple[float, float]:
    """Rank-percentile window (lo, hi] for the given epoch."""
    hi = state.epoch * state.increment
    lo = 0.0 if state.mode == "cumulative" else (state.epoch - 1) * state.increment
    return lo, hi


def select_source_subset(w1: SimilarityMatrixW1, window: tuple[float, float],
                         n_targets: int) -> list[int]:
    """Exactly n_targets distinct source indices for the given window.

    Each target ranks sources by descending similarity (ties toward the lower
    source index) and contributes candidates from the window's rank band.
    Targets take turns in index order, each picking its best not-yet-chosen
    candidate. If the window band runs out, candidates continue with the
    ranks just below the window (more similar, closest first), then the ranks
    above it.
    """
    matrix = w1.matrix
    n_t, n_s = matrix.shape
    if n_s < n_targets:
        raise InsufficientSources(f"{n_s} sources < {n_targets} targets")
    lo, hi = window
    r_lo = math.floor(lo * n_s + 1e-9)
    r_hi = min(n_s, math.floor(hi * n_s + 1e-9))

    # 0-based rank positions: window band, then below-window, then above.
    order = (list(range(r_lo, r_hi))
             + list(range(r_lo - 1, -1, -1))
             + list(range(r_hi, n_s)))

    candidates = []
    for j in range(n_t):
        ranked = np.lexsort((np.arange(n_s), -matrix[j]))
        candidates.append([int(ranked[p]) for p in order])

    selected: list[int] = []
    chosen: set[int] = set()
    pointers = [0] * n_t
    while len(selected) < n_targets:
        for j in range(n_t):
            if len(selected) == n_targets:
                break
            while pointers[j] < n_s and candidates[j][pointers[j]] in chosen:
                pointers[j] += 1
            if pointers[j] < n_s:
                pick = candidates[j][pointers[j]]
                selected.append(pick)
                chosen.add(pick)
                pointers[j] += 1
    return selected


def compute_w2(selected_source_feats: np.ndarray, target_feats: np.ndarray) -> np.ndarray:
    """Selected-sources-by-targets cosine matrix (rows are sources)."""
    if selected_source_feats.shape[0] != target_feats.shape[0]:
        raise DimensionMismatch(
            f"{selected_source_feats.shape[0]} sources vs "
            f"{target_feats.shape[0]} targets; expected equal counts")
    return _cosine_matrix(selected_source_feats, target_feats)


def compute_weight_vector(w2: np.ndarray) -> WeightVector:
    """Min-max normalized row sums, rescaled so the weights sum to n."""
    w2 = np.asarray(w2, dtype=np.float64)
    row_sums = w2.sum(axis=1)
    n = row_sums.shape[0]
    spread = row_sums.max() - row_sums.min()
    if n == 1 or spread <= 1e-12:
        return WeightVector(weights=np.ones(n))
    normalized = (row_sums - row_sums.min()) / spread
    return WeightVector(weights=n * normalized / normalized.sum())
