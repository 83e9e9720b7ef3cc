"""Geo-tag analytics: frequency tables, occurrence vectors, 2-D PCA, k-means.

Each tag becomes a row of occurrence counts across records; PCA reduces
those rows to two coordinates and k-means groups them. This is the
machine-readable data behind word clouds and cluster scatter plots
(word-cloud rendering itself stays out of scope).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import PairRecord
from .errors import DegenerateVariance, TooFewPoints
from .seeding import substream


@dataclass
class TagMatrix:
    counts: np.ndarray  # (n_tags, n_records) occurrence counts
    tags: list[str]     # row order = first appearance order

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if (self.counts < 0).any():
            raise ValueError("occurrence counts must be non-negative")
        if self.counts.shape[0] != len(self.tags):
            raise ValueError("row count must match the tag list")


@dataclass
class PcaResult:
    components: np.ndarray           # (2, n_records) orthonormal rows
    projections: np.ndarray          # (n_tags, 2)
    explained_variance: np.ndarray   # fractions, decreasing


def tag_frequency(records: list[PairRecord]) -> dict[str, int]:
    """Multiset counts of geo-tags over all records, first-appearance order."""
    counts: dict[str, int] = {}
    for record in records:
        for tag in record.geo_tags:
            counts[tag] = counts.get(tag, 0) + 1
    return counts


def build_tag_matrix(records: list[PairRecord]) -> TagMatrix:
    """Per-tag occurrence counts across records (rows=tags, cols=records)."""
    tags: list[str] = []
    index: dict[str, int] = {}
    for record in records:
        for tag in record.geo_tags:
            if tag not in index:
                index[tag] = len(tags)
                tags.append(tag)
    counts = np.zeros((len(tags), len(records)), dtype=np.int64)
    for col, record in enumerate(records):
        for tag in record.geo_tags:
            counts[index[tag], col] += 1
    return TagMatrix(counts=counts, tags=tags)


def pca_2d(matrix: TagMatrix) -> PcaResult:
    """Project tag rows onto the top-2 covariance eigenvectors.

    Sign convention: each component's largest-magnitude entry is positive.
    Covariance uses 1/(n-1) normalization.
    """
    data = matrix.counts.astype(np.float64)
    n_tags, n_records = data.shape
    if n_tags < 2 or n_records < 2:
        raise ValueError("PCA needs at least 2 tags and 2 records")
    centered = data - data.mean(axis=0)
    if np.allclose(centered, 0.0):
        raise DegenerateVariance("all tag rows are identical")
    cov = centered.T @ centered / (n_tags - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    components = eigvecs[:, order[:2]].T.copy()
    for i in range(2):
        pivot = np.argmax(np.abs(components[i]))
        if components[i, pivot] < 0:
            components[i] = -components[i]
    projections = centered @ components.T
    total = eigvals.sum()
    explained = eigvals[:2] / total if total > 0 else np.zeros(2)
    return PcaResult(components=components, projections=projections,
                     explained_variance=explained)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ style centers: each next center drawn proportional
    to squared distance from the nearest existing center."""
    n = points.shape[0]
    centers = [points[int(rng.integers(0, n))]]
    for _ in range(1, k):
        dists = np.min(
            [np.sum((points - c) ** 2, axis=1) for c in centers], axis=0)
        total = dists.sum()
        if total <= 0:
            centers.append(points[int(rng.integers(0, n))])
            continue
        probs = dists / total
        centers.append(points[int(rng.choice(n, p=probs))])
    return np.stack(centers)


def cluster_tags(projections: np.ndarray, k: int, seed: int,
                 max_iter: int = 100, return_history: bool = False):
    """k-means labels for 2-D tag coordinates, deterministic per seed.

    With return_history, also returns the within-cluster sum of squares after
    each assignment step (non-increasing by construction).
    """
    points = np.asarray(projections, dtype=np.float64)
    if k > points.shape[0]:
        raise TooFewPoints(f"k={k} exceeds {points.shape[0]} points")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = substream(seed, "kmeans")
    centers = _kmeans_pp_init(points, k, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        history.append(float(dists[np.arange(points.shape[0]), new_labels].sum()))
        if labels is not None and (new_labels == labels).all():
            break
        labels = new_labels
        for c in range(k):
            members = points[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    if return_history:
        return labels, history
    return labels


def analyze_tags(records: list[PairRecord], k: int, seed: int) -> dict:
    """Frequency table, 2-D coordinates, cluster labels, explained variance."""
    matrix = build_tag_matrix(records)
    frequencies = tag_frequency(records)
    result: dict = {"frequencies": frequencies, "tags": matrix.tags}
    if len(matrix.tags) >= 2 and matrix.counts.shape[1] >= 2:
        pca = pca_2d(matrix)
        k_eff = min(k, len(matrix.tags))
        labels = cluster_tags(pca.projections, k_eff, seed)
        result["projections"] = pca.projections.tolist()
        result["cluster_labels"] = labels.tolist()
        result["explained_variance"] = pca.explained_variance.tolist()
    return result
