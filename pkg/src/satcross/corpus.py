"""Corpus format, manifest IO, dataset splitting, and synthetic two-domain data.

A manifest is UTF-8 JSON-lines, one record per line with keys `id`, `domain`,
exactly one of `image_features` / `image_pixels`, `caption_tokens`,
`geo_tags`, and `segments` (list of {"area": float, "feature": [float]}).
Unknown keys are rejected.

The synthetic generator produces two domains built from shared latent
concepts. Domain B's concept prototypes are translated along a fixed random
direction and its concept prior is re-weighted, so the strength of the
distribution shift is a single controllable number (0 = identical domains).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DuplicateId,
    EmptyCorpus,
    MalformedRecord,
    MixedImageRepresentation,
)
from .seeding import substream

# Caption token ids 0 and 1 are reserved for the sequence start/end markers
# added at encode time; corpus vocabularies start at 2.
CAPTION_TOKEN_BASE = 2
TEMPLATE_LEN = 3
DETAIL_SLOTS = 6

_MANIFEST_KEYS = {
    "id", "domain", "image_features", "image_pixels",
    "caption_tokens", "geo_tags", "segments",
}

_TAG_KEYS = ("landuse", "building", "natural", "leisure", "waterway", "highway")


@dataclass
class SegmentInput:
    """One image segment: area fraction plus a feature vector or pixel crop."""

    area: float
    feature: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.area <= 1.0:
            raise ValueError(f"segment area {self.area} outside [0, 1]")
        self.feature = np.asarray(self.feature, dtype=np.float64)


@dataclass
class PairRecord:
    """One image-text pair with geo-tags and segment inputs."""

    id: str
    domain: str
    caption_tokens: list[int]
    geo_tags: list[str]
    segments: list[SegmentInput]
    image_features: np.ndarray | None = None
    image_pixels: np.ndarray | None = None

    def __post_init__(self):
        has_feat = self.image_features is not None
        has_pix = self.image_pixels is not None
        if has_feat and has_pix:
            raise MixedImageRepresentation(f"record '{self.id}' carries both image forms")
        if not (has_feat or has_pix):
            raise ValueError(f"record '{self.id}' has no image representation")
        if len(self.caption_tokens) == 0:
            raise ValueError(f"record '{self.id}' has empty caption_tokens")
        if has_feat:
            self.image_features = np.asarray(self.image_features, dtype=np.float64)
        if has_pix:
            self.image_pixels = np.asarray(self.image_pixels, dtype=np.float64)

    def to_json_dict(self) -> dict:
        out = {"id": self.id, "domain": self.domain}
        if self.image_features is not None:
            out["image_features"] = self.image_features.tolist()
        else:
            out["image_pixels"] = self.image_pixels.tolist()
        out["caption_tokens"] = list(self.caption_tokens)
        out["geo_tags"] = list(self.geo_tags)
        out["segments"] = [
            {"area": float(s.area), "feature": s.feature.tolist()} for s in self.segments
        ]
        return out


@dataclass
class SplitSpec:
    """Train/val/test ratios plus the shuffle seed."""

    train: float
    val: float
    test: float
    seed: int = 0

    def __post_init__(self):
        for name in ("train", "val", "test"):
            if getattr(self, name) <= 0:
                raise ValueError(f"split ratio '{name}' must be positive")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")


@dataclass
class SyntheticCorpusConfig:
    """Controls for the two-domain synthetic corpus."""

    n_pairs: int = 512
    feature_dim: int = 32
    n_concepts: int = 48
    domain_shift_strength: float = 1.0
    segments_min: int = 3
    segments_max: int = 8
    tag_vocab: int = 24
    seed: int = 0
    noise_scale: float = 0.25

    def __post_init__(self):
        for name in ("n_pairs", "feature_dim", "n_concepts", "segments_min",
                     "segments_max", "tag_vocab"):
            if getattr(self, name) <= 0:
                raise ValueError(f"'{name}' must be positive")
        if self.segments_max < self.segments_min:
            raise ValueError("segments_max < segments_min")
        if self.domain_shift_strength < 0:
            raise ValueError("domain_shift_strength must be >= 0")


def caption_vocab_size(n_concepts: int) -> int:
    """Smallest encoder vocabulary that covers generated captions."""
    return CAPTION_TOKEN_BASE + n_concepts * TEMPLATE_LEN + 2 * DETAIL_SLOTS


# --- manifest IO -----------------------------------------------------------

def _parse_segments(raw, line: int, feat_dim: list) -> list[SegmentInput]:
    if not isinstance(raw, list):
        raise MalformedRecord(line, "segments", "expected a list")
    out = []
    for entry in raw:
        if not isinstance(entry, dict) or set(entry) != {"area", "feature"}:
            raise MalformedRecord(line, "segments", "expected {'area', 'feature'} objects")
        area = entry["area"]
        if not isinstance(area, (int, float)) or not 0.0 <= area <= 1.0:
            raise MalformedRecord(line, "segments", f"area {area} outside [0, 1]")
        feature = entry["feature"]
        if not isinstance(feature, list) or not feature:
            raise MalformedRecord(line, "segments", "feature must be a non-empty list")
        if feat_dim[0] is None:
            feat_dim[0] = len(feature)
        elif len(feature) != feat_dim[0]:
            raise MalformedRecord(
                line, "segments",
                f"feature dim {len(feature)} != manifest dim {feat_dim[0]}")
        out.append(SegmentInput(area=float(area), feature=np.array(feature, dtype=np.float64)))
    return out


def load_manifest(path) -> list[PairRecord]:
    """Load and validate a JSON-lines manifest.

    Raises MalformedRecord / DuplicateId / MixedImageRepresentation with the
    offending line number where applicable.
    """
    records: list[PairRecord] = []
    seen_ids: set[str] = set()
    seg_dim = [None]
    img_dim = [None]
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw_line in enumerate(fh, start=1):
            if not raw_line.strip():
                continue
            try:
                obj = json.loads(raw_line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, "<json>", str(exc)) from exc
            if not isinstance(obj, dict):
                raise MalformedRecord(lineno, "<json>", "record is not an object")
            unknown = set(obj) - _MANIFEST_KEYS
            if unknown:
                raise MalformedRecord(lineno, sorted(unknown)[0], "unknown key")
            for key in ("id", "domain", "caption_tokens", "geo_tags", "segments"):
                if key not in obj:
                    raise MalformedRecord(lineno, key, "missing")
            if "image_features" in obj and "image_pixels" in obj:
                raise MixedImageRepresentation(f"line {lineno}: both image forms present")
            if "image_features" not in obj and "image_pixels" not in obj:
                raise MalformedRecord(lineno, "image_features", "no image representation")
            if not isinstance(obj["id"], str) or not obj["id"]:
                raise MalformedRecord(lineno, "id", "must be a non-empty string")
            if obj["id"] in seen_ids:
                raise DuplicateId(obj["id"])
            if not isinstance(obj["domain"], str) or not obj["domain"]:
                raise MalformedRecord(lineno, "domain", "must be a non-empty string")
            tokens = obj["caption_tokens"]
            if (not isinstance(tokens, list) or not tokens
                    or not all(isinstance(t, int) and t >= 0 for t in tokens)):
                raise MalformedRecord(lineno, "caption_tokens",
                                      "must be a non-empty list of non-negative ints")
            tags = obj["geo_tags"]
            if not isinstance(tags, list) or not all(isinstance(t, str) for t in tags):
                raise MalformedRecord(lineno, "geo_tags", "must be a list of strings")

            image_features = None
            image_pixels = None
            if "image_features" in obj:
                feats = obj["image_features"]
                if not isinstance(feats, list) or not feats:
                    raise MalformedRecord(lineno, "image_features", "must be a non-empty list")
                if img_dim[0] is None:
                    img_dim[0] = len(feats)
                elif len(feats) != img_dim[0]:
                    raise MalformedRecord(lineno, "image_features",
                                          f"dim {len(feats)} != manifest dim {img_dim[0]}")
                image_features = np.array(feats, dtype=np.float64)
            else:
                pixels = np.array(obj["image_pixels"], dtype=np.float64)
                if pixels.ndim != 3 or pixels.shape[2] != 3:
                    raise MalformedRecord(lineno, "image_pixels", "expected an HxWx3 grid")
                if pixels.min() < 0.0 or pixels.max() > 1.0:
                    raise MalformedRecord(lineno, "image_pixels", "values outside [0, 1]")
                image_pixels = pixels

            segments = _parse_segments(obj["segments"], lineno, seg_dim)
            records.append(PairRecord(
                id=obj["id"], domain=obj["domain"], caption_tokens=list(tokens),
                geo_tags=list(tags), segments=segments,
                image_features=image_features, image_pixels=image_pixels,
            ))
            seen_ids.add(obj["id"])
    return records


def save_manifest(records: list[PairRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict()) + "\n")


# --- splitting and batching -------------------------------------------------

def split_dataset(records: list[PairRecord], spec: SplitSpec):
    """Shuffle-then-slice partition into (train, val, test).

    Val and test take floor(N * ratio) records; the remainder goes to train.
    """
    if not records:
        raise EmptyCorpus("cannot split an empty record list")
    n = len(records)
    order = substream(spec.seed, "split").permutation(n)
    shuffled = [records[i] for i in order]
    n_val = math.floor(n * spec.val)
    n_test = math.floor(n * spec.test)
    n_train = n - n_val - n_test
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:]
    return train, val, test


def build_batches(records: list, batch_size: int, seed: int,
                  drop_last: bool = True) -> list[list]:
    """Deterministically shuffled consecutive batches.

    Training drops a final short batch (stable loss shapes); evaluation keeps
    it (`drop_last=False`) for complete coverage.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = substream(seed, "batching").permutation(len(records))
    shuffled = [records[i] for i in order]
    batches = [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]
    if drop_last and batches and len(batches[-1]) < batch_size:
        batches.pop()
    return batches


# --- synthetic corpus --------------------------------------------------------

def concept_prototypes(config: SyntheticCorpusConfig):
    """Latent structure behind the generator.

    Returns (protos_a, protos_b, prior_a, prior_b, distractor_basis). Domain B
    prototypes are domain A's translated by shift_strength along one fixed
    random direction; its concept prior mixes toward the reversal of A's.
    Distractor segments live in a subspace orthogonal to every prototype.
    """
    c = config.n_concepts
    dim = config.feature_dim
    n_distract = max(2, dim // 8)
    if dim - n_distract < 2:
        raise ValueError("feature_dim too small to reserve a distractor subspace")

    rng = substream(config.seed, "corpus", "latent")
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    concept_basis = basis[:, : dim - n_distract]
    distractor_basis = basis[:, dim - n_distract:]

    coeffs = rng.standard_normal((c, dim - n_distract))
    protos_a = coeffs @ concept_basis.T
    protos_a /= np.linalg.norm(protos_a, axis=1, keepdims=True)

    shift_dir = rng.standard_normal(dim)
    shift_dir /= np.linalg.norm(shift_dir)

    prior_a = 1.0 / (1.0 + np.arange(c) / 8.0)
    prior_a /= prior_a.sum()
    mix = min(1.0, config.domain_shift_strength)
    if mix == 0.0:  # identical domains, bit-exact
        protos_b = protos_a.copy()
        prior_b = prior_a.copy()
    else:
        protos_b = protos_a + config.domain_shift_strength * shift_dir
        prior_b = (1.0 - mix) * prior_a + mix * prior_a[::-1]
        prior_b /= prior_b.sum()
    return protos_a, protos_b, prior_a, prior_b, distractor_basis


def _caption_for(concept: int, n_concepts: int, noise: np.ndarray) -> list[int]:
    base = CAPTION_TOKEN_BASE + concept * TEMPLATE_LEN
    tokens = [base + j for j in range(TEMPLATE_LEN)]
    detail_base = CAPTION_TOKEN_BASE + TEMPLATE_LEN * n_concepts
    for j in range(DETAIL_SLOTS):
        tokens.append(detail_base + 2 * j + (1 if noise[j] > 0 else 0))
    return tokens


def _tags_for(concept: int, rng: np.random.Generator, vocab: int) -> list[str]:
    def tag(idx: int) -> str:
        return f"{_TAG_KEYS[idx % len(_TAG_KEYS)]}: v{idx}"

    tags = [tag(concept % vocab)]
    for _ in range(int(rng.integers(0, 3))):
        tags.append(tag(int((concept + 1 + rng.integers(0, vocab)) % vocab)))
    return tags


def _domain_records(domain: str, protos: np.ndarray, prior: np.ndarray,
                    distractor_basis: np.ndarray, config: SyntheticCorpusConfig,
                    rng: np.random.Generator) -> list[PairRecord]:
    records = []
    dim = config.feature_dim
    for i in range(config.n_pairs):
        concept = int(rng.choice(len(prior), p=prior))
        noise = rng.standard_normal(dim)
        image = protos[concept] + config.noise_scale * noise

        n_seg = int(rng.integers(config.segments_min, config.segments_max + 1))
        n_rel = max(1, int(round(n_seg * 0.6)))
        n_dis = n_seg - n_rel
        segments = []
        for _ in range(n_rel):
            feat = protos[concept] + 0.3 * rng.standard_normal(dim)
            feat /= np.linalg.norm(feat)
            segments.append(SegmentInput(area=float(rng.uniform(0.25, 0.6)), feature=feat))
        for _ in range(n_dis):
            feat = distractor_basis @ rng.standard_normal(distractor_basis.shape[1])
            feat /= np.linalg.norm(feat)
            segments.append(SegmentInput(area=float(rng.uniform(0.02, 0.15)), feature=feat))

        records.append(PairRecord(
            id=f"{domain}-{i:05d}",
            domain=domain,
            caption_tokens=_caption_for(concept, config.n_concepts, noise),
            geo_tags=_tags_for(concept, rng, config.tag_vocab),
            segments=segments,
            image_features=image,
        ))
    return records


def generate_synthetic_corpus(config: SyntheticCorpusConfig):
    """Generate (domain A records, domain B records), deterministic per seed."""
    protos_a, protos_b, prior_a, prior_b, distractor_basis = concept_prototypes(config)
    rng_a = substream(config.seed, "corpus", "domain-a")
    rng_b = substream(config.seed, "corpus", "domain-b")
    records_a = _domain_records("source-A", protos_a, prior_a, distractor_basis, config, rng_a)
    records_b = _domain_records("target-B", protos_b, prior_b, distractor_basis, config, rng_b)
    return records_a, records_b
