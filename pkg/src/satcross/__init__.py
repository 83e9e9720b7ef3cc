"""Cross-domain satellite image-text retrieval at desk scale.

Segment-aware contrastive pretraining of dual encoders, curriculum-based
source sampling, weighted adversarial fine-tuning, retrieval evaluation, and
geo-tag analytics, wired together behind one seeded CLI.
"""

__version__ = "0.1.0"

from .config import CANONICAL_DEFAULTS, RunConfig  # noqa: F401
