"""Dual image/text encoders built from explicit attention math.

Both towers share the same block: multi-head self-attention, a residual
connection, and post-residual layer normalization (no feed-forward sub-layer
unless `use_mlp` is switched on). The image tower reads either raw pixels
(patchify + linear projection + positional embeddings + a learnable CLS
token) or a precomputed feature vector (single linear projection). The text
tower reads token sequences bracketed by SOS/EOS markers and returns the
activation at the EOS position. Encoder outputs are L2-normalized so all
downstream similarity math is cosine geometry.

Everything runs in float64; parameters are drawn uniform(-1/sqrt(d),
1/sqrt(d)) from named seed sub-streams, so construction is bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .errors import DimensionMismatch, MissingEOS, NonDivisibleImage
from .seeding import substream

SOS_ID = 0
EOS_ID = 1
LAYER_NORM_EPS = 1e-5


@dataclass
class EncoderConfig:
    embed_dim: int = 32
    n_heads: int = 4
    n_layers: int = 2
    vocab_size: int = 256
    max_seq_len: int = 16
    patch_size: int = 4
    image_size: int = 16
    feature_dim: int | None = 32  # None switches the image tower to pixel mode
    use_mlp: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("embed_dim", "n_heads", "n_layers", "vocab_size",
                     "max_seq_len", "patch_size", "image_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"'{name}' must be positive")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.feature_dim is not None and self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.feature_dim is None and self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenSequence:
    """Token ids starting with SOS and terminated by a single trailing EOS."""

    ids: list[int]

    def __post_init__(self):
        self.ids = [int(t) for t in self.ids]
        if not self.ids or self.ids[0] != SOS_ID:
            raise ValueError("token sequence must start with the SOS id")
        if EOS_ID not in self.ids:
            raise MissingEOS("token sequence has no EOS id")
        if self.ids.count(EOS_ID) != 1 or self.ids[-1] != EOS_ID:
            raise MissingEOS("EOS must appear exactly once, as the final token")

    def __len__(self):
        return len(self.ids)


def wrap_tokens(raw_tokens) -> TokenSequence:
    """Bracket raw caption tokens with SOS/EOS."""
    if len(raw_tokens) == 0:
        raise ValueError("cannot wrap an empty caption")
    return TokenSequence([SOS_ID, *raw_tokens, EOS_ID])


# --- functional pieces ------------------------------------------------------

def softmax(v, dim: int = -1) -> torch.Tensor:
    """Max-subtracted softmax, stable for extreme logits."""
    if not torch.is_tensor(v):
        v = torch.as_tensor(v, dtype=torch.float64)
    shifted = v - v.max(dim=dim, keepdim=True).values
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=dim, keepdim=True)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor | None = None,
               beta: torch.Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> torch.Tensor:
    """Per-token normalization to mean 0 / variance 1, then optional affine."""
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    out = (x - mean) / torch.sqrt(var + eps)
    if gamma is not None:
        out = out * gamma + beta
    return out


def multi_head_self_attention(tokens: torch.Tensor, w_q: torch.Tensor,
                              w_k: torch.Tensor, w_v: torch.Tensor,
                              w_o: torch.Tensor, n_heads: int) -> torch.Tensor:
    """Attention over a (..., n, d) sequence.

    Q/K/V are single d x d projections sliced into heads; per-head scores are
    scaled by sqrt(d / n_heads), heads are concatenated and projected by w_o.
    Output shape equals input shape.
    """
    d = tokens.shape[-1]
    if d % n_heads != 0:
        raise DimensionMismatch(f"dim {d} not divisible by {n_heads} heads")
    head_dim = d // n_heads
    lead = tokens.shape[:-2]
    n = tokens.shape[-2]

    def split(x):
        return x.reshape(*lead, n, n_heads, head_dim).transpose(-3, -2)

    q = split(tokens @ w_q)
    k = split(tokens @ w_k)
    v = split(tokens @ w_v)
    scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
    attn = softmax(scores, dim=-1)
    out = (attn @ v).transpose(-3, -2).reshape(*lead, n, d)
    return out @ w_o


def patchify(image: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Split an HxWx3 image into row-major flattened p*p*3 patch vectors."""
    h, w = image.shape[0], image.shape[1]
    if h % patch_size != 0 or w % patch_size != 0:
        raise NonDivisibleImage(f"{h}x{w} image not divisible by patch {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = image.reshape(gh, patch_size, gw, patch_size, 3)
    patches = patches.permute(0, 2, 1, 3, 4)
    return patches.reshape(gh * gw, patch_size * patch_size * 3)


# --- modules ----------------------------------------------------------------

class EncoderBlock(nn.Module):
    """MSA + residual + post layer norm, optional feed-forward sub-layer."""

    def __init__(self, dim: int, n_heads: int, use_mlp: bool, init_rng):
        super().__init__()
        self.n_heads = n_heads
        self.use_mlp = use_mlp
        bound = 1.0 / math.sqrt(dim)

        def mat(shape):
            return nn.Parameter(torch.from_numpy(init_rng.uniform(-bound, bound, size=shape)))

        self.w_q = mat((dim, dim))
        self.w_k = mat((dim, dim))
        self.w_v = mat((dim, dim))
        self.w_o = mat((dim, dim))
        self.ln_gamma = nn.Parameter(torch.ones(dim, dtype=torch.float64))
        self.ln_beta = nn.Parameter(torch.zeros(dim, dtype=torch.float64))
        if use_mlp:
            hidden = 4 * dim
            self.mlp_w1 = mat((dim, hidden))
            self.mlp_b1 = nn.Parameter(torch.zeros(hidden, dtype=torch.float64))
            self.mlp_w2 = mat((hidden, dim))
            self.mlp_b2 = nn.Parameter(torch.zeros(dim, dtype=torch.float64))
            self.ln2_gamma = nn.Parameter(torch.ones(dim, dtype=torch.float64))
            self.ln2_beta = nn.Parameter(torch.zeros(dim, dtype=torch.float64))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        attended = multi_head_self_attention(
            tokens, self.w_q, self.w_k, self.w_v, self.w_o, self.n_heads)
        out = layer_norm(tokens + attended, self.ln_gamma, self.ln_beta)
        if self.use_mlp:
            hidden = torch.relu(out @ self.mlp_w1 + self.mlp_b1) @ self.mlp_w2 + self.mlp_b2
            out = layer_norm(out + hidden, self.ln2_gamma, self.ln2_beta)
        return out


class DualEncoder(nn.Module):
    """Image tower + text tower over a shared embedding dimension.

    The segment encoder is the image tower applied to segment features or
    crops (shared weights).
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        bound = 1.0 / math.sqrt(d)

        def mat(stream_name, shape):
            rng = substream(config.seed, "init", stream_name)
            return nn.Parameter(torch.from_numpy(rng.uniform(-bound, bound, size=shape)))

        if config.feature_dim is None:
            n_patches = (config.image_size // config.patch_size) ** 2
            patch_pixels = config.patch_size * config.patch_size * 3
            self.w_patch = mat("vision.patch", (patch_pixels, d))
            self.b_patch = nn.Parameter(torch.zeros(d, dtype=torch.float64))
            self.pos_image = mat("vision.pos", (n_patches + 1, d))
        else:
            self.w_feat = mat("vision.feat", (config.feature_dim, d))
            self.b_feat = nn.Parameter(torch.zeros(d, dtype=torch.float64))
            self.pos_image = mat("vision.pos", (2, d))
        self.cls_token = mat("vision.cls", (d,))

        self.token_embedding = mat("text.tokens", (config.vocab_size, d))
        self.pos_text = mat("text.pos", (config.max_seq_len, d))

        self.vision_blocks = nn.ModuleList(
            EncoderBlock(d, config.n_heads, config.use_mlp,
                         substream(config.seed, "init", f"vision.block{i}"))
            for i in range(config.n_layers))
        self.text_blocks = nn.ModuleList(
            EncoderBlock(d, config.n_heads, config.use_mlp,
                         substream(config.seed, "init", f"text.block{i}"))
            for i in range(config.n_layers))

    # --- image tower ---

    def embed_image_tokens(self, images: torch.Tensor) -> torch.Tensor:
        """Pre-block token sequences (B, n_tokens, d) with CLS prepended."""
        if self.config.feature_dim is not None:
            if images.ndim != 2 or images.shape[1] != self.config.feature_dim:
                raise DimensionMismatch(
                    f"expected (B, {self.config.feature_dim}) features, got {tuple(images.shape)}")
            tokens = (images @ self.w_feat + self.b_feat).unsqueeze(1)
        else:
            rows = [patchify(img, self.config.patch_size) for img in images]
            patches = torch.stack(rows)
            if patches.shape[1] + 1 > self.pos_image.shape[0]:
                raise NonDivisibleImage(
                    f"{patches.shape[1]} patches exceed the configured positional table")
            tokens = patches @ self.w_patch + self.b_patch
        cls = self.cls_token.expand(tokens.shape[0], 1, -1)
        seq = torch.cat([cls, tokens], dim=1)
        return seq + self.pos_image[: seq.shape[1]]

    def encode_images(self, images) -> torch.Tensor:
        """(B, d) unit-norm CLS activations."""
        if not torch.is_tensor(images):
            images = torch.as_tensor(np.asarray(images), dtype=torch.float64)
        seq = self.embed_image_tokens(images)
        for block in self.vision_blocks:
            seq = block(seq)
        cls = seq[:, 0, :]
        return cls / cls.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def encode_image(self, image) -> torch.Tensor:
        if not torch.is_tensor(image):
            image = torch.as_tensor(np.asarray(image), dtype=torch.float64)
        return self.encode_images(image.unsqueeze(0))[0]

    def encode_segments(self, features) -> torch.Tensor:
        """Segment embeddings via the shared image tower, (m, d) unit rows."""
        return self.encode_images(features)

    # --- text tower ---

    def _text_forward(self, ids: torch.Tensor) -> torch.Tensor:
        if int(ids.max()) >= self.config.vocab_size:
            raise DimensionMismatch(
                f"token id {int(ids.max())} outside vocab of {self.config.vocab_size}")
        if ids.shape[-1] > self.config.max_seq_len:
            raise DimensionMismatch(
                f"sequence length {ids.shape[-1]} exceeds max_seq_len {self.config.max_seq_len}")
        seq = self.token_embedding[ids] + self.pos_text[: ids.shape[-1]]
        for block in self.text_blocks:
            seq = block(seq)
        eos = seq[:, -1, :]  # EOS is the final token by TokenSequence invariant
        return eos / eos.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def encode_texts(self, sequences: list[TokenSequence]) -> torch.Tensor:
        """(B, d) unit-norm EOS activations; sequences may differ in length."""
        by_len: dict[int, list[int]] = {}
        for i, seq in enumerate(sequences):
            by_len.setdefault(len(seq), []).append(i)
        chunks = []
        positions = []
        for length in sorted(by_len):
            idxs = by_len[length]
            ids = torch.tensor([sequences[i].ids for i in idxs], dtype=torch.long)
            chunks.append(self._text_forward(ids))
            positions.extend(idxs)
        inverse = torch.argsort(torch.tensor(positions))
        return torch.cat(chunks)[inverse]

    def encode_text(self, sequence: TokenSequence) -> torch.Tensor:
        return self.encode_texts([sequence])[0]
