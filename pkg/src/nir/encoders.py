"""Text and image encoders for the joint embedding space.

The text branch is: subword-averaged word embeddings -> multi-head
self-attention with a residual connection -> a point-wise two-layer
feed-forward map -> max pooling over the sequence axis -> l2
normalization.  There is no positional encoding and no masking, so the
encoder is permutation invariant over tokens by construction.

The image branch is a single linear projection of precomputed features
followed by l2 normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    LeafCache,
    Parameter,
    Tensor,
    add,
    concat_cols,
    constant,
    l2_normalize,
    l2_normalize_rows,
    matmul,
    max_pool_over_rows,
    relu,
    scale,
    softmax_rows,
    transpose,
)
from .textprep import EmbeddingTable, embed_sequence

__all__ = [
    "EncoderConfig",
    "AttentionMap",
    "TextEncoderParams",
    "ImageProjection",
    "xavier_uniform",
    "multi_head_attention",
    "point_wise_ffn",
    "encode_text",
    "encode_image",
    "encode_image_batch",
]


@dataclass(frozen=True)
class EncoderConfig:
    """Dimension settings for one text encoder.

    Defaults are the desk-scale setting used by the synthetic corpus;
    the production-scale counterpart raises heads to 6, key/value dims
    to 64, the hidden layer to 2048 and the joint dim to 1024.
    """

    embed_dim: int = 64  # word embedding width, also the attention model dim
    heads: int = 4
    key_dim: int = 16
    value_dim: int = 16
    hidden_dim: int = 128
    out_dim: int = 64  # joint embedding dim

    def validate(self):
        for name in ("embed_dim", "heads", "key_dim", "value_dim", "hidden_dim", "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass
class AttentionMap:
    """Per-head row-stochastic attention maps (each l x l)."""

    maps: list[np.ndarray] = field(default_factory=list)

    def averaged(self) -> np.ndarray:
        if not self.maps:
            return np.zeros((0, 0))
        return np.mean(np.stack(self.maps), axis=0)


def xavier_uniform(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    r = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-r, r, size=(rows, cols))


class TextEncoderParams:
    """Weights of one text encoder; parameter names carry `prefix`."""

    def __init__(self, prefix: str, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.prefix = prefix
        self.cfg = cfg
        w, h = cfg.embed_dim, cfg.heads
        self.wq = [
            Parameter(f"{prefix}.h{k}.wq", xavier_uniform(rng, w, cfg.key_dim)) for k in range(h)
        ]
        self.wk = [
            Parameter(f"{prefix}.h{k}.wk", xavier_uniform(rng, w, cfg.key_dim)) for k in range(h)
        ]
        self.wv = [
            Parameter(f"{prefix}.h{k}.wv", xavier_uniform(rng, w, cfg.value_dim)) for k in range(h)
        ]
        # Projecting the concatenated heads back to the embedding width
        # is what makes the residual connection well-typed.
        self.wo = Parameter(f"{prefix}.wo", xavier_uniform(rng, h * cfg.value_dim, w))
        self.w1 = Parameter(f"{prefix}.pw.w1", xavier_uniform(rng, w, cfg.hidden_dim))
        self.b1 = Parameter(f"{prefix}.pw.b1", np.zeros((1, cfg.hidden_dim)))
        self.w2 = Parameter(f"{prefix}.pw.w2", xavier_uniform(rng, cfg.hidden_dim, cfg.out_dim))
        self.b2 = Parameter(f"{prefix}.pw.b2", np.zeros((1, cfg.out_dim)))

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for k in range(self.cfg.heads):
            out.extend((self.wq[k], self.wk[k], self.wv[k]))
        out.extend((self.wo, self.w1, self.b1, self.w2, self.b2))
        return out


class ImageProjection:
    """Linear map from precomputed image features into the joint space."""

    def __init__(self, feature_dim: int, out_dim: int, rng: np.random.Generator):
        if feature_dim < 1 or out_dim < 1:
            raise ValueError("projection dims must be positive")
        self.feature_dim = feature_dim
        self.out_dim = out_dim
        self.theta = Parameter("img.proj", xavier_uniform(rng, feature_dim, out_dim))

    def parameters(self) -> list[Parameter]:
        return [self.theta]


def multi_head_attention(seq: Tensor, p: TextEncoderParams, ctx: LeafCache):
    """Multi-head scaled dot-product self-attention plus residual.

    Returns (l x embed_dim tensor, AttentionMap with one l x l map per
    head).
    """
    if seq.cols != p.cfg.embed_dim:
        raise ValueError(f"attention model dim {p.cfg.embed_dim} != input width {seq.cols}")
    inv_sqrt_dk = 1.0 / np.sqrt(p.cfg.key_dim)
    heads = []
    maps = []
    for k in range(p.cfg.heads):
        q = matmul(seq, ctx.leaf(p.wq[k]))
        key = matmul(seq, ctx.leaf(p.wk[k]))
        v = matmul(seq, ctx.leaf(p.wv[k]))
        m = softmax_rows(scale(matmul(q, transpose(key)), inv_sqrt_dk))
        maps.append(m.value.copy())
        heads.append(matmul(m, v))
    joined = heads[0] if len(heads) == 1 else concat_cols(heads)
    out = add(matmul(joined, ctx.leaf(p.wo)), seq)
    return out, AttentionMap(maps)


def point_wise_ffn(seq: Tensor, p: TextEncoderParams, ctx: LeafCache) -> Tensor:
    """Position-wise two-layer map applied to every row independently."""
    hidden = relu(add(matmul(seq, ctx.leaf(p.w1)), ctx.leaf(p.b1)))
    return add(matmul(hidden, ctx.leaf(p.w2)), ctx.leaf(p.b2))


def encode_text(table: EmbeddingTable, tokens, p: TextEncoderParams, ctx: LeafCache):
    """Encode a token sequence to a unit vector in the joint space.

    The empty sequence maps to the zero vector (gradient-silent) with
    an empty attention map.
    """
    tokens = list(tokens)
    if not tokens:
        return constant(np.zeros((1, p.cfg.out_dim))), AttentionMap([])
    if table.dim != p.cfg.embed_dim:
        raise ValueError(f"table dim {table.dim} != encoder embed dim {p.cfg.embed_dim}")
    seq = embed_sequence(table, tokens, ctx)
    attended, amap = multi_head_attention(seq, p, ctx)
    projected = point_wise_ffn(attended, p, ctx)
    pooled, _ = max_pool_over_rows(projected)
    return l2_normalize(pooled), amap


def encode_image(proj: ImageProjection, feature: np.ndarray, ctx: LeafCache) -> Tensor:
    """Encode one precomputed feature vector; zero features stay zero."""
    feature = np.asarray(feature, dtype=np.float64).reshape(1, proj.feature_dim)
    return l2_normalize(matmul(constant(feature), ctx.leaf(proj.theta)))


def encode_image_batch(proj: ImageProjection, features: np.ndarray, ctx: LeafCache) -> Tensor:
    """Encode a stack of feature vectors (n x feature_dim) in one graph node."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != proj.feature_dim:
        raise ValueError(f"expected (n, {proj.feature_dim}) features, got {features.shape}")
    return l2_normalize_rows(matmul(constant(features), ctx.leaf(proj.theta)))
