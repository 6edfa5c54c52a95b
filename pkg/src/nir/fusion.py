"""Fusing the four per-source text encodings into one article encoding.

The main fuser stacks the caption, body, headline and lead encodings
into a 4 x d matrix, runs one self-attention head over the four rows,
flattens the result row-major and feeds it through a two-layer map.
Baseline fusers (element-wise max, element-wise add, plain two-block
feed-forward) are selected by configuration.

`random_drop` is the training-time augmentation that hides a random
subset of sources: one source is always preserved, each other source
survives independently with probability 0.7.  A dropped source becomes
the empty string, which encodes to the zero vector, so dropping and
zeroing are the same operation by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    LeafCache,
    Parameter,
    Tensor,
    add,
    concat_rows,
    l2_normalize,
    matmul,
    max_pool_over_rows,
    mean_over_rows,
    relu,
    reshape,
    scale,
    softmax_rows,
    transpose,
)
from .encoders import xavier_uniform

__all__ = [
    "SOURCES",
    "FUSE_STRATEGIES",
    "FuserParams",
    "fuse",
    "DropMask",
    "random_drop",
    "apply_drop",
]

# Canonical source order; also the row order of the fused stack.
SOURCES = ("caption", "body", "headline", "lead")

FUSE_STRATEGIES = ("attention", "max", "add", "neural")


class FuserParams:
    """Weights of the source fuser (used by both the attention and the
    plain feed-forward strategies)."""

    def __init__(self, dim: int, key_dim: int, rng: np.random.Generator):
        if dim < 1 or key_dim < 1:
            raise ValueError("fuser dims must be positive")
        self.dim = dim
        self.key_dim = key_dim
        flat = 4 * dim
        self.wq = Parameter("fuser.wq", xavier_uniform(rng, dim, key_dim))
        self.wk = Parameter("fuser.wk", xavier_uniform(rng, dim, key_dim))
        self.wv = Parameter("fuser.wv", xavier_uniform(rng, dim, dim))
        self.l1 = Parameter("fuser.l1", xavier_uniform(rng, flat, flat))
        self.c1 = Parameter("fuser.c1", np.zeros((1, flat)))
        self.l2 = Parameter("fuser.l2", xavier_uniform(rng, flat, dim))
        self.c2 = Parameter("fuser.c2", np.zeros((1, dim)))

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.l1, self.c1, self.l2, self.c2]


def fuse(encodings, p: FuserParams, ctx: LeafCache, strategy: str = "attention"):
    """Combine the four source encodings (caption, body, headline, lead
    order) into one unit vector.

    Returns (encoding tensor, 4 x 4 attention map or None).  Missing
    sources must already be zero vectors.
    """
    encodings = list(encodings)
    if len(encodings) != len(SOURCES):
        raise ValueError(f"fuse expects {len(SOURCES)} encodings, got {len(encodings)}")
    for e in encodings:
        if e.value.shape != (1, p.dim):
            raise ValueError(f"fuse input shape {e.value.shape} != (1, {p.dim})")
    if strategy not in FUSE_STRATEGIES:
        raise ValueError(f"unknown fuse strategy {strategy!r}")
    stack = concat_rows(encodings)
    if strategy == "max":
        pooled, _ = max_pool_over_rows(stack)
        return l2_normalize(pooled), None
    if strategy == "add":
        summed = scale(mean_over_rows(stack), float(len(SOURCES)))
        return l2_normalize(summed), None
    if strategy == "neural":
        flat = reshape(stack, 1, 4 * p.dim)
        h1 = relu(add(matmul(flat, ctx.leaf(p.l1)), ctx.leaf(p.c1)))
        h2 = relu(add(matmul(h1, ctx.leaf(p.l2)), ctx.leaf(p.c2)))
        return l2_normalize(h2), None
    q = matmul(stack, ctx.leaf(p.wq))
    k = matmul(stack, ctx.leaf(p.wk))
    v = matmul(stack, ctx.leaf(p.wv))
    m = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / np.sqrt(p.key_dim)))
    attended = matmul(m, v)
    flat = reshape(attended, 1, 4 * p.dim)
    hidden = relu(add(matmul(flat, ctx.leaf(p.l1)), ctx.leaf(p.c1)))
    out = add(matmul(hidden, ctx.leaf(p.l2)), ctx.leaf(p.c2))
    return l2_normalize(out), m.value.copy()


@dataclass(frozen=True)
class DropMask:
    """Which sources survive one random_drop draw (canonical order)."""

    keep: tuple[bool, bool, bool, bool]
    preserved: int

    def __post_init__(self):
        if not self.keep[self.preserved]:
            raise ValueError("the preserved source must be kept")


def random_drop(rng: np.random.Generator, keep_prob: float = 0.7) -> DropMask:
    """Draw a drop mask: one uniformly chosen source is always kept,
    every other source survives independently with `keep_prob`."""
    preserved = int(rng.integers(0, len(SOURCES)))
    coins = rng.random(len(SOURCES) - 1)
    keep = []
    ci = 0
    for i in range(len(SOURCES)):
        if i == preserved:
            keep.append(True)
        else:
            keep.append(bool(coins[ci] < keep_prob))
            ci += 1
    return DropMask(tuple(keep), preserved)


def apply_drop(texts: dict[str, str], mask: DropMask) -> dict[str, str]:
    """Blank out dropped sources; dropped text becomes the empty string."""
    out = dict(texts)
    for i, src in enumerate(SOURCES):
        if not mask.keep[i]:
            out[src] = ""
    return out
