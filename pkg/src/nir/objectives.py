"""Ranking objectives over an in-batch similarity matrix.

S is N x N with S[i, j] the inner product of text encoding i and image
encoding j; the diagonal holds the true pairs.  Three losses are
offered:

* `loss_sum`  - hinge over every in-batch negative, both directions,
  summed (no batch averaging).
* `loss_max`  - hinge against only the hardest negative per anchor,
  both directions.
* `loss_hal`  - a smooth log-sum-exp weighting of all negatives plus a
  reward for the positive pair, averaged over the batch.

Each loss is one graph node with an analytic backward pass; the tests
check the gradients against central finite differences and the values
against brute-force enumeration.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .autodiff import NumericsError, Tensor, matmul, transpose

__all__ = [
    "sim_matrix",
    "loss_sum",
    "loss_max",
    "loss_hal",
    "inject_pair_noise",
]


def sim_matrix(text_encodings: Tensor, image_encodings: Tensor) -> Tensor:
    """All-pairs inner products: rows index texts, columns index images."""
    if text_encodings.rows != image_encodings.rows:
        raise NumericsError("text/image batch sizes differ")
    if text_encodings.rows < 2:
        raise NumericsError("in-batch objectives need at least 2 pairs")
    return matmul(text_encodings, transpose(image_encodings))


def _check_square(S: Tensor):
    if S.rows != S.cols or S.rows < 2:
        raise NumericsError(f"similarity matrix must be square with N >= 2, got {S.value.shape}")


def loss_sum(S: Tensor, margin: float = 0.2) -> Tensor:
    """Margin hinge summed over every in-batch negative, both directions."""
    _check_square(S)
    s = S.value
    n = s.shape[0]
    d = np.diag(s)
    row_viol = np.maximum(0.0, margin - d[:, None] + s)
    col_viol = np.maximum(0.0, margin - d[None, :] + s)
    off = ~np.eye(n, dtype=bool)
    value = row_viol[off].sum() + col_viol[off].sum()

    def bwd(g, S=S, row_viol=row_viol, col_viol=col_viol, off=off, n=n):
        g0 = g[0, 0]
        row_act = (row_viol > 0.0) & off
        col_act = (col_viol > 0.0) & off
        grad = row_act.astype(np.float64) + col_act
        idx = np.arange(n)
        grad[idx, idx] = -row_act.sum(axis=1) - col_act.sum(axis=0)
        S.grad += g0 * grad

    return Tensor([[value]], "loss_sum", (S,), bwd)


def loss_max(S: Tensor, margin: float = 0.2) -> Tensor:
    """Margin hinge against the hardest negative per anchor, both
    directions.  Ties pick the first (lowest-index) negative."""
    _check_square(S)
    s = S.value
    n = s.shape[0]
    d = np.diag(s)
    idx = np.arange(n)
    row_viol = np.maximum(0.0, margin - d[:, None] + s)
    col_viol = np.maximum(0.0, margin - d[None, :] + s)
    # Mask the diagonal below any possible violation so argmax never picks it.
    row_viol[idx, idx] = -1.0
    col_viol[idx, idx] = -1.0
    row_arg = np.argmax(row_viol, axis=1)
    col_arg = np.argmax(col_viol, axis=0)
    row_max = row_viol[idx, row_arg]
    col_max = col_viol[col_arg, idx]
    value = np.maximum(0.0, row_max).sum() + np.maximum(0.0, col_max).sum()

    def bwd(g, S=S, row_arg=row_arg, col_arg=col_arg, row_max=row_max, col_max=col_max, idx=idx):
        g0 = g[0, 0]
        grad = np.zeros_like(S.value)
        row_on = row_max > 0.0
        col_on = col_max > 0.0
        np.add.at(grad, (idx[row_on], row_arg[row_on]), g0)
        np.add.at(grad, (idx[row_on], idx[row_on]), -g0)
        np.add.at(grad, (col_arg[col_on], idx[col_on]), g0)
        np.add.at(grad, (idx[col_on], idx[col_on]), -g0)
        S.grad += grad

    return Tensor([[value]], "loss_max", (S,), bwd)


def _log1p_exp_rows(v: np.ndarray, off: np.ndarray):
    """Stable log(1 + sum_j exp(v[i, j])) over masked entries per row.

    Returns (per-row value, weight matrix exp(v) / (1 + sum exp(v)))."""
    masked = np.where(off, v, -np.inf)
    high = np.maximum(masked.max(axis=1, keepdims=True), 0.0)
    e = np.where(off, np.exp(masked - high), 0.0)
    z = np.exp(-high) + e.sum(axis=1, keepdims=True)
    out = (high + np.log(z)).ravel()
    weights = e / z
    return out, weights


def loss_hal(S: Tensor, alpha: float = 20.0, beta: float = 30.0, eps: float = 0.2) -> Tensor:
    """Smooth weighting of all negatives plus a positive-pair reward,
    averaged over the batch.  Requires 1 + beta * S_ii > 0."""
    _check_square(S)
    if alpha <= 0 or beta <= 0:
        raise NumericsError("hal needs positive alpha and beta")
    s = S.value
    n = s.shape[0]
    d = np.diag(s)
    reward_arg = 1.0 + beta * d
    if np.any(reward_arg <= 0.0):
        raise NumericsError("hal reward term requires beta * S_ii > -1")
    off = ~np.eye(n, dtype=bool)
    v = alpha * (s - eps)
    row_term, row_w = _log1p_exp_rows(v, off)  # anchors texts, negatives images
    col_term, col_w = _log1p_exp_rows(v.T, off)  # anchors images, negatives texts
    value = float(np.mean(row_term / alpha + col_term / alpha - np.log(reward_arg)))

    def bwd(g, S=S, row_w=row_w, col_w=col_w, reward_arg=reward_arg, beta=beta, n=n):
        g0 = g[0, 0] / n
        grad = row_w + col_w.T
        idx = np.arange(n)
        grad[idx, idx] = -beta / reward_arg
        S.grad += g0 * grad

    return Tensor([[value]], "loss_hal", (S,), bwd)


def inject_pair_noise(samples, p: float, rng: np.random.Generator):
    """Mislabel a random fraction of text-image pairs.

    Each sample independently keeps its texts but, with probability p,
    takes the image of another uniformly chosen sample.  Returns
    (new sample list, indices of the corrupted samples).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("noise fraction must be in [0, 1]")
    samples = list(samples)
    n = len(samples)
    if n < 2 or p == 0.0:
        return list(samples), []
    out = []
    flipped = []
    for i, rec in enumerate(samples):
        if rng.random() < p:
            j = int(rng.integers(0, n - 1))
            if j >= i:
                j += 1
            donor = samples[j]
            out.append(
                dataclasses.replace(rec, image_id=donor.image_id, image_url=donor.image_url)
            )
            flipped.append(i)
        else:
            out.append(rec)
    return out, flipped
