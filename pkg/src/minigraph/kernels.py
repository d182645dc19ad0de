"""Numeric kernels shared by tensors, operators, and the KV updater.

Two determinism rules are load-bearing for the rest of the package:

* ``det_matmul`` reduces over the inner dimension with an order that does
  not depend on the outer dimensions, so a row of a batched product is
  bit-identical no matter how large the batch is.
* Reductions over the batch dimension (``tree_sum``) use a balanced
  power-of-two pairwise tree. A tree over N rows decomposes exactly into
  sub-trees over aligned power-of-two shards plus a tree over the partials,
  which is what makes sharded gradient aggregation bitwise equal to the
  single-batch computation.
"""

from __future__ import annotations

import numpy as np


def det_matmul(a: np.ndarray, b: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Matrix product with a batch-size-independent reduction order."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    prod = a[:, :, None] * b[None, :, :]
    res = np.add.reduce(prod, axis=1)
    if out is not None:
        np.copyto(out, res)
        return out
    return res


def tree_sum(a: np.ndarray) -> np.ndarray:
    """Sum along axis 0 with a balanced pairwise tree.

    For power-of-two lengths the association is a perfect binary tree;
    otherwise the split point is the largest power of two below the length.
    """
    n = a.shape[0]
    if n == 1:
        return a[0].copy()
    half = 1 << (n - 1).bit_length() - 1
    return tree_sum(a[:half]) + tree_sum(a[half:])


def tree_outer(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Batch sum of per-sample outer products dy_i (x) x_i, tree-reduced."""
    return tree_sum(dy[:, :, None] * x[:, None, :])


def axpy_(alpha: float, x: np.ndarray, y: np.ndarray) -> None:
    """y <- y + alpha * x, with one rounding for the product and one for
    the add per element (the same float ops everywhere it is used)."""
    np.add(y, x * alpha, out=y)


def relu(x, out=None):
    return np.maximum(x, 0, out=out)


def sigmoid(x, out=None):
    res = 1.0 / (1.0 + np.exp(-x))
    if out is not None:
        np.copyto(out, res)
        return out
    return res


def softmax_rows(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """Numerically stable row softmax."""
    shifted = x - np.max(x, axis=1, keepdims=True)
    e = np.exp(shifted)
    res = e / np.sum(e, axis=1, keepdims=True)
    if out is not None:
        np.copyto(out, res)
        return out
    return res


def one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    idx = labels.astype(np.int64)
    oh = np.zeros((idx.shape[0], num_classes), dtype=dtype)
    oh[np.arange(idx.shape[0]), idx] = 1
    return oh


def cross_entropy_mean(probs: np.ndarray, labels: np.ndarray, eps: float = 1e-12) -> float:
    idx = labels.astype(np.int64)
    picked = probs[np.arange(idx.shape[0]), idx]
    return float(np.mean(-np.log(np.maximum(picked, eps))))
