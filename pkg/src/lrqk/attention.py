"""Exact softmax attention and selection-quality metrics.

Ground truth for everything the pipeline approximates. Attention over a
selected subset is exact over that subset by definition; the pipeline's
fidelity question is purely which subset gets selected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lrqk.linalg import topk_indices


@dataclass
class AttentionResult:
    output: np.ndarray
    weights: np.ndarray


def exact_attention(q: np.ndarray, K: np.ndarray, V: np.ndarray) -> AttentionResult:
    """Softmax(q K^T / sqrt(d)) V with max-subtraction for stability."""
    n, d = K.shape
    if n == 0:
        raise ValueError("exact_attention requires at least one key")
    if V.shape[0] != n:
        raise ValueError(f"K has {n} rows but V has {V.shape[0]}")
    logits = (q @ K.T).ravel() / np.sqrt(d)
    logits -= logits.max()
    w = np.exp(logits)
    w /= w.sum()
    return AttentionResult(output=w[None, :] @ V, weights=w)


def exact_topk(q: np.ndarray, K: np.ndarray, k: int) -> np.ndarray:
    """Top-k key indices by raw inner product (scaling never reorders)."""
    if K.shape[0] == 0:
        raise ValueError("exact_topk requires at least one key")
    return topk_indices((q @ K.T).ravel(), k)


def selection_recall(proxy, exact) -> float:
    """|proxy intersect exact| / |exact|."""
    exact = set(int(i) for i in exact)
    if not exact:
        raise ValueError("selection_recall undefined for an empty exact set")
    proxy = set(int(i) for i in proxy)
    return len(proxy & exact) / len(exact)
