"""Minimal dense linear-algebra kernels used by every other module.

All matrices are float64, C-order, 2-D numpy arrays. Vectors that stand
for single tokens are 1 x d (or 1 x r) row matrices, matching the
row-vector algebra of the compression equations. Right-hand solves use
the convention X @ M = RHS for the same reason.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from lrqk.errors import NonFiniteError, SolveFailedError

# Relative scale of the diagonal jitter applied when an SPD factorization
# fails. Rank-1 Gram terms (e.g. from a single compressed row) make exact
# singularity a reachable state, not just a pathology.
JITTER_EPS = 1e-10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert input to a float64 C-order 2-D array.

    Raises NonFiniteError if any entry is NaN/Inf and ValueError for
    non-2-D input. This is the single construction gate for matrices
    entering the pipeline.
    """
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {out.shape}")
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{name} contains non-finite entries")
    return out


def as_row(a, name: str = "row") -> np.ndarray:
    """Like as_matrix but accepts 1-D input and returns a 1 x n row."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    out = as_matrix(arr, name)
    if out.shape[0] != 1:
        raise ValueError(f"{name} must be a single row, got shape {out.shape}")
    return out


def gram(A: np.ndarray) -> np.ndarray:
    """Return A^T A, exactly symmetric (upper triangle mirrored)."""
    if A.size == 0:
        raise ValueError("gram requires a nonempty matrix")
    G = A.T @ A
    iu = np.triu_indices(G.shape[0], k=1)
    G[iu[1], iu[0]] = G[iu]
    return G


def fro_norm_sq(A: np.ndarray) -> float:
    """Sum of squared entries (squared Frobenius norm)."""
    return float(np.sum(A * A))


def solve_spd(M: np.ndarray, RHS: np.ndarray) -> np.ndarray:
    """Solve X @ M = RHS for X, with M small symmetric positive (semi)definite.

    Cholesky first; if M is singular, retry once with diagonal jitter
    JITTER_EPS * (trace(M)/r + 1) added. Raises SolveFailedError if the
    jittered factorization still fails and NonFiniteError for non-finite
    inputs.
    """
    if not np.isfinite(M).all():
        raise NonFiniteError("solve_spd: M contains non-finite entries")
    if not np.isfinite(RHS).all():
        raise NonFiniteError("solve_spd: RHS contains non-finite entries")
    r = M.shape[0]
    if M.shape[1] != r:
        raise ValueError(f"M must be square, got {M.shape}")
    if RHS.shape[1] != r:
        raise ValueError(f"RHS has {RHS.shape[1]} cols, expected {r}")
    try:
        c, low = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        jitter = JITTER_EPS * (np.trace(M) / r + 1.0)
        try:
            c, low = scipy.linalg.cho_factor(
                M + jitter * np.eye(r), lower=True, check_finite=False
            )
        except np.linalg.LinAlgError as exc:
            raise SolveFailedError(
                f"SPD solve failed for {r}x{r} system even with jitter {jitter:g}"
            ) from exc
    # M symmetric: X M = RHS  <=>  M X^T = RHS^T.
    return scipy.linalg.cho_solve((c, low), RHS.T, check_finite=False).T


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ascending by index.

    Ties break toward the lower index. k larger than the score count
    returns every index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n = scores.shape[0]
    if k >= n:
        return np.arange(n)
    # Stable sort on negated scores keeps equal scores in index order.
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])
