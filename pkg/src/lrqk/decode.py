"""Per-token compression of new query/key rows during autoregressive decode.

Each step solves, by alternating closed-form updates,

    L = 1/2 ||qh B_Q - q||^2 + 1/2 ||kh B_K - k||^2
      + lambda_1/2 (qh kh^T - q k^T)^2
      + lambda_2/2 ||qh A_Kres^T - q K_res^T||^2

for the compressed rows qh, kh (1 x r), where A_Kres / K_res are the
proxy and key rows currently resident in the fast tier. B_Q and B_K then
take one steepest-descent step with the exact quadratic-minimizing step
size, which drives the fresh reconstruction residual to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lrqk.linalg import fro_norm_sq, gram, solve_spd
from lrqk.prefill import LowRankFactors

# Below this relative size the line-search denominator counts as zero and
# the step is skipped (the update is already optimal).
ETA_DENOM_FLOOR = 1e-14


@dataclass(frozen=True)
class DecodeConfig:
    lambda_1: float = 1.0
    lambda_2: float = 1.0
    max_iter: int = 2
    tol: float = 1e-2

    def __post_init__(self):
        if self.lambda_1 < 0 or self.lambda_2 < 0:
            raise ValueError("lambda_1 and lambda_2 must be >= 0")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.tol <= 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")


@dataclass(frozen=True)
class TokenStep:
    """One decode token's projected rows, each 1 x d."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise ValueError("q, k, v must share the same 1 x d shape")


@dataclass
class CompressedToken:
    """Compressed query/key rows, each 1 x r."""

    q_hat: np.ndarray
    k_hat: np.ndarray


@dataclass
class DecodeWorkspace:
    """Intermediates of the last step: the q-side normal system, the B
    gradients, and the line-search step sizes."""

    m_lq: np.ndarray | None = None
    M_rq: np.ndarray | None = None
    grad_BQ: np.ndarray | None = None
    grad_BK: np.ndarray | None = None
    eta_Q: float = 0.0
    eta_K: float = 0.0


def khat_initial_guess(k: np.ndarray, B_K: np.ndarray) -> np.ndarray:
    """Least-squares fit of k in the row space of B_K (coupling term off)."""
    return solve_spd(gram(B_K.T), k @ B_K.T)


def update_qhat(
    step: TokenStep,
    comp: CompressedToken,
    f: LowRankFactors,
    A_K_resident: np.ndarray,
    K_resident: np.ndarray,
    cfg: DecodeConfig,
    ws: DecodeWorkspace,
) -> np.ndarray:
    """Closed-form minimizer over q_hat given the current k_hat."""
    if A_K_resident.shape[0] != K_resident.shape[0]:
        raise ValueError(
            f"resident proxy/key row counts differ: "
            f"{A_K_resident.shape[0]} vs {K_resident.shape[0]}"
        )
    q, k = step.q, step.k
    qk = (q @ k.T).item()
    m_lq = q @ f.B_Q.T + cfg.lambda_1 * qk * comp.k_hat
    M_rq = gram(f.B_Q.T) + cfg.lambda_1 * (comp.k_hat.T @ comp.k_hat)
    if A_K_resident.shape[0] > 0:
        m_lq = m_lq + cfg.lambda_2 * (q @ K_resident.T) @ A_K_resident
        M_rq = M_rq + cfg.lambda_2 * gram(A_K_resident)
    ws.m_lq = m_lq
    ws.M_rq = M_rq
    return solve_spd(M_rq, m_lq)


def update_khat(
    step: TokenStep, comp: CompressedToken, f: LowRankFactors, cfg: DecodeConfig
) -> np.ndarray:
    """Closed-form minimizer over k_hat given the current q_hat."""
    q, k = step.q, step.k
    qk = (q @ k.T).item()
    rhs = k @ f.B_K.T + cfg.lambda_1 * qk * comp.q_hat
    M = gram(f.B_K.T) + cfg.lambda_1 * (comp.q_hat.T @ comp.q_hat)
    return solve_spd(M, rhs)


def decode_compress(
    step: TokenStep,
    f: LowRankFactors,
    A_K_resident: np.ndarray,
    K_resident: np.ndarray,
    cfg: DecodeConfig,
) -> tuple[CompressedToken, DecodeWorkspace]:
    """Initial k_hat guess, then alternating q_hat / k_hat updates.

    Stops after max_iter rounds or once the mean squared change of the
    concatenated (q_hat, k_hat) row between rounds drops to tol.
    """
    ws = DecodeWorkspace()
    r = f.rank
    comp = CompressedToken(
        q_hat=np.zeros((1, r)), k_hat=khat_initial_guess(step.k, f.B_K)
    )
    prev = None
    for _ in range(cfg.max_iter):
        comp.q_hat = update_qhat(step, comp, f, A_K_resident, K_resident, cfg, ws)
        comp.k_hat = update_khat(step, comp, f, cfg)
        cur = np.concatenate([comp.q_hat, comp.k_hat], axis=1)
        if prev is not None and fro_norm_sq(cur - prev) / cur.size <= cfg.tol:
            break
        prev = cur
    return comp, ws


def _line_search_step(
    row_hat: np.ndarray, B: np.ndarray, target: np.ndarray
) -> tuple[np.ndarray, float]:
    """Gradient and exact step size for one B factor.

    grad = row_hat^T (row_hat B - target); eta minimizes the quadratic
    ||row_hat (B - eta grad) - target||^2 and is zeroed out when the
    denominator underflows relative to the numerator.
    """
    resid = row_hat @ B - target
    grad = row_hat.T @ resid
    s = row_hat @ grad
    denom = (s @ s.T).item()
    numer = (resid @ s.T).item()
    if denom <= ETA_DENOM_FLOOR * (1.0 + abs(numer)):
        return grad, 0.0
    return grad, numer / denom


def update_projections(
    step: TokenStep, comp: CompressedToken, f: LowRankFactors, ws: DecodeWorkspace
) -> LowRankFactors:
    """One exact line-search descent step on B_Q and B_K.

    Fills ws with the gradients and step sizes; A factors pass through
    untouched (new proxy rows are appended by the cache, not here).
    """
    ws.grad_BQ, ws.eta_Q = _line_search_step(comp.q_hat, f.B_Q, step.q)
    ws.grad_BK, ws.eta_K = _line_search_step(comp.k_hat, f.B_K, step.k)
    return LowRankFactors(
        A_Q=f.A_Q,
        A_K=f.A_K,
        B_Q=f.B_Q - ws.eta_Q * ws.grad_BQ,
        B_K=f.B_K - ws.eta_K * ws.grad_BK,
    )
