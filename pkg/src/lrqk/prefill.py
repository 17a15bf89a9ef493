"""Joint rank-r factorization of the prompt's query and key matrices.

Block coordinate descent on

    L = 1/2 ||Q K^T - A_Q A_K^T||_F^2
      + lambda_q/2 ||Q - A_Q B_Q||_F^2
      + lambda_k/2 ||K - A_K B_K||_F^2

with closed-form block minimizers, swept in the order B_Q, B_K, A_K, A_Q.
Every product is associated so that nothing of size l x l is ever formed;
the heaviest intermediate is l x max(d, r).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lrqk.errors import NonFiniteError
from lrqk.linalg import fro_norm_sq, gram, solve_spd, topk_indices

INIT_KINDS = ("randn", "top", "topcol")


@dataclass(frozen=True)
class InitStrategy:
    """How A_Q and A_K start out before the first sweep.

    randn:  standard normal entries drawn from `seed`.
    top:    columns of Q (resp. K) at the r dimensions with the largest
            columnwise L1 mass of that matrix.
    topcol: both factors take the same r columns, ranked by the combined
            Q+K column mass.
    """

    kind: str = "randn"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ValueError(f"init kind must be one of {INIT_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class PrefillConfig:
    rank: int = 32
    lambda_q: float = 1.0
    lambda_k: float = 1.0
    max_iter: int = 2
    tol: float = 1e-2
    init: InitStrategy = field(default_factory=InitStrategy)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.lambda_q < 0 or self.lambda_k < 0:
            raise ValueError("lambda_q and lambda_k must be >= 0")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.tol <= 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")


@dataclass
class LowRankFactors:
    """The four factors: A_* are l x r, B_* are r x d, shared r."""

    A_Q: np.ndarray
    A_K: np.ndarray
    B_Q: np.ndarray
    B_K: np.ndarray

    @property
    def rank(self) -> int:
        return self.A_Q.shape[1]

    def copy(self) -> "LowRankFactors":
        return LowRankFactors(
            self.A_Q.copy(), self.A_K.copy(), self.B_Q.copy(), self.B_K.copy()
        )


@dataclass(frozen=True)
class ImportanceScores:
    """Columnwise L1 mass of Q, of K, and their sum."""

    s_q: np.ndarray
    s_k: np.ndarray
    s_qk: np.ndarray


@dataclass
class PrefillRun:
    """Factorization output plus the per-sweep objective trajectory."""

    factors: LowRankFactors
    objective: list[float]
    sweeps: int
    converged: bool


def _check_shapes(Q: np.ndarray, K: np.ndarray) -> None:
    if Q.shape != K.shape:
        raise ValueError(f"Q and K must share a shape, got {Q.shape} vs {K.shape}")


def importance_scores(Q: np.ndarray, K: np.ndarray) -> ImportanceScores:
    """Per-dimension absolute column sums used by the top/topcol inits."""
    _check_shapes(Q, K)
    s_q = np.abs(Q).sum(axis=0)
    s_k = np.abs(K).sum(axis=0)
    return ImportanceScores(s_q=s_q, s_k=s_k, s_qk=s_q + s_k)


def init_factors(Q: np.ndarray, K: np.ndarray, cfg: PrefillConfig) -> LowRankFactors:
    """Initialize A_Q, A_K per the configured strategy; B factors start zero
    and are overwritten by the first sweep."""
    _check_shapes(Q, K)
    l, d = Q.shape
    r = cfg.rank
    if r > d:
        raise ValueError(f"rank {r} exceeds head dimension {d}")
    if cfg.init.kind == "randn":
        rng = np.random.default_rng(cfg.init.seed)
        A_Q = rng.standard_normal((l, r))
        A_K = rng.standard_normal((l, r))
    else:
        scores = importance_scores(Q, K)
        if cfg.init.kind == "top":
            A_Q = Q[:, topk_indices(scores.s_q, r)].copy()
            A_K = K[:, topk_indices(scores.s_k, r)].copy()
        else:  # topcol
            cols = topk_indices(scores.s_qk, r)
            A_Q = Q[:, cols].copy()
            A_K = K[:, cols].copy()
    return LowRankFactors(
        A_Q=A_Q, A_K=A_K, B_Q=np.zeros((r, d)), B_K=np.zeros((r, d))
    )


def lagrangian_value(
    Q: np.ndarray, K: np.ndarray, f: LowRankFactors, cfg: PrefillConfig
) -> float:
    """Objective value, evaluated without materializing Q K^T.

    ||QK^T - A_Q A_K^T||_F^2 expands into three trace terms over d x d and
    r x r Gram matrices, so the cost stays O(l d^2 + l r d).
    """
    GQ = gram(Q)
    GK = gram(K)
    cross = float(np.sum((Q.T @ f.A_Q) * (K.T @ f.A_K)))
    approx = float(np.sum(gram(f.A_Q) * gram(f.A_K)))
    # The expansion can round to a tiny negative once the residual is ~0.
    qk_term = max(float(np.sum(GQ * GK)) - 2.0 * cross + approx, 0.0)
    return 0.5 * qk_term + 0.5 * cfg.lambda_q * fro_norm_sq(
        Q - f.A_Q @ f.B_Q
    ) + 0.5 * cfg.lambda_k * fro_norm_sq(K - f.A_K @ f.B_K)


def update_B(A: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Least-squares B = (A^T A)^{-1} A^T X; residual orthogonal to A's columns."""
    return solve_spd(gram(A), X.T @ A).T


def update_AK(
    Q: np.ndarray, K: np.ndarray, f: LowRankFactors, cfg: PrefillConfig
) -> np.ndarray:
    """Closed-form A_K given the other three factors."""
    rhs = K @ (Q.T @ f.A_Q + cfg.lambda_k * f.B_K.T)
    M = gram(f.A_Q) + cfg.lambda_k * gram(f.B_K.T)
    return solve_spd(M, rhs)


def update_AQ(
    Q: np.ndarray, K: np.ndarray, f: LowRankFactors, cfg: PrefillConfig
) -> np.ndarray:
    """Closed-form A_Q given the other three factors."""
    rhs = Q @ (K.T @ f.A_K + cfg.lambda_q * f.B_Q.T)
    M = gram(f.A_K) + cfg.lambda_q * gram(f.B_Q.T)
    return solve_spd(M, rhs)


def _factor_delta(new: LowRankFactors, old: LowRankFactors) -> float:
    """Mean over the four factors of mean squared entrywise change."""
    total = 0.0
    for a, b in (
        (new.A_Q, old.A_Q),
        (new.A_K, old.A_K),
        (new.B_Q, old.B_Q),
        (new.B_K, old.B_K),
    ):
        total += fro_norm_sq(a - b) / a.size
    return total / 4.0


def prefill_run(Q: np.ndarray, K: np.ndarray, cfg: PrefillConfig) -> PrefillRun:
    """Run the alternating sweeps, recording the objective after each one.

    At least one full sweep always executes; afterwards the loop stops when
    the mean squared change across all four factors drops to `tol` or
    `max_iter` sweeps have run.
    """
    _check_shapes(Q, K)
    f = init_factors(Q, K, cfg)
    objective = [lagrangian_value(Q, K, f, cfg)]
    converged = False
    sweeps = 0
    for _ in range(cfg.max_iter):
        prev = f.copy()
        f.B_Q = update_B(f.A_Q, Q)
        f.B_K = update_B(f.A_K, K)
        f.A_K = update_AK(Q, K, f, cfg)
        f.A_Q = update_AQ(Q, K, f, cfg)
        sweeps += 1
        for name, m in (("A_Q", f.A_Q), ("A_K", f.A_K), ("B_Q", f.B_Q), ("B_K", f.B_K)):
            if not np.isfinite(m).all():
                raise NonFiniteError(f"factor {name} diverged at sweep {sweeps}")
        objective.append(lagrangian_value(Q, K, f, cfg))
        if _factor_delta(f, prev) <= cfg.tol:
            converged = True
            break
    return PrefillRun(factors=f, objective=objective, sweeps=sweeps, converged=converged)


def prefill_factorize(
    Q: np.ndarray, K: np.ndarray, cfg: PrefillConfig
) -> LowRankFactors:
    """Factor the prompt; see prefill_run for the trajectory-keeping variant."""
    return prefill_run(Q, K, cfg).factors


def _rel(num_sq: float, den_sq: float) -> float:
    if den_sq == 0.0:
        return 0.0 if num_sq == 0.0 else float("inf")
    return float(np.sqrt(num_sq / den_sq))


def factor_residuals(
    Q: np.ndarray, K: np.ndarray, f: LowRankFactors
) -> tuple[float, float, float]:
    """Relative reconstruction errors of Q, K, and Q K^T.

    The Q K^T term uses the same Gram-trace expansion as the objective, so
    nothing l x l is formed; values below ~1e-8 are rounding-limited.
    """
    rel_q = _rel(fro_norm_sq(Q - f.A_Q @ f.B_Q), fro_norm_sq(Q))
    rel_k = _rel(fro_norm_sq(K - f.A_K @ f.B_K), fro_norm_sq(K))
    den = float(np.sum(gram(Q) * gram(K)))
    cross = float(np.sum((Q.T @ f.A_Q) * (K.T @ f.A_K)))
    approx = float(np.sum(gram(f.A_Q) * gram(f.A_K)))
    rel_qk = _rel(max(den - 2.0 * cross + approx, 0.0), den)
    return rel_q, rel_k, rel_qk
