"""End-to-end lifecycle of one attention head.

Prefill factorizes the prompt's Q/K and seeds the tiered cache; every
decode step then compresses the incoming token, refreshes the projection
factors, scores the full proxy store, selects the resident window, pays
for cache misses, and runs exact attention over the selected original
rows. Reports carry cache counters plus per-step fidelity metrics against
full-history oracles.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from lrqk.attention import exact_attention, exact_topk, selection_recall
from lrqk.cache import (
    CacheStats,
    SelectionSet,
    TieredKVCache,
    append_token,
    fetch_and_merge,
    proxy_scores,
    select_active,
)
from lrqk.decode import DecodeConfig, TokenStep, decode_compress, update_projections
from lrqk.linalg import as_matrix, as_row
from lrqk.prefill import LowRankFactors, PrefillConfig, prefill_factorize


@dataclass(frozen=True)
class SessionConfig:
    prefill: PrefillConfig = field(default_factory=PrefillConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    k_budget: int = 2048
    lite_budget: int = 64

    def __post_init__(self):
        if self.k_budget < 1 or self.lite_budget < 1:
            raise ValueError("k_budget and lite_budget must be >= 1")


@dataclass
class StepReport:
    step: int
    selected_count: int
    miss_count: int
    recall_vs_exact: float
    output_err: float


@dataclass
class SimulationResult:
    reports: list[StepReport]
    stats: CacheStats
    session: "DecodeSession"


class DecodeSession:
    """State machine for one head: prefill once, then step tokens through."""

    def __init__(self, cfg: SessionConfig):
        self.cfg = cfg
        self.factors: LowRankFactors | None = None
        self.cache: TieredKVCache | None = None
        self.stats = CacheStats()
        self.last_selection: SelectionSet | None = None
        self.last_output: np.ndarray | None = None

    def prefill(self, Q, K, V) -> LowRankFactors:
        """Factor the prompt and seed the cache with all prompt tokens."""
        Q = as_matrix(Q, "Q")
        K = as_matrix(K, "K")
        V = as_matrix(V, "V")
        if not (Q.shape == K.shape == V.shape):
            raise ValueError("prompt Q, K, V must share one l x d shape")
        self.factors = prefill_factorize(Q, K, self.cfg.prefill)
        self.cache = TieredKVCache(
            dim=Q.shape[1],
            rank=self.cfg.prefill.rank,
            k_budget=self.cfg.k_budget,
            lite_budget=self.cfg.lite_budget,
        )
        self.cache.seed_prompt(K, V, self.factors.A_K)
        return self.factors

    def decode_step(self, q, k, v, compute_metrics: bool = True) -> StepReport:
        """Run one full decode step; see the module docstring for the order."""
        if self.factors is None or self.cache is None:
            raise RuntimeError("decode_step called before prefill")
        step = TokenStep(q=as_row(q, "q"), k=as_row(k, "k"), v=as_row(v, "v"))
        _, A_K_res, K_res = self.cache.resident_rows()
        comp, ws = decode_compress(step, self.factors, A_K_res, K_res, self.cfg.decode)
        self.factors = update_projections(step, comp, self.factors, ws)
        t = append_token(self.cache, step.k, step.v, comp.k_hat)
        scores = proxy_scores(comp.q_hat, self.cache.proxy_store)
        sel = select_active(scores, t, self.cfg.k_budget, self.cfg.lite_budget)
        K_sel, V_sel = fetch_and_merge(self.cache, sel, self.stats)
        result = exact_attention(step.q, K_sel, V_sel)
        self.last_selection = sel
        self.last_output = result.output

        _, miss_count, selected_count = self.stats.per_step[-1]
        if compute_metrics:
            recall, output_err = self._fidelity(step.q, sel, result.output, t)
        else:
            recall, output_err = math.nan, math.nan
        return StepReport(
            step=t,
            selected_count=selected_count,
            miss_count=miss_count,
            recall_vs_exact=recall,
            output_err=output_err,
        )

    def _fidelity(
        self, q: np.ndarray, sel: SelectionSet, output: np.ndarray, t: int
    ) -> tuple[float, float]:
        """Recall of the resident window against the exact top-k over full
        history, and relative error against full-history attention."""
        K_all, V_all = self.cache.full_history()
        exact_set = exact_topk(q, K_all, min(self.cfg.k_budget, t + 1))
        recall = selection_recall(sel.omega, exact_set)
        full = exact_attention(q, K_all, V_all)
        denom = float(np.linalg.norm(full.output))
        diff = float(np.linalg.norm(output - full.output))
        output_err = diff / denom if denom > 0 else (0.0 if diff == 0.0 else math.inf)
        return recall, output_err


def run_simulation(
    Q,
    K,
    V,
    prompt_len: int,
    cfg: SessionConfig,
    steps: int | None = None,
    compute_metrics: bool = True,
) -> SimulationResult:
    """Prefill on the first prompt_len rows, then decode the rest.

    `steps` caps how many post-prompt rows are consumed (default: all).
    """
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    V = as_matrix(V, "V")
    total = Q.shape[0]
    if not 1 <= prompt_len <= total:
        raise ValueError(f"prompt_len must be in [1, {total}], got {prompt_len}")
    available = total - prompt_len
    if steps is None:
        steps = available
    if steps > available:
        raise ValueError(f"{steps} decode steps requested, only {available} available")
    session = DecodeSession(cfg)
    session.prefill(Q[:prompt_len], K[:prompt_len], V[:prompt_len])
    reports = []
    for i in range(prompt_len, prompt_len + steps):
        reports.append(
            session.decode_step(Q[i], K[i], V[i], compute_metrics=compute_metrics)
        )
    return SimulationResult(reports=reports, stats=session.stats, session=session)


def write_report_csv(path, reports: list[StepReport]) -> None:
    """step,selected,miss,recall,output_err rows, one per decode step."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "selected", "miss", "recall", "output_err"])
        for r in reports:
            writer.writerow(
                [
                    r.step,
                    r.selected_count,
                    r.miss_count,
                    repr(r.recall_vs_exact),
                    repr(r.output_err),
                ]
            )


def summarize(result: SimulationResult, cfg: SessionConfig) -> dict:
    """Run-level summary with the configuration echoed back."""
    errs = [r.output_err for r in result.reports]
    recalls = [r.recall_vs_exact for r in result.reports]
    have_metrics = bool(errs) and not any(math.isnan(e) for e in errs)
    summary = {
        "steps": len(result.reports),
        "mean_miss_rate": (
            result.stats.c_miss / result.stats.c_total if result.stats.c_total else None
        ),
        "mean_recall": float(np.mean(recalls)) if have_metrics else None,
        "p50_output_err": float(np.percentile(errs, 50)) if have_metrics else None,
        "p95_output_err": float(np.percentile(errs, 95)) if have_metrics else None,
        "config": asdict(cfg),
    }
    return summary
