"""Two-tier KV store with hit/miss transfer accounting.

The slow tier is an append-only full-precision store of every key/value
row ever produced. The fast tier holds only the index set selected at the
previous step (top-scored "active" tokens plus a ring of the most recent
"lite" tokens). Selection runs on a compact, fully resident proxy store of
compressed key rows; only selected rows absent from the fast tier count as
transfers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from lrqk.linalg import topk_indices


class _RowStore:
    """Append-only stack of fixed-width rows with amortized growth."""

    def __init__(self, width: int):
        self.width = width
        self._buf = np.empty((16, width))
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def append(self, row: np.ndarray) -> None:
        if self._n == self._buf.shape[0]:
            grown = np.empty((2 * self._buf.shape[0], self.width))
            grown[: self._n] = self._buf
            self._buf = grown
        self._buf[self._n] = row
        self._n += 1

    def extend(self, rows: np.ndarray) -> None:
        for i in range(rows.shape[0]):
            self.append(rows[i])

    def view(self) -> np.ndarray:
        """Read-only window over all rows appended so far (no copy)."""
        v = self._buf[: self._n]
        v.flags.writeable = False
        return v

    def take(self, indices: np.ndarray) -> np.ndarray:
        return self._buf[: self._n][indices]


@dataclass
class SelectionSet:
    """Active (score-selected) and lite (recency) index sets, plus their union."""

    omega_k: np.ndarray
    omega_l: np.ndarray
    omega: np.ndarray


@dataclass
class CacheStats:
    """Cumulative transfer counters and the per-step trail behind them."""

    c_miss: int = 0
    c_total: int = 0
    per_step: list[tuple[int, int, int]] = field(default_factory=list)

    def record(self, step: int, miss_count: int, selected_count: int) -> None:
        self.c_miss += miss_count
        self.c_total += selected_count
        self.per_step.append((step, miss_count, selected_count))


def miss_rate(stats: CacheStats) -> float:
    """c_miss / c_total over everything recorded so far."""
    if stats.c_total == 0:
        raise ValueError("miss rate undefined: no selections recorded")
    return stats.c_miss / stats.c_total


class TieredKVCache:
    """One head's cache state across a decode stream.

    Key/value rows are d wide, proxy rows r wide. The fast tier is tracked
    as an index set only: the simulator measures transferred rows, not
    bytes or residency layout.
    """

    def __init__(self, dim: int, rank: int, k_budget: int, lite_budget: int):
        if k_budget < 1 or lite_budget < 1:
            raise ValueError("k_budget and lite_budget must be >= 1")
        self.dim = dim
        self.rank = rank
        self.k_budget = k_budget
        self.lite_budget = lite_budget
        self._slow_k = _RowStore(dim)
        self._slow_v = _RowStore(dim)
        self._proxy = _RowStore(rank)
        self.fast_resident: set[int] = set()

    @property
    def size(self) -> int:
        """Number of tokens in the slow tier (== full history length)."""
        return len(self._slow_k)

    @property
    def proxy_store(self) -> np.ndarray:
        """All compressed key rows, t x r; fully resident by design."""
        return self._proxy.view()

    def seed_prompt(self, K: np.ndarray, V: np.ndarray, A_K: np.ndarray) -> None:
        """Load all prompt rows into the slow tier and their compressed
        counterparts into the proxy store; the fast tier starts as the lite
        window over the last prompt tokens."""
        if not (K.shape[0] == V.shape[0] == A_K.shape[0]):
            raise ValueError("prompt K, V, and proxy row counts must match")
        self._slow_k.extend(K)
        self._slow_v.extend(V)
        self._proxy.extend(A_K)
        start = max(0, self.size - self.lite_budget)
        self.fast_resident = set(range(start, self.size))

    def resident_rows(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(indices, proxy rows, key rows) for the current fast tier,
        ascending by index. Reads are free: these rows are resident."""
        idx = np.array(sorted(self.fast_resident), dtype=np.intp)
        return idx, self._proxy.take(idx), self._slow_k.take(idx)

    def slow_rows(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Full-precision K/V rows at `indices`."""
        return self._slow_k.take(indices), self._slow_v.take(indices)

    def full_history(self) -> tuple[np.ndarray, np.ndarray]:
        """Every K/V row so far (slow tier is never evicted)."""
        return self._slow_k.view(), self._slow_v.view()


def proxy_scores(q_hat: np.ndarray, proxy_store: np.ndarray) -> np.ndarray:
    """Inner product of the compressed query with every stored proxy row.

    No softmax: only the ordering is consumed downstream.
    """
    return (proxy_store @ q_hat.T).ravel()


def select_active(
    scores: np.ndarray, t: int, k_budget: int, lite_budget: int
) -> SelectionSet:
    """Pick the resident window for step t from scores over tokens 0..t.

    The lite set is the most recent lite_budget indices (always including
    t); the active set is the top k_budget scores among the remaining
    candidates, ties toward the lower index. Indices already held as lite
    are excluded from top-k candidacy so the union has no duplicates.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.shape[0] != t + 1:
        raise ValueError(f"scores must cover tokens 0..{t}, got {scores.shape[0]}")
    lite_start = max(0, t + 1 - lite_budget)
    omega_l = np.arange(lite_start, t + 1, dtype=np.intp)
    candidates = np.arange(0, lite_start, dtype=np.intp)
    if candidates.size == 0:
        omega_k = candidates
    else:
        picked = topk_indices(scores[candidates], min(k_budget, candidates.size))
        omega_k = candidates[picked]
    omega = np.concatenate([omega_k, omega_l])
    return SelectionSet(omega_k=omega_k, omega_l=omega_l, omega=omega)


def fetch_and_merge(
    cache: TieredKVCache, sel: SelectionSet, stats: CacheStats
) -> tuple[np.ndarray, np.ndarray]:
    """Materialize K/V rows for the selection, counting slow-tier transfers.

    Rows already resident in the fast tier are hits; the rest are misses
    and counted as transfers. Afterwards the fast tier holds exactly the
    selected set. Rows come back in ascending index order.
    """
    if sel.omega.size:
        lo, hi = int(sel.omega.min()), int(sel.omega.max())
        if lo < 0 or hi >= cache.size:
            raise IndexError(
                f"selection references token {hi if hi >= cache.size else lo}, "
                f"valid range is 0..{cache.size - 1}"
            )
    selected = set(int(i) for i in sel.omega)
    miss = selected - cache.fast_resident
    stats.record(step=cache.size - 1, miss_count=len(miss), selected_count=len(selected))
    order = np.sort(sel.omega)
    K, V = cache.slow_rows(order)
    cache.fast_resident = selected
    return K, V


def append_token(
    cache: TieredKVCache, k: np.ndarray, v: np.ndarray, k_hat: np.ndarray
) -> int:
    """Append one token: K/V to the slow tier, its compressed key to the
    proxy store, and its index into the fast tier for the current step.

    The slow-tier write is synchronous; the simulator tracks transfer
    counts, not timing, and the row must be fetchable next step. Returns
    the new token's index.
    """
    t = cache.size
    cache._slow_k.append(np.asarray(k).ravel())
    cache._slow_v.append(np.asarray(v).ravel())
    cache._proxy.append(np.asarray(k_hat).ravel())
    cache.fast_resident.add(t)
    return t


def write_stats_csv(path, stats: CacheStats) -> None:
    """Per-step transfer counters: step,selected,miss,hit,miss_rate."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "selected", "miss", "hit", "miss_rate"])
        for step, miss, selected in stats.per_step:
            rate = miss / selected if selected else 0.0
            writer.writerow([step, selected, miss, selected - miss, repr(rate)])
