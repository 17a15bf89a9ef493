"""Synthetic Q/K/V generators, diagnostic statistics, and trace file I/O.

Generators produce matrices with a prescribed singular spectrum (geometric
decay cut off at an exact rank) and, optionally, keys nudged toward nearby
future queries so that exact attention concentrates near the diagonal.
Diagnostics mirror the two observations the method rests on: fast singular
value decay and recency-biased attention.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from lrqk.errors import CorruptTraceError, UnsupportedVersionError
from lrqk.linalg import as_matrix

TRACE_MAGIC = b"LRQK"
TRACE_VERSION = 1
_ROLE_TO_TAG = {"q": 0, "k": 1, "v": 2}
_TAG_TO_ROLE = {v: k for k, v in _ROLE_TO_TAG.items()}

# exp(-40) ~ 4e-18: far below double rounding, so the recency kernel is
# truncated there.
_RECENCY_WINDOW = 40


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape and spectrum of one generated head."""

    l: int
    d: int
    r_true: int
    decay: float = 0.9
    recency_strength: float = 0.0
    seed: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.l < 1 or self.d < 1:
            raise ValueError("l and d must be >= 1")
        if not 1 <= self.r_true <= min(self.l, self.d):
            raise ValueError(
                f"r_true must lie in [1, min(l, d)] = [1, {min(self.l, self.d)}], "
                f"got {self.r_true}"
            )
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.recency_strength < 0:
            raise ValueError("recency_strength must be >= 0")
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")


@dataclass(frozen=True)
class TraceRecord:
    role: str
    data: np.ndarray


def _orthonormal_columns(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q


def gen_lowrank_qk(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Q, K with singular values exactly scale * decay**i for i < r_true,
    plus a standard-normal V. Deterministic under the seed."""
    rng = np.random.default_rng(spec.seed)
    sigma = spec.scale * spec.decay ** np.arange(spec.r_true)

    def draw() -> np.ndarray:
        U = _orthonormal_columns(rng, spec.l, spec.r_true)
        W = _orthonormal_columns(rng, spec.d, spec.r_true)
        return (U * sigma) @ W.T

    Q = draw()
    K = draw()
    V = rng.standard_normal((spec.l, spec.d))
    return Q, K, V


def gen_recency_biased(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Like gen_lowrank_qk, but each key additionally points toward the
    queries that will soon attend to it.

    Key i gains strength * exp(-(t - i)) * sqrt(d) * q_t / ||q_t||^2 for
    nearby future steps t, so the scaled logit q_t k_i^T / sqrt(d) picks up
    roughly strength * exp(-(t - i)). Strength zero returns the plain
    generator output bit for bit.
    """
    Q, K, V = gen_lowrank_qk(spec)
    s = spec.recency_strength
    if s == 0.0:
        return Q, K, V
    K = K.copy()
    scale = np.sqrt(spec.d)
    row_sq = np.sum(Q * Q, axis=1) + 1e-30
    Qn = Q / row_sq[:, None]
    for delta in range(min(spec.l - 1, _RECENCY_WINDOW) + 1):
        w = s * np.exp(-float(delta)) * scale
        K[: spec.l - delta] += w * Qn[delta:]
    return Q, K, V


def singular_spectrum(M: np.ndarray) -> np.ndarray:
    """Singular values in non-increasing order."""
    if M.size == 0:
        raise ValueError("singular_spectrum requires a nonempty matrix")
    return np.linalg.svd(M, compute_uv=False)


def neighbor_attention_profile(
    Q: np.ndarray, K: np.ndarray, window: int = 16
) -> np.ndarray:
    """Average causal attention weight on the trailing `window` positions.

    For each step t >= window the softmax over keys 0..t is computed and
    its last `window` weights extracted; the result is their mean over all
    such steps, ordered oldest offset first ("current" token last).
    """
    l, d = Q.shape
    if window < 1:
        raise ValueError("window must be >= 1")
    if window >= l:
        raise ValueError(
            f"window {window} too large for sequence length {l}; "
            "at least one step beyond the window is needed"
        )
    acc = np.zeros(window)
    scale = 1.0 / np.sqrt(d)
    for t in range(window, l):
        logits = (Q[t : t + 1] @ K[: t + 1].T).ravel() * scale
        logits -= logits.max()
        w = np.exp(logits)
        w /= w.sum()
        acc += w[-window:]
    return acc / (l - window)


def save_trace(path, tensors) -> None:
    """Write (role, matrix) pairs to the binary trace format.

    Layout: magic "LRQK", u16 version, then per tensor a u8 role tag
    (0=Q, 1=K, 2=V), u32 rows, u32 cols, and the row-major float32
    little-endian payload.
    """
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC)
        fh.write(struct.pack("<H", TRACE_VERSION))
        for role, data in tensors:
            tag = _ROLE_TO_TAG.get(str(role).lower())
            if tag is None:
                raise ValueError(f"unknown tensor role {role!r}; expected q/k/v")
            arr = as_matrix(data, f"{role} tensor")
            fh.write(struct.pack("<BII", tag, arr.shape[0], arr.shape[1]))
            fh.write(arr.astype("<f4").tobytes(order="C"))


def load_trace(path) -> list[TraceRecord]:
    """Read a trace file back; payloads come up as float64 matrices."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != TRACE_MAGIC:
        raise CorruptTraceError("bad magic: not a trace file")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != TRACE_VERSION:
        raise UnsupportedVersionError(
            f"trace version {version} not supported (expected {TRACE_VERSION})"
        )
    records = []
    off = 6
    while off < len(blob):
        if off + 9 > len(blob):
            raise CorruptTraceError("truncated record header")
        tag, rows, cols = struct.unpack_from("<BII", blob, off)
        off += 9
        if tag not in _TAG_TO_ROLE:
            raise CorruptTraceError(f"unknown role tag {tag}")
        nbytes = rows * cols * 4
        if off + nbytes > len(blob):
            raise CorruptTraceError("truncated payload")
        data = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=off)
        off += nbytes
        records.append(
            TraceRecord(
                role=_TAG_TO_ROLE[tag],
                data=data.astype(np.float64).reshape(rows, cols),
            )
        )
    return records


def as_heads(records: list[TraceRecord]) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Group records into per-head (Q, K, V) triples.

    The manifest is implicit: head count is the number of triples and
    sequence length the row count, both validated here.
    """
    if len(records) % 3 != 0:
        raise CorruptTraceError(f"expected q/k/v triples, got {len(records)} records")
    heads = []
    for i in range(0, len(records), 3):
        trio = records[i : i + 3]
        roles = [rec.role for rec in trio]
        if roles != ["q", "k", "v"]:
            raise CorruptTraceError(f"head {i // 3} has roles {roles}, expected q,k,v")
        shapes = {rec.data.shape for rec in trio}
        if len(shapes) != 1:
            raise CorruptTraceError(f"head {i // 3} mixes shapes {shapes}")
        heads.append((trio[0].data, trio[1].data, trio[2].data))
    return heads


def write_spectrum_csv(path, sigma: np.ndarray) -> None:
    """index,sigma rows, largest first."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "sigma"])
        for i, s in enumerate(sigma):
            writer.writerow([i, repr(float(s))])


def write_profile_csv(path, profile: np.ndarray) -> None:
    """offset,weight rows from -(window-1) up to 0 (the current token)."""
    window = profile.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["offset", "weight"])
        for j, w in enumerate(profile):
            writer.writerow([j - (window - 1), repr(float(w))])
