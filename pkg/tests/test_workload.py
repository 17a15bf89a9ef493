"""Generator, diagnostic, and trace-format tests."""

import struct

import numpy as np
import pytest

from lrqk.errors import CorruptTraceError, UnsupportedVersionError
from lrqk.workload import (
    SyntheticSpec,
    as_heads,
    gen_lowrank_qk,
    gen_recency_biased,
    load_trace,
    neighbor_attention_profile,
    save_trace,
    singular_spectrum,
)


def jacobi_svd_values(A, sweeps=60, tol=1e-14):
    """One-sided Jacobi: rotate column pairs until mutually orthogonal;
    singular values are the final column norms."""
    U = A.astype(float).copy()
    n = U.shape[1]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                a = U[:, p] @ U[:, p]
                b = U[:, q] @ U[:, q]
                c = U[:, p] @ U[:, q]
                off = max(off, abs(c) / np.sqrt(a * b + 1e-300))
                if abs(c) <= tol * np.sqrt(a * b):
                    continue
                zeta = (b - a) / (2.0 * c)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                cs = 1.0 / np.sqrt(1.0 + t * t)
                sn = cs * t
                up, uq = U[:, p].copy(), U[:, q].copy()
                U[:, p] = cs * up - sn * uq
                U[:, q] = sn * up + cs * uq
        if off <= tol:
            break
    return np.sort(np.linalg.norm(U, axis=0))[::-1]


class TestGenLowRankQK:
    def test_deterministic(self):
        spec = SyntheticSpec(l=12, d=6, r_true=3, seed=5)
        a = gen_lowrank_qk(spec)
        b = gen_lowrank_qk(spec)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_flat_spectrum_full_rank(self):
        spec = SyntheticSpec(l=10, d=4, r_true=4, decay=1.0, seed=0)
        Q, _, _ = gen_lowrank_qk(spec)
        np.testing.assert_allclose(singular_spectrum(Q), np.ones(4), atol=1e-10)

    def test_rank_one_rows_parallel(self):
        spec = SyntheticSpec(l=8, d=5, r_true=1, seed=1)
        Q, _, _ = gen_lowrank_qk(spec)
        # every 2x2 minor of a rank-1 matrix vanishes
        ref = Q[np.argmax(np.linalg.norm(Q, axis=1))]
        for row in Q:
            assert np.linalg.norm(np.outer(row, ref) - np.outer(ref, row)) <= 1e-10

    def test_spectrum_recovers_prescription(self):
        spec = SyntheticSpec(l=40, d=12, r_true=6, decay=0.7, seed=2)
        _, K, _ = gen_lowrank_qk(spec)
        sig = singular_spectrum(K)
        want = 0.7 ** np.arange(6)
        np.testing.assert_allclose(sig[:6], want, rtol=1e-8)
        assert (sig[6:] <= 1e-10).all()

    def test_scale_multiplies_spectrum(self):
        spec = SyntheticSpec(l=20, d=8, r_true=4, decay=0.8, seed=3, scale=50.0)
        Q, _, _ = gen_lowrank_qk(spec)
        np.testing.assert_allclose(
            singular_spectrum(Q)[:4], 50.0 * 0.8 ** np.arange(4), rtol=1e-8
        )

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            SyntheticSpec(l=4, d=8, r_true=5)
        with pytest.raises(ValueError):
            SyntheticSpec(l=4, d=8, r_true=2, decay=0.0)
        with pytest.raises(ValueError):
            SyntheticSpec(l=4, d=8, r_true=2, recency_strength=-1.0)


class TestGenRecencyBiased:
    def test_zero_strength_is_bitwise_identical(self):
        spec = SyntheticSpec(l=16, d=6, r_true=3, seed=4, recency_strength=0.0)
        a = gen_lowrank_qk(spec)
        b = gen_recency_biased(spec)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_deterministic(self):
        spec = SyntheticSpec(l=16, d=6, r_true=3, seed=4, recency_strength=2.0)
        a = gen_recency_biased(spec)
        b = gen_recency_biased(spec)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_strong_bias_peaks_at_current(self):
        spec = SyntheticSpec(l=64, d=16, r_true=4, seed=6, recency_strength=5.0)
        Q, K, _ = gen_recency_biased(spec)
        profile = neighbor_attention_profile(Q, K, window=8)
        assert int(np.argmax(profile)) == 7

    def test_only_keys_change(self):
        spec = SyntheticSpec(l=16, d=6, r_true=3, seed=7, recency_strength=3.0)
        Q0, K0, V0 = gen_lowrank_qk(spec)
        Q1, K1, V1 = gen_recency_biased(spec)
        assert np.array_equal(Q0, Q1) and np.array_equal(V0, V1)
        assert not np.array_equal(K0, K1)


class TestSingularSpectrum:
    def test_identity(self):
        np.testing.assert_allclose(singular_spectrum(np.eye(3)), [1.0, 1.0, 1.0])

    def test_rank_one_outer_product(self):
        u = np.array([3.0, 0.0, 4.0])
        v = np.array([1.0, 2.0])
        sig = singular_spectrum(np.outer(u, v))
        np.testing.assert_allclose(sig[0], np.linalg.norm(u) * np.linalg.norm(v))
        assert (sig[1:] <= 1e-12).all()

    def test_matches_jacobi_oracle(self):
        rng = np.random.default_rng(8)
        A = rng.standard_normal((8, 5))
        np.testing.assert_allclose(singular_spectrum(A), jacobi_svd_values(A), atol=1e-8)

    def test_energy_conservation(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            A = rng.standard_normal((7, 4))
            sig = singular_spectrum(A)
            assert (sig**2).sum() == pytest.approx(
                np.linalg.norm(A, "fro") ** 2, rel=1e-8
            )

    def test_nonincreasing(self):
        rng = np.random.default_rng(10)
        sig = singular_spectrum(rng.standard_normal((9, 6)))
        assert (np.diff(sig) <= 0).all()


class TestNeighborAttentionProfile:
    def test_uniform_logits_match_oracle(self):
        # identical keys give uniform softmax; each trailing weight at step t
        # is then 1/(t+1), averaged over all qualifying steps
        l, window = 20, 4
        Q = np.random.default_rng(11).standard_normal((l, 3))
        K = np.tile(np.array([[0.3, -0.2, 0.9]]), (l, 1))
        got = neighbor_attention_profile(Q, K, window)
        want = np.full(window, np.mean([1.0 / (t + 1) for t in range(window, l)]))
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_weights_sum_below_one(self):
        rng = np.random.default_rng(12)
        Q = rng.standard_normal((30, 5))
        K = rng.standard_normal((30, 5))
        profile = neighbor_attention_profile(Q, K, 6)
        assert 0.0 < profile.sum() <= 1.0 + 1e-12

    def test_window_too_large(self):
        rng = np.random.default_rng(13)
        Q = rng.standard_normal((8, 3))
        with pytest.raises(ValueError, match="window"):
            neighbor_attention_profile(Q, Q, 8)

    def test_default_window_is_16(self):
        import inspect

        from lrqk.workload import neighbor_attention_profile as fn

        assert inspect.signature(fn).parameters["window"].default == 16


class TestTraceIO:
    def test_round_trip_single_precision_exact(self, tmp_path):
        rng = np.random.default_rng(14)
        Q = rng.standard_normal((5, 3))
        K = rng.standard_normal((5, 3))
        V = rng.standard_normal((5, 3))
        path = tmp_path / "head.lrqk"
        save_trace(path, [("q", Q), ("k", K), ("v", V)])
        records = load_trace(path)
        assert [r.role for r in records] == ["q", "k", "v"]
        for rec, src in zip(records, (Q, K, V)):
            np.testing.assert_array_equal(
                rec.data, src.astype(np.float32).astype(np.float64)
            )

    def test_exact_byte_layout(self, tmp_path):
        path = tmp_path / "t.lrqk"
        M = np.array([[1.5, -2.0]])
        save_trace(path, [("k", M)])
        blob = path.read_bytes()
        assert blob[:4] == b"LRQK"
        assert struct.unpack_from("<H", blob, 4)[0] == 1
        tag, rows, cols = struct.unpack_from("<BII", blob, 6)
        assert (tag, rows, cols) == (1, 1, 2)
        np.testing.assert_array_equal(
            np.frombuffer(blob, dtype="<f4", offset=15), [1.5, -2.0]
        )
        assert len(blob) == 15 + 8

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.lrqk"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CorruptTraceError, match="magic"):
            load_trace(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "trunc.lrqk"
        save_trace(path, [("q", np.ones((2, 2)))])
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(CorruptTraceError, match="truncated"):
            load_trace(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "vers.lrqk"
        path.write_bytes(b"LRQK" + struct.pack("<H", 9))
        with pytest.raises(UnsupportedVersionError):
            load_trace(path)

    def test_bad_role_tag(self, tmp_path):
        path = tmp_path / "role.lrqk"
        path.write_bytes(b"LRQK" + struct.pack("<H", 1) + struct.pack("<BII", 7, 1, 1) + b"\x00" * 4)
        with pytest.raises(CorruptTraceError, match="role"):
            load_trace(path)

    def test_as_heads_grouping(self, tmp_path):
        rng = np.random.default_rng(15)
        tensors = []
        for _ in range(2):
            for role in ("q", "k", "v"):
                tensors.append((role, rng.standard_normal((4, 3))))
        path = tmp_path / "two.lrqk"
        save_trace(path, tensors)
        heads = as_heads(load_trace(path))
        assert len(heads) == 2
        assert all(m.shape == (4, 3) for trio in heads for m in trio)

    def test_as_heads_rejects_bad_pattern(self, tmp_path):
        path = tmp_path / "odd.lrqk"
        save_trace(path, [("q", np.ones((2, 2))), ("v", np.ones((2, 2))), ("k", np.ones((2, 2)))])
        with pytest.raises(CorruptTraceError, match="roles"):
            as_heads(load_trace(path))
