import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aquakv import quantizer as q
from aquakv.errors import ConfigError
from aquakv.linalg import explained_variance_ratio


def rng(seed=0):
    return np.random.default_rng(seed)


class TestPacking:
    @given(
        width=st.integers(1, 8),
        n=st.integers(0, 300),
        seed=st.integers(0, 2**31),
    )
    @settings(max_examples=60, deadline=None)
    def test_pack_unpack_lossless(self, width, n, seed):
        codes = rng(seed).integers(0, 2**width, size=n).astype(np.uint8)
        assert np.array_equal(q.unpack_codes(q.pack_codes(codes, width), width, n), codes)

    def test_width_validation(self):
        with pytest.raises(ConfigError):
            q.pack_codes(np.zeros(4, np.uint8), 9)


class TestRHT:
    def test_hand_computed_pair(self):
        # seed 1 draws the (+1, +1) diagonal for length 2, so the transform
        # is exactly (1/sqrt 2) [[1, 1], [1, -1]]
        assert np.array_equal(q._sign_diagonal(1, 2), [1.0, 1.0])
        out = q.rht_forward(np.array([1.0, 0.0], np.float32), seed=1)
        assert out == pytest.approx([0.7071, 0.7071], abs=1e-4)

    @pytest.mark.parametrize("g", [2, 8, 128, 1024])
    def test_roundtrip_and_isometry(self, g):
        x = rng(g).standard_normal((16, g)).astype(np.float32)
        y = q.rht_forward(x, seed=7)
        norms_in = np.linalg.norm(x, axis=1)
        norms_out = np.linalg.norm(y, axis=1)
        assert np.allclose(norms_out, norms_in, rtol=1e-5)
        back = q.rht_inverse(y, seed=7)
        assert np.allclose(back, x, rtol=1e-5, atol=1e-6)

    def test_non_power_of_two_rejected(self):
        with pytest.raises(ValueError, match="power of two"):
            q.rht_forward(np.zeros(12, np.float32), seed=0)

    def test_seed_changes_transform(self):
        x = rng(1).standard_normal(64).astype(np.float32)
        assert not np.allclose(q.rht_forward(x, 0), q.rht_forward(x, 1))


class TestCodebook:
    def test_one_bit_scalar_matches_analytic_optimum(self):
        # Lloyd-Max for 1 bit on a standard normal: +- sqrt(2/pi)
        cb = q.build_gaussian_codebook(1, 2, seed=0)
        target = math.sqrt(2 / math.pi)
        assert sorted(cb.points.ravel().tolist()) == pytest.approx(
            [-target, target], abs=0.01
        )

    @pytest.mark.parametrize("d,n", [(2, 16), (2, 64), (2, 256), (4, 256)])
    def test_supported_grids_are_negation_closed(self, d, n):
        cb = q.get_codebook(q.VQConfig(d=d, n=n))
        points = cb.points
        for c in points:
            dists = np.linalg.norm(points + c, axis=1)
            assert dists.min() <= 1e-6
        assert np.abs(points.mean(axis=0)).max() <= 1e-5

    def test_deterministic_given_seed(self):
        a = q.build_gaussian_codebook(2, 16, seed=3, n_samples=1 << 16, max_iters=30)
        b = q.build_gaussian_codebook(2, 16, seed=3, n_samples=1 << 16, max_iters=30)
        assert np.array_equal(a.points, b.points)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            q.build_gaussian_codebook(2, 1, seed=0)
        with pytest.raises(ConfigError):
            q.build_gaussian_codebook(2, 24, seed=0)
        with pytest.raises(ConfigError):
            q.build_gaussian_codebook(3, 16, seed=0)

    @given(seed=st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_nearest_matches_brute_force(self, seed):
        g = rng(seed)
        d = int(g.choice([1, 2, 4]))
        n = int(g.choice([2, 16, 64, 256]))
        points = g.standard_normal((n, d)).astype(np.float32)
        cb = q.Codebook(d=d, n=n, seed=0, points=points)
        sub = g.standard_normal((64, d)).astype(np.float32)
        got = cb.nearest(sub)
        # independent oracle: exhaustive float64 distances
        d64 = ((sub[:, None, :].astype(np.float64) - points[None].astype(np.float64)) ** 2).sum(2)
        best = d64.min(axis=1)
        chosen = d64[np.arange(len(sub)), got]
        assert np.all(chosen <= best * (1 + 1e-5) + 1e-9)
        # wherever the minimum is strict, the exact index must match
        runner_up = np.partition(d64, 1, axis=1)[:, 1]
        strict = runner_up > best * (1 + 1e-4) + 1e-7
        assert np.array_equal(got[strict], d64.argmin(axis=1)[strict])

    def test_exact_ties_take_the_lowest_index(self):
        points = np.array([[1.0, 0.0], [0.5, 0.5], [1.0, 0.0]], np.float32)
        cb = q.Codebook(d=2, n=3, seed=0, points=points)
        idx = cb.nearest(np.array([[1.0, 0.0]], np.float32))
        assert idx[0] == 0  # codeword 2 is identical but higher-indexed


class TestVQ:
    def test_zero_group_reconstructs_exactly_zero(self, vq2):
        X = np.zeros((3, 1024), dtype=np.float32)
        blk = q.vq_quantize(X, vq2)
        assert np.all(blk.scales == 0)
        assert np.array_equal(q.vq_dequantize(blk), X)

    def test_storage_accounting_two_bit(self, vq2):
        # 4 bits per 2-wide subvector plus one f16 scale per 1024 values
        assert q.nominal_code_bits(vq2) == 2 + 16 / 1024
        X = rng(0).standard_normal((4, 1024)).astype(np.float32)
        blk = q.vq_quantize(X, vq2)
        assert blk.code_bit_length() == 4 * 1024 * 2
        assert blk.stored_bits() == 4 * 1024 * 2 + 4 * 16

    def test_gaussian_evr_small_run(self, vq2):
        X = rng(11).standard_normal((256, 1024)).astype(np.float32)
        evr = explained_variance_ratio(X, q.vq_dequantize(q.vq_quantize(X, vq2)))
        assert 0.85 <= evr <= 0.93

    def test_alternate_two_bit_grid_beats_the_default(self, vq2):
        # d=4 n=256 spends the same 2 bits/value with a higher-dimensional grid
        cfg4 = q.VQConfig(d=4, n=256, group_size=1024, seed=0)
        assert cfg4.code_bits == vq2.code_bits == 2.0
        X = rng(12).standard_normal((256, 1024)).astype(np.float32)
        mse2 = float(((q.vq_dequantize(q.vq_quantize(X, vq2)) - X) ** 2).mean())
        mse4 = float(((q.vq_dequantize(q.vq_quantize(X, cfg4)) - X) ** 2).mean())
        assert mse4 < mse2

    def test_never_worse_than_uniform_at_equal_bits(self, vq2):
        # 2-bit VQ (2.016 bits/value) vs 2-bit uniform gs64 (2.5 bits/value)
        X = rng(13).standard_normal((1024, 1024)).astype(np.float32)
        mse_vq = float(((q.vq_dequantize(q.vq_quantize(X, vq2)) - X) ** 2).mean())
        ucfg = q.UniformConfig(bits=2, group_size=64)
        mse_u = float(((q.uniform_dequantize(q.uniform_quantize(X, ucfg)) - X) ** 2).mean())
        assert mse_vq < mse_u

    def test_short_group_pads_to_power_of_two(self, vq2):
        X = rng(14).standard_normal((8, 96)).astype(np.float32)  # pads to 128
        blk = q.vq_quantize(X, vq2)
        out = q.vq_dequantize(blk)
        assert out.shape == X.shape
        assert explained_variance_ratio(X, out) > 0.8

    def test_tiny_tail_falls_back_to_scalar(self):
        cfg = q.VQConfig(d=2, n=16, group_size=8, seed=0)
        X = rng(15).standard_normal((6, 9)).astype(np.float32)  # tail of length 1
        blk = q.vq_quantize(X, cfg)
        out = q.vq_dequantize(blk)
        assert out.shape == X.shape
        # tail column is scalar-quantized at 4 bits: still a sane reconstruction
        assert np.abs(out[:, 8] - X[:, 8]).max() < 0.4
        assert blk.code_bit_length() == 6 * (4 * 4 + 1 * 4)

    def test_tail_shorter_than_wide_subvectors(self):
        # d=4: a 2-wide tail pads to 2 < 4, so it cannot hold a subvector
        cfg = q.VQConfig(d=4, n=256, group_size=8, seed=0)
        X = rng(18).standard_normal((5, 10)).astype(np.float32)
        blk = q.vq_quantize(X, cfg)
        out = q.vq_dequantize(blk)
        assert out.shape == X.shape
        assert np.abs(out[:, 8:] - X[:, 8:]).max() < 0.6
        parsed, _ = q.QuantizedBlock.from_bytes(blk.to_bytes(), cfg)
        assert np.array_equal(q.vq_dequantize(parsed), out)

    def test_scale_independence(self, vq2):
        X = rng(16).standard_normal((4, 1024)).astype(np.float32)
        base = np.linalg.norm(q.vq_dequantize(q.vq_quantize(X, vq2)) - X)
        for alpha in (0.1, 10.0):
            Xa = (alpha * X).astype(np.float32)
            err = np.linalg.norm(q.vq_dequantize(q.vq_quantize(Xa, vq2)) - Xa)
            assert err == pytest.approx(alpha * base, rel=1e-2)

    def test_serialization_roundtrip(self, vq2):
        X = rng(17).standard_normal((5, 1024)).astype(np.float32)
        blk = q.vq_quantize(X, vq2)
        parsed, used = q.QuantizedBlock.from_bytes(blk.to_bytes(), vq2)
        assert used == len(blk.to_bytes())
        assert np.array_equal(q.vq_dequantize(parsed), q.vq_dequantize(blk))

    def test_grid_validation(self):
        with pytest.raises(ConfigError):
            q.VQConfig(d=2, n=32)
        with pytest.raises(ConfigError):
            q.VQConfig(d=3, n=16)
        with pytest.raises(ConfigError):
            q.VQConfig(d=2, n=16, group_size=17)  # d must divide group_size

    def test_preset_lookup(self):
        assert (q.vq_config_for_bits(2).d, q.vq_config_for_bits(2).n) == (2, 16)
        assert (q.vq_config_for_bits(3).d, q.vq_config_for_bits(3).n) == (2, 64)
        assert (q.vq_config_for_bits(4).d, q.vq_config_for_bits(4).n) == (2, 256)
        with pytest.raises(ConfigError):
            q.vq_config_for_bits(5)
