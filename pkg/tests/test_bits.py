import pytest

from aquakv import quantizer as q
from aquakv.errors import ConfigError


class TestNominalRates:
    def test_identity_is_sixteen(self):
        assert q.nominal_code_bits(None) == 16.0

    def test_uniform_includes_scale_and_zero_point(self):
        assert q.nominal_code_bits(q.UniformConfig(bits=2, group_size=64)) == 2.5
        assert q.nominal_code_bits(q.UniformConfig(bits=4, group_size=128)) == 4.25

    def test_vq_includes_scale_only(self):
        assert q.nominal_code_bits(q.VQConfig(d=2, n=16, group_size=1024)) == 2.015625
        assert q.nominal_code_bits(q.VQConfig(d=4, n=256, group_size=1024)) == 2.015625
        assert q.nominal_code_bits(q.VQConfig(d=2, n=64, group_size=1024)) == 3.015625


class TestEffectiveBits:
    def geometry(self):
        return dict(n_layers=28, n_tokens=8192, kv_channels=1024)

    def test_no_overheads_equals_nominal(self):
        spec = q.FootprintSpec(**self.geometry())
        cfg = q.VQConfig(d=2, n=16, group_size=1024)
        assert q.effective_bits(cfg, spec) == q.nominal_code_bits(cfg)

    def test_overhead_delta_matches_published_two_bit_gap(self):
        # the plain 2-bit VQ cache reports ~2.02 bits/value; adding sinks, a
        # 4-bit first layer and 32-bit predictors amortized over a
        # 256-sequence calibration batch lands ~0.07 bits higher (+-0.05)
        cfg = q.VQConfig(d=2, n=16, group_size=1024)
        base = q.effective_bits(cfg, q.FootprintSpec(**self.geometry()))
        assert base == pytest.approx(2.02, abs=0.01)
        loaded = q.effective_bits(
            cfg,
            q.FootprintSpec(
                **self.geometry(),
                sink_tokens=4,
                buffer_tokens=0,
                first_layer_bits=4,
                predictor_params=q.predictor_param_count(28, 1024),
                predictor_param_bits=32,
                amortize_sequences=256,
            ),
        )
        delta = loaded - base
        assert delta == pytest.approx(0.07, abs=0.05)

    def test_uniform_full_cache(self):
        cfg = q.UniformConfig(bits=2, group_size=64)
        spec = q.FootprintSpec(n_layers=28, n_tokens=131072, kv_channels=1024)
        assert q.effective_bits(cfg, spec) == 2.5

    def test_validation(self):
        with pytest.raises(ConfigError):
            q.FootprintSpec(n_layers=28, n_tokens=0, kv_channels=1024)
        with pytest.raises(ConfigError):
            q.FootprintSpec(n_layers=28, n_tokens=8, kv_channels=4, sink_tokens=9)
        with pytest.raises(ConfigError):
            q.cache_gigabytes(28, 1024, 0, 16.0)


class TestPredictorParams:
    def test_formula(self):
        c = 1024
        per_layer = (c * c + c) + (2 * c * c + c)
        assert q.predictor_param_count(28, c) == 27 * per_layer
