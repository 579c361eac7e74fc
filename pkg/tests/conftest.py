import numpy as np
import pytest

from aquakv import calibration, trace_io
from aquakv.quantizer import VQConfig


def make_trace(seed=0, **overrides) -> trace_io.KVTrace:
    return trace_io.synth_trace(trace_io.SynthConfig(seed=seed, **overrides))


def exact_linear_trace(
    seed=0, n_layers=4, n_kv_heads=2, head_dim=16, tokens=512, n_sequences=4
) -> trace_io.KVTrace:
    """Noiseless trace where layer i keys/values are exact linear maps of
    layer i-1 (keys) and of [values_{i-1}, keys_i] (values)."""
    rng = np.random.default_rng(seed)
    c = n_kv_heads * head_dim
    total = tokens * n_sequences
    keys = [rng.standard_normal((total, c)).astype(np.float32)]
    values = [rng.standard_normal((total, c)).astype(np.float32)]
    for _ in range(1, n_layers):
        a = (rng.standard_normal((c, c)) / np.sqrt(c)).astype(np.float32)
        b = (rng.standard_normal((2 * c, c)) / np.sqrt(2 * c)).astype(np.float32)
        k = keys[-1] @ a
        v = np.hstack([values[-1], k]) @ b
        keys.append(np.ascontiguousarray(k))
        values.append(np.ascontiguousarray(v))
    meta = trace_io.TraceMeta(
        n_layers=n_layers,
        n_kv_heads=n_kv_heads,
        head_dim=head_dim,
        sequence_lengths=[tokens] * n_sequences,
        source="exact-linear",
    )
    return trace_io.KVTrace(meta=meta, keys=keys, values=values)


@pytest.fixture(scope="session")
def frozen_trace() -> trace_io.KVTrace:
    """The default-config synthetic trace every cross-module test shares."""
    return make_trace(seed=0)


@pytest.fixture(scope="session")
def vq2() -> VQConfig:
    return VQConfig(d=2, n=16, group_size=1024, seed=0)


@pytest.fixture(scope="session")
def calib_vq2(vq2) -> calibration.CalibConfig:
    return calibration.CalibConfig(backbone=vq2)


@pytest.fixture(scope="session")
def frozen_predictors(frozen_trace, calib_vq2):
    """Predictors calibrated once on the frozen trace with the 2-bit backbone."""
    return calibration.calibrate(frozen_trace, calib_vq2)
