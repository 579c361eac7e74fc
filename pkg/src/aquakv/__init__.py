"""KV-cache compression engine.

Per-layer linear predictors guess each layer's keys and values from the
previous layer's reconstructions; only the residual the predictor missed is
quantized, by either group-wise uniform quantization or randomized-Hadamard
vector quantization. The package also ships dependency probes, heavy-hitter
pruning, footprint accounting, a binary trace format, and a synthetic trace
generator so the whole pipeline runs without a GPU in the loop.
"""

from .calibration import CalibConfig, calibrate, holdout_report
from .errors import AquaKVError
from .kvcache import CacheConfig, CompressedKVCache, replay_trace
from .linalg import LinearMap, explained_variance_ratio, ridge_fit
from .predictor import LinearPredictor, PredictorSet, load_predictors, predict, save_predictors
from .probes import probe_matrix
from .pruning import PruneConfig, h2o_select, prune_then_compress
from .quantizer import (
    Codebook,
    FootprintSpec,
    QuantizedBlock,
    UniformConfig,
    VQConfig,
    build_gaussian_codebook,
    dequantize,
    effective_bits,
    quantize,
    rht_forward,
    rht_inverse,
)
from .trace_io import KVTrace, SynthConfig, TraceMeta, apply_rope, read_trace, synth_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "AquaKVError",
    "CacheConfig",
    "CalibConfig",
    "Codebook",
    "CompressedKVCache",
    "FootprintSpec",
    "KVTrace",
    "LinearMap",
    "LinearPredictor",
    "PredictorSet",
    "PruneConfig",
    "QuantizedBlock",
    "SynthConfig",
    "TraceMeta",
    "UniformConfig",
    "VQConfig",
    "apply_rope",
    "build_gaussian_codebook",
    "calibrate",
    "dequantize",
    "effective_bits",
    "explained_variance_ratio",
    "h2o_select",
    "holdout_report",
    "load_predictors",
    "predict",
    "probe_matrix",
    "prune_then_compress",
    "quantize",
    "read_trace",
    "replay_trace",
    "rht_forward",
    "rht_inverse",
    "ridge_fit",
    "save_predictors",
    "synth_trace",
    "write_trace",
]
