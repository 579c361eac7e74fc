"""Command-line entry point.

Subcommands: synth, probe, calibrate, replay, bits, inspect. Every run that
produces numbers emits a JSON report with a schema version and the fully
resolved configuration, so re-running with ``--config <report.json>``
reproduces the outputs byte for byte (modulo the ``volatile`` field holding
timestamps and wall-clock rates).

Exit codes: 0 success, 2 usage error, 3 invalid configuration, 4 I/O
failure, 5 malformed or corrupt file, 6 other engine error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import struct
import sys

from . import calibration, kvcache, probes, pruning, quantizer, trace_io
from .errors import AquaKVError, ConfigError, FormatError
from .predictor import load_predictors, save_predictors
from .report import EvalReport, stamp

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_FORMAT = 5
EXIT_OTHER = 6

# layers, kv heads, head dim
GEOMETRIES = {
    "llama3.2-3b": (28, 8, 128),
    "llama3.1-8b": (32, 8, 128),
    "llama3.1-70b": (80, 8, 128),
    "qwen2.5-3b": (36, 2, 128),
    "qwen2.5-7b": (28, 4, 128),
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        _merge_config_file(args)
        return args.func(args)
    except ConfigError as exc:
        _error("config", exc)
        return EXIT_CONFIG
    except FormatError as exc:
        _error("format", exc)
        return EXIT_FORMAT
    except OSError as exc:
        _error("io", exc)
        return EXIT_IO
    except AquaKVError as exc:
        _error("engine", exc)
        return EXIT_OTHER


def _error(kind: str, exc: Exception) -> None:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)


def _merge_config_file(args) -> None:
    """Fill flags the user did not pass from --config (flat dict or report)."""
    path = getattr(args, "config", None)
    if not path:
        return
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    if "config" in data and "schema_version" in data:
        data = data["config"].get("cli", data["config"])
    for key, value in data.items():
        if hasattr(args, key) and key in getattr(args, "_at_default", set()):
            setattr(args, key, value)


class _TrackedParser(argparse.ArgumentParser):
    """Records which destinations were left at their default after parsing."""

    def parse_args(self, argv=None, namespace=None):
        raw = list(argv) if argv is not None else sys.argv[1:]
        args = super().parse_args(raw, namespace)
        at_default = set()
        for action in self._subcommand_actions(args):
            used = any(
                tok == opt or tok.startswith(opt + "=")
                for opt in action.option_strings
                for tok in raw
            )
            if not used:
                at_default.add(action.dest)
        args._at_default = at_default
        return args

    def _subcommand_actions(self, args):
        for action in self._actions:
            if isinstance(action, argparse._SubParsersAction):
                sub = action.choices.get(getattr(args, "subcommand", None))
                if sub is not None:
                    yield from sub._actions
            elif action.option_strings:
                yield action


def _build_parser() -> argparse.ArgumentParser:
    parser = _TrackedParser(prog="aquakv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic KV trace")
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--kv-heads", dest="kv_heads", type=int, default=4)
    p.add_argument("--head-dim", dest="head_dim", type=int, default=32)
    p.add_argument("--tokens", type=int, default=1024, help="tokens per sequence")
    p.add_argument("--seqs", type=int, default=6)
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--value-mix", dest="value_mix", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("probe", help="fit dependency probes and report EVR")
    p.add_argument("--trace")
    p.add_argument("--sources", default="prevL1,prevL2,prevL3,prevT1,crossrole")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    p.add_argument("--holdout-seqs", dest="holdout_seqs", type=int, default=None)
    p.add_argument("--out")
    p.add_argument("--csv", default=None, help="also write plot-ready CSV here")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("calibrate", help="train predictors on a trace")
    p.add_argument("--trace")
    p.add_argument("--out", help="predictor file to write")
    _backbone_flags(p)
    p.add_argument("--sinks", type=int, default=4)
    p.add_argument("--first-layer-bits", dest="first_layer_bits", type=int, default=4)
    p.add_argument(
        "--first-layer-uncompressed", dest="first_layer_uncompressed",
        action="store_true", help="store layer 0 unquantized instead of at --first-layer-bits",
    )
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3)
    p.add_argument("--rope", choices=("pre", "post"), default="pre")
    p.add_argument("--holdout-seqs", dest="holdout_seqs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None, help="holdout report JSON path")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("replay", help="stream a trace through the compressed cache")
    p.add_argument("--trace")
    p.add_argument("--predictors", default=None)
    _backbone_flags(p)
    p.add_argument("--buffer", type=int, default=128)
    p.add_argument("--sinks", type=int, default=4)
    p.add_argument("--first-layer-bits", dest="first_layer_bits", type=int, default=4)
    p.add_argument(
        "--first-layer-uncompressed", dest="first_layer_uncompressed",
        action="store_true", help="store layer 0 unquantized instead of at --first-layer-bits",
    )
    p.add_argument("--chunk", type=int, default=128)
    p.add_argument("--prune-budget", dest="prune_budget", type=float, default=None)
    p.add_argument("--prune-recent", dest="prune_recent", type=float, default=None)
    p.add_argument("--report")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("bits", help="effective bits/value and footprint accounting")
    p.add_argument("--geometry", choices=sorted(GEOMETRIES), default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--kv-heads", dest="kv_heads", type=int, default=None)
    p.add_argument("--head-dim", dest="head_dim", type=int, default=None)
    p.add_argument("--tokens", type=int, default=None)
    _backbone_flags(p, default_backbone="none")
    p.add_argument("--sinks", type=int, default=0)
    p.add_argument("--buffer", type=int, default=0)
    p.add_argument("--first-layer-bits", dest="first_layer_bits", type=int, default=None)
    p.add_argument("--predictors", action="store_true", help="include predictor parameters")
    p.add_argument("--amortize-seqs", dest="amortize_seqs", type=int, default=1)
    p.add_argument("--report", default=None)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_bits)

    p = sub.add_parser("inspect", help="dump any engine file header as JSON")
    p.add_argument("path")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_inspect)

    return parser


def _backbone_flags(p, default_backbone: str = "uniform") -> None:
    p.add_argument("--backbone", choices=("uniform", "vq", "none"), default=default_backbone)
    p.add_argument("--bits", type=int, default=2)
    p.add_argument("--group-size", dest="group_size", type=int, default=None)
    p.add_argument("--vq-d", dest="vq_d", type=int, default=None, help="override the grid preset")
    p.add_argument("--quant-seed", dest="quant_seed", type=int, default=0)


def _resolve_backbone(args) -> quantizer.BackboneConfig:
    if args.backbone == "none":
        return None
    if args.backbone == "uniform":
        gs = args.group_size if args.group_size is not None else 64
        return quantizer.UniformConfig(bits=args.bits, group_size=gs)
    gs = args.group_size if args.group_size is not None else 1024
    if args.vq_d is not None:
        if args.vq_d == 2 and args.bits in (2, 3, 4):
            n = {2: 16, 3: 64, 4: 256}[args.bits]
        elif args.vq_d == 4 and args.bits == 2:
            n = 256
        else:
            raise ConfigError(
                f"no supported grid for --vq-d {args.vq_d} at {args.bits} bits"
            )
        return quantizer.VQConfig(d=args.vq_d, n=n, group_size=gs, seed=args.quant_seed)
    return quantizer.vq_config_for_bits(args.bits, group_size=gs, seed=args.quant_seed)


def _backbone_cli_dict(args) -> dict:
    return {
        "backbone": args.backbone,
        "bits": args.bits,
        "group_size": args.group_size,
        "vq_d": args.vq_d,
        "quant_seed": args.quant_seed,
    }


def _write_report(report: EvalReport, path, cli_config: dict) -> None:
    report.config["cli"] = cli_config
    if path:
        report.write(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _require(args, *names) -> None:
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + m for m in missing)}")


def _cmd_synth(args) -> int:
    _require(args, "out")
    cfg = trace_io.SynthConfig(
        n_layers=args.layers,
        n_kv_heads=args.kv_heads,
        head_dim=args.head_dim,
        alpha=args.alpha,
        noise=args.noise,
        value_mix=args.value_mix,
        tokens_per_sequence=args.tokens,
        n_sequences=args.seqs,
        seed=args.seed,
    )
    trace = trace_io.synth_trace(cfg)
    trace_io.write_trace(trace, args.out)
    print(
        json.dumps(
            {
                "written": args.out,
                "layers": cfg.n_layers,
                "tokens": trace.meta.n_tokens,
                "kv_channels": cfg.kv_channels,
            }
        )
    )
    return 0


def _cmd_probe(args) -> int:
    _require(args, "trace", "out")
    trace = trace_io.read_trace(args.trace)
    report = probes.probe_matrix(
        trace,
        sources=[s for s in args.sources.split(",") if s],
        lam=args.lam,
        holdout_sequences=args.holdout_seqs,
    )
    _write_report(
        report,
        args.out,
        {"trace": args.trace, "sources": args.sources, "lam": args.lam,
         "holdout_seqs": args.holdout_seqs},
    )
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as f:
            f.write(probes.probe_csv(report))
    print(json.dumps({"report": args.out, "mean": report.results["mean"]}))
    return 0


def _calib_config(args) -> calibration.CalibConfig:
    return calibration.CalibConfig(
        backbone=_resolve_backbone(args),
        lam=args.lam,
        sink_tokens=args.sinks,
        first_layer_bits=args.first_layer_bits,
        first_layer_uncompressed=args.first_layer_uncompressed,
        rope_mode="pre_rope" if args.rope == "pre" else "post_rope",
        holdout_sequences=args.holdout_seqs,
        seed=args.seed,
    )


def _cmd_calibrate(args) -> int:
    _require(args, "trace", "out")
    cfg = _calib_config(args)
    with trace_io.TraceReader(args.trace) as reader:
        ps = calibration.calibrate(reader, cfg)
        report = calibration.holdout_report(ps, reader, cfg)
    save_predictors(ps, args.out)
    cli_config = {
        "trace": args.trace,
        "out": args.out,
        **_backbone_cli_dict(args),
        "sinks": args.sinks,
        "first_layer_bits": args.first_layer_bits,
        "lam": args.lam,
        "rope": args.rope,
        "holdout_seqs": args.holdout_seqs,
        "seed": args.seed,
    }
    _write_report(report, args.report, cli_config)
    print(
        json.dumps(
            {
                "predictors": args.out,
                "key_predictor_evr": report.results["mean"]["key_predictor_evr"],
                "value_predictor_evr": report.results["mean"]["value_predictor_evr"],
            }
        )
    )
    return 0


def _cmd_replay(args) -> int:
    _require(args, "trace", "report")
    trace = trace_io.read_trace(args.trace)
    predictors = load_predictors(args.predictors) if args.predictors else None
    cache_cfg = kvcache.CacheConfig(
        backbone=_resolve_backbone(args),
        sink_tokens=args.sinks,
        recent_buffer=args.buffer,
        first_layer_bits=args.first_layer_bits,
        first_layer_uncompressed=args.first_layer_uncompressed,
        predictors=predictors,
    )
    if args.prune_budget is not None:
        prune_cfg = pruning.PruneConfig(
            budget_fraction=args.prune_budget, recent_fraction=args.prune_recent
        )
        report = pruning.prune_then_compress(trace, prune_cfg, cache_cfg, args.chunk)
    else:
        report = kvcache.replay_trace(trace, cache_cfg, chunk_tokens=args.chunk)
    cli_config = {
        "trace": args.trace,
        "predictors": args.predictors,
        **_backbone_cli_dict(args),
        "buffer": args.buffer,
        "sinks": args.sinks,
        "first_layer_bits": args.first_layer_bits,
        "chunk": args.chunk,
        "prune_budget": args.prune_budget,
        "prune_recent": args.prune_recent,
    }
    _write_report(report, args.report, cli_config)
    print(
        json.dumps(
            {
                "report": args.report,
                "pooled_evr": report.results["pooled"]["evr"],
                "effective_bits": report.results["effective_bits"],
            }
        )
    )
    return 0


def _cmd_bits(args) -> int:
    _require(args, "tokens")
    if args.geometry:
        layers, kv_heads, head_dim = GEOMETRIES[args.geometry]
    else:
        if None in (args.layers, args.kv_heads, args.head_dim):
            raise ConfigError("give --geometry or all of --layers/--kv-heads/--head-dim")
        layers, kv_heads, head_dim = args.layers, args.kv_heads, args.head_dim
    channels = kv_heads * head_dim
    backbone = _resolve_backbone(args)
    if backbone is None and args.bits != 16:
        raise ConfigError("--backbone none models an uncompressed cache; use --bits 16")

    params = 0
    if args.predictors:
        params = quantizer.predictor_param_count(layers, channels)
    spec = quantizer.FootprintSpec(
        n_layers=layers,
        n_tokens=args.tokens,
        kv_channels=channels,
        sink_tokens=args.sinks,
        buffer_tokens=args.buffer,
        first_layer_bits=args.first_layer_bits,
        predictor_params=params,
        amortize_sequences=args.amortize_seqs,
    )
    bits = quantizer.effective_bits(backbone, spec)
    gb = quantizer.cache_gigabytes(layers, channels, args.tokens, bits)
    result = {
        "geometry": {"n_layers": layers, "n_kv_heads": kv_heads, "head_dim": head_dim},
        "tokens": args.tokens,
        "bits_per_value": bits,
        "total_gigabytes": gb,
        "backbone_bits_per_value": quantizer.nominal_code_bits(backbone),
    }
    report = EvalReport(
        kind="bits",
        config={
            "cli": {
                "geometry": args.geometry,
                "layers": layers,
                "kv_heads": kv_heads,
                "head_dim": head_dim,
                "tokens": args.tokens,
                **_backbone_cli_dict(args),
                "sinks": args.sinks,
                "buffer": args.buffer,
                "first_layer_bits": args.first_layer_bits,
                "predictors": args.predictors,
                "amortize_seqs": args.amortize_seqs,
            }
        },
        results=result,
        volatile={"generated_at": stamp()},
    )
    if args.report:
        report.write(args.report)
    print(json.dumps(result))
    return 0


def _cmd_inspect(args) -> int:
    with open(args.path, "rb") as f:
        magic = f.read(4)
    if magic == trace_io.MAGIC:
        with trace_io.TraceReader(args.path) as reader:
            info = {"format": "KVT1", "valid": True, "meta": reader.meta.to_dict()}
    elif magic == b"AQKV":
        ps = load_predictors(args.path)
        info = {
            "format": "AQKV",
            "valid": True,
            "geometry": {
                "n_layers": ps.n_layers,
                "n_kv_heads": ps.n_kv_heads,
                "head_dim": ps.head_dim,
            },
            "parameters": ps.param_count(),
            "content_hash": ps.content_hash(),
            "metadata": ps.metadata,
        }
    elif magic == kvcache.CACHE_MAGIC:
        with open(args.path, "rb") as f:
            raw = f.read()
        if hashlib.blake2b(raw[:-8], digest_size=8).digest() != raw[-8:]:
            raise FormatError("cache checksum mismatch")
        (hdr_len,) = struct.unpack("<I", raw[6:10])
        info = {
            "format": "AQKC",
            "valid": True,
            "header": json.loads(raw[10 : 10 + hdr_len].decode("utf-8")),
        }
    else:
        raise FormatError(f"unrecognized magic {magic!r}")
    print(json.dumps(info, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
