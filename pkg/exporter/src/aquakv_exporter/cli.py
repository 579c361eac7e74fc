"""Command line for trace export.

    aquakv-export export --model <id-or-path> --texts <file> \
        --seq-len 8192 --n-seq 256 --rope pre --stats --out trace.kvt

The output is a KVT1 file the compression engine accepts directly
(validate with ``aquakv inspect trace.kvt``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .capture import ExportConfig, export_trace


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="aquakv-export")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    p = sub.add_parser("export", help="capture a KV trace from a checkpoint")
    p.add_argument("--model", required=True, help="checkpoint id or local path")
    p.add_argument("--texts", required=True, help="file of documents, one per line")
    p.add_argument("--seq-len", dest="seq_len", type=int, default=8192)
    p.add_argument("--n-seq", dest="n_seq", type=int, default=256)
    p.add_argument("--rope", choices=("pre", "post"), default="pre")
    p.add_argument("--stats", action="store_true", help="accumulate attention scores")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    cfg = ExportConfig(
        model=args.model,
        texts=args.texts,
        seq_len=args.seq_len,
        n_sequences=args.n_seq,
        rope_mode="pre_rope" if args.rope == "pre" else "post_rope",
        with_stats=args.stats,
        out=args.out,
        seed=args.seed,
    )
    try:
        path = export_trace(cfg)
    except (ValueError, RuntimeError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"written": path, "sequences": cfg.n_sequences, "seq_len": cfg.seq_len}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
