"""KV-trace exporter: hooks transformer checkpoints and writes KVT1 files."""

from .capture import ExportConfig, export_trace
from .kvt_writer import KVTWriter

__all__ = ["ExportConfig", "KVTWriter", "export_trace"]
