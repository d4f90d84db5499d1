"""Per-layer hidden-state export for pretrained encoders (ASACEMB1 files)."""

from . import testing
from .exporter import (
    MAGIC,
    ExportError,
    ExportManifest,
    ExportResult,
    encode_chars,
    export,
    header_dims,
    load_encoder,
    read_texts,
)

__all__ = [
    "MAGIC",
    "ExportError",
    "ExportManifest",
    "ExportResult",
    "encode_chars",
    "export",
    "header_dims",
    "load_encoder",
    "read_texts",
    "testing",
]
