"""Tree-based wage inference for matched worker-firm panels."""

from twice.panel import ColumnSchema, Panel, SyntheticSpec, ingest_csv, simulate

__version__ = "0.1.0"

__all__ = ["ColumnSchema", "Panel", "SyntheticSpec", "ingest_csv", "simulate", "__version__"]
