"""Adapter exporting segmentation-model logits as pipeline tensor files."""

__version__ = "0.1.0"

from .export import ExportError, ExportSpec, export_logits, load_class_map, load_palette_names
from .vnf import write_vnf
