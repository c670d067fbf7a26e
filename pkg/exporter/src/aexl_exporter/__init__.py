"""Export per-exit logits from pretrained early-exit models to AEXL files.

Model code stays on the user's side: an adapter declares the exit/class
counts and yields batches of raw logits, and the exporter streams them into
the byte-exact AEXL layout that the analysis toolkit reads.
"""

from .adapters import ArrayAdapter, register_adapter, resolve_adapter
from .export import AEXL_HEADER_BYTES, ExportError, ExportJob, aexl_file_size, export

__version__ = "0.1.0"
