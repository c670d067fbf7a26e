"""Stream adapter batches into the byte-exact AEXL layout.

Layout (all little-endian): magic "AEXL", uint32 version 1, uint32 N, M, K,
then N int32 labels, then N*M*K float32 logits ordered sample, exit, class.
Total size is exactly 20 + 4N + 4NMK bytes.

Labels precede logits, and N is only known once the adapter is exhausted, so
batches are buffered and the file written in one pass at the end; desk-scale
exports fit comfortably in memory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .adapters import resolve_adapter

MAGIC = b"AEXL"
VERSION = 1
AEXL_HEADER_BYTES = 20
_HEADER = struct.Struct("<4sIIII")


class ExportError(ValueError):
    """Adapter failure or shape mismatch during export."""


@dataclass
class ExportJob:
    adapter: str
    data_path: str
    out_path: str
    batch_size: int = 256
    device: str = "cpu"  # hint forwarded to checkpoint adapters; unused here


def aexl_file_size(n: int, m: int, k: int) -> int:
    return AEXL_HEADER_BYTES + 4 * n + 4 * n * m * k


def export(job: ExportJob) -> Path:
    """Run the adapter and write its logits to job.out_path; returns the path."""
    adapter = resolve_adapter(job.adapter, job.data_path)
    m, k = int(adapter.n_exits), int(adapter.n_classes)
    if m < 1:
        raise ExportError(f"adapter declares {m} exits; need at least 1")
    if k < 1:
        raise ExportError(f"adapter declares {k} classes; need at least 1")

    logit_chunks, label_chunks = [], []
    for batch_logits, batch_labels in adapter.iter_batches(job.batch_size):
        batch_logits = np.asarray(batch_logits)
        if batch_logits.ndim != 3 or batch_logits.shape[1:] != (m, k):
            raise ExportError(
                f"batch shape {batch_logits.shape} does not match declared "
                f"(batch, {m}, {k})"
            )
        batch_labels = np.asarray(batch_labels, dtype=np.int32)
        if batch_labels.shape != (batch_logits.shape[0],):
            raise ExportError("labels must be one integer per sample in the batch")
        if np.any((batch_labels < -1) | (batch_labels >= k)):
            raise ExportError(f"label outside [-1, {k}) in batch")
        if not np.all(np.isfinite(batch_logits)):
            raise ExportError("non-finite logit in batch")
        logit_chunks.append(batch_logits.astype("<f4"))
        label_chunks.append(batch_labels)

    n = sum(c.shape[0] for c in logit_chunks)
    out = Path(job.out_path)
    with open(out, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, m, k))
        for chunk in label_chunks:
            f.write(chunk.astype("<i4").tobytes())
        for chunk in logit_chunks:
            f.write(np.ascontiguousarray(chunk).tobytes())
    return out
