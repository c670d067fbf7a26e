"""Per-exit logit datasets and their on-disk formats.

A dataset holds N samples x M exits x K classes of raw (pre-softmax) logits
plus one integer label per sample.  Files use a fixed little-endian layout so
that independently written exports load bit-identically:

    bytes 0..3    magic ASCII "AEXL"
    bytes 4..7    uint32 format version (currently 1)
    bytes 8..19   uint32 N, M, K
    then          N int32 labels (-1 marks an unlabeled sample)
    then          N*M*K float32 logits, sample-major, then exit, then class

An optional sidecar ``<name>.meta.json`` carries free-form string metadata
(dataset name, per-exit cost vector, ...).  Probability trajectories reuse
the same 20-byte header with magic "AEXP", followed by float32 probabilities
in the same order plus one degeneracy byte per (sample, exit).

Logits are float32 on disk but promoted to float64 in memory; downstream
product transforms are numerically delicate.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC_LOGITS = b"AEXL"
MAGIC_PROBS = b"AEXP"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIII")  # magic, version, N, M, K


class FormatError(ValueError):
    """Malformed, truncated, or out-of-range dataset file."""


@dataclass
class LogitDataset:
    """N x M x K raw logits with one label per sample.

    ``labels`` uses -1 for unlabeled samples; those are excluded from
    label-dependent metrics but still usable for full-model-prediction
    analyses.
    """

    logits: np.ndarray  # (N, M, K) float64
    labels: np.ndarray  # (N,) int32
    metadata: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.logits.shape[0]

    @property
    def n_exits(self) -> int:
        return self.logits.shape[1]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[2]

    @classmethod
    def from_arrays(cls, logits, labels, metadata=None) -> "LogitDataset":
        """Coerce dtypes, validate invariants, and freeze the arrays."""
        logits = np.ascontiguousarray(logits, dtype=np.float64)
        labels = np.ascontiguousarray(labels, dtype=np.int32)
        ds = cls(logits, labels, dict(metadata or {}))
        ds.validate()
        ds.logits.setflags(write=False)
        ds.labels.setflags(write=False)
        return ds

    def validate(self) -> None:
        if self.logits.ndim != 3:
            raise FormatError(f"logits must be (N, M, K), got shape {self.logits.shape}")
        n, m, k = self.logits.shape
        if m < 1 or k < 1:
            raise FormatError(f"need at least one exit and one class, got M={m}, K={k}")
        if self.labels.shape != (n,):
            raise FormatError(f"labels shape {self.labels.shape} does not match N={n}")
        if not np.all(np.isfinite(self.logits)):
            raise FormatError("non-finite logit encountered")
        bad = (self.labels < -1) | (self.labels >= k)
        if np.any(bad):
            raise FormatError(
                f"label out of range [0, {k}) at sample {int(np.flatnonzero(bad)[0])}"
            )

    def is_labeled(self) -> np.ndarray:
        """Boolean mask of samples with a real label."""
        return self.labels >= 0


@dataclass
class DatasetSplit:
    """Disjoint calibration/evaluation partition of sample indices."""

    calibration_indices: np.ndarray
    evaluation_indices: np.ndarray


def _sidecar_path(path) -> Path:
    return Path(path).with_suffix(".meta.json")


def _read_exact(f, n_bytes: int, what: str) -> bytes:
    data = f.read(n_bytes)
    if len(data) != n_bytes:
        raise FormatError(f"truncated file while reading {what}")
    return data


def read_header(f, expected_magic: bytes):
    """Read and validate the shared 20-byte header, returning (N, M, K)."""
    magic, version, n, m, k = _HEADER.unpack(_read_exact(f, _HEADER.size, "header"))
    if magic != expected_magic:
        raise FormatError(f"bad magic {magic!r}, expected {expected_magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    return n, m, k


def write_header(f, magic: bytes, n: int, m: int, k: int) -> None:
    f.write(_HEADER.pack(magic, FORMAT_VERSION, n, m, k))


def load_binary(path) -> LogitDataset:
    """Load an AEXL file, validating header, shapes, labels, and finiteness."""
    path = Path(path)
    with open(path, "rb") as f:
        n, m, k = read_header(f, MAGIC_LOGITS)
        labels = np.frombuffer(_read_exact(f, 4 * n, "labels"), dtype="<i4").astype(np.int32)
        raw = _read_exact(f, 4 * n * m * k, "logits")
        if f.read(1):
            raise FormatError("trailing bytes after logit payload")
    logits = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, m, k)
    metadata = {}
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        metadata = json.loads(sidecar.read_text())
    return LogitDataset.from_arrays(logits, labels, metadata)


def save_binary(ds: LogitDataset, path) -> None:
    """Write the exact AEXL layout; re-loading yields an equal dataset."""
    ds.validate()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(aexl_bytes(ds))
    if ds.metadata:
        _sidecar_path(path).write_text(json.dumps(ds.metadata, sort_keys=True, indent=2))


def aexl_bytes(ds: LogitDataset) -> bytes:
    """Serialize a dataset to AEXL bytes (20 + 4N + 4NMK of them)."""
    n, m, k = ds.logits.shape
    parts = [
        _HEADER.pack(MAGIC_LOGITS, FORMAT_VERSION, n, m, k),
        ds.labels.astype("<i4").tobytes(),
        ds.logits.astype("<f4").tobytes(),
    ]
    return b"".join(parts)


def load_csv(path, n_exits: int, n_classes: int) -> LogitDataset:
    """Parse rows of ``label, f[1][1..K], ..., f[M][1..K]``.

    Every row must have exactly 1 + M*K columns; ragged rows and non-numeric
    cells are rejected.
    """
    expected = 1 + n_exits * n_classes
    labels, rows = [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cells = [c.strip() for c in line.split(",")]
            if len(cells) != expected:
                raise FormatError(
                    f"line {lineno}: expected {expected} columns, got {len(cells)}"
                )
            try:
                labels.append(int(float(cells[0])))
                rows.append([float(c) for c in cells[1:]])
            except ValueError as exc:
                raise FormatError(f"line {lineno}: non-numeric cell ({exc})") from None
    n = len(rows)
    logits = np.asarray(rows, dtype=np.float64).reshape(n, n_exits, n_classes)
    return LogitDataset.from_arrays(logits, np.asarray(labels, dtype=np.int32))


def save_csv(ds: LogitDataset, path) -> None:
    """Write the CSV layout accepted by :func:`load_csv` (full float repr)."""
    with open(path, "w", encoding="utf-8") as f:
        flat = ds.logits.reshape(ds.n_samples, -1)
        for label, row in zip(ds.labels, flat):
            f.write(",".join([str(int(label))] + [repr(float(v)) for v in row]) + "\n")


def split(ds: LogitDataset, calibration_fraction: float, seed: int) -> DatasetSplit:
    """Deterministic disjoint calibration/evaluation partition.

    |calibration| = round(fraction * N), half-up.  Raises if either part
    would be empty.
    """
    if not 0.0 < calibration_fraction < 1.0:
        raise ValueError(f"calibration_fraction must be in (0, 1), got {calibration_fraction}")
    n = ds.n_samples
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    n_cal = int(np.floor(calibration_fraction * n + 0.5))
    if n_cal == 0 or n_cal == n:
        raise ValueError(
            f"fraction {calibration_fraction} yields an empty part for N={n}"
        )
    perm = np.random.default_rng(seed).permutation(n)
    return DatasetSplit(
        calibration_indices=np.sort(perm[:n_cal]),
        evaluation_indices=np.sort(perm[n_cal:]),
    )
