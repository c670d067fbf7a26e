"""Model adapters: declare (M, K) up front, then yield per-exit logit batches.

An adapter is any object with ``n_exits``, ``n_classes``, and
``iter_batches(batch_size)`` yielding ``(logits, labels)`` pairs where logits
has shape (B, M, K) and labels shape (B,) with -1 for unlabeled samples.
Checkpoint-specific code (torch models and the like) lives in user adapters;
point the CLI at them with a ``module:factory`` path.  The factory is called
with the --data path and must return an adapter.
"""

from __future__ import annotations

import importlib
from pathlib import Path

import numpy as np


class ArrayAdapter:
    """Wrap in-memory or .npz/.npy arrays of precomputed logits.

    .npz files must hold ``logits`` (N, M, K) and optionally ``labels`` (N,);
    a bare .npy is treated as an unlabeled logits array.
    """

    def __init__(self, logits, labels=None):
        logits = np.asarray(logits)
        if logits.ndim != 3:
            raise ValueError(f"logits must be (N, M, K), got shape {logits.shape}")
        self.logits = logits
        if labels is None:
            labels = np.full(logits.shape[0], -1, dtype=np.int32)
        self.labels = np.asarray(labels, dtype=np.int32)
        if self.labels.shape != (logits.shape[0],):
            raise ValueError("labels must be one integer per sample")

    @classmethod
    def from_path(cls, path) -> "ArrayAdapter":
        path = Path(path)
        if path.suffix == ".npz":
            data = np.load(path)
            if "logits" not in data:
                raise ValueError(f"{path} has no 'logits' array")
            return cls(data["logits"], data["labels"] if "labels" in data else None)
        return cls(np.load(path))

    @property
    def n_exits(self) -> int:
        return self.logits.shape[1]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[2]

    def iter_batches(self, batch_size: int):
        for start in range(0, self.logits.shape[0], batch_size):
            stop = start + batch_size
            yield self.logits[start:stop], self.labels[start:stop]


_REGISTRY = {"npz": ArrayAdapter.from_path, "npy": ArrayAdapter.from_path}


def register_adapter(name: str, factory) -> None:
    _REGISTRY[name] = factory


def resolve_adapter(name: str, data_path):
    """Look up a registered adapter or import a ``module:factory`` path."""
    if name in _REGISTRY:
        return _REGISTRY[name](data_path)
    if ":" in name:
        module_name, attr = name.split(":", 1)
        factory = getattr(importlib.import_module(module_name), attr)
        return factory(data_path)
    raise ValueError(
        f"unknown adapter {name!r}; registered: {sorted(_REGISTRY)} "
        "(or use a module:factory path)"
    )
