"""KV cache containers, the decode-stage memory model, and budget bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .numerics import TensorView


@dataclass(frozen=True)
class KeptIndices:
    """Sorted, deduplicated token positions retained for one (layer, head)."""

    positions: tuple[int, ...]

    def __post_init__(self):
        pos = self.positions
        if any(p < 0 for p in pos):
            raise ValueError("positions must be non-negative")
        if any(pos[i] >= pos[i + 1] for i in range(len(pos) - 1)):
            raise ValueError("positions must be strictly increasing")

    @classmethod
    def from_iterable(cls, it: Iterable[int]) -> "KeptIndices":
        return cls(tuple(sorted(set(int(p) for p in it))))

    def __len__(self) -> int:
        return len(self.positions)

    def __iter__(self):
        return iter(self.positions)

    def as_set(self) -> frozenset:
        return frozenset(self.positions)


@dataclass(frozen=True)
class LayerKV:
    """Per-layer key/value matrices, one T x D pair per head."""

    layer: int
    keys: tuple[TensorView, ...]
    values: tuple[TensorView, ...]
    seq_len: int

    def __post_init__(self):
        if len(self.keys) != len(self.values) or not self.keys:
            raise ValueError("keys and values must be non-empty and equal length")
        for k, v in zip(self.keys, self.values):
            if k.rows != self.seq_len or v.rows != self.seq_len:
                raise ValueError("all heads must share seq_len")
            if (k.rows, k.cols) != (v.rows, v.cols):
                raise ValueError("K and V must have identical shapes per head")

    @property
    def n_heads(self) -> int:
        return len(self.keys)


@dataclass(frozen=True)
class MemoryParams:
    """Inputs to the decode-stage KV memory cost formula."""

    batch: int
    seq_len: int
    layers: int
    heads: int
    head_dim: int
    bytes_per_scalar: int = 2

    def __post_init__(self):
        for name in ("batch", "seq_len", "layers", "heads", "head_dim", "bytes_per_scalar"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def memory_bytes(p: MemoryParams) -> int:
    """Exact KV cache byte count: 2 (K and V) * B * S * L * N * D * bytes."""
    return 2 * p.batch * p.seq_len * p.layers * p.heads * p.head_dim * p.bytes_per_scalar


@dataclass(frozen=True)
class BudgetSpec:
    """Compressed-cache budget: absolute max length or a retention ratio.

    A ratio r resolves to max(w + c, floor(r * T)).  The observe window w
    is charged against every policy's budget; c is the chunk size used both
    by chunk selection and as the ratio-resolution floor.
    """

    max_len: Optional[int] = None
    ratio: Optional[float] = None
    w: int = 8
    c: int = 10

    def __post_init__(self):
        if (self.max_len is None) == (self.ratio is None):
            raise ValueError("exactly one of max_len / ratio must be set")
        if self.ratio is not None and not (0.0 < self.ratio <= 1.0):
            raise ValueError("ratio must be in (0, 1]")
        if self.c < 1:
            raise ValueError("chunk size c must be >= 1")
        if self.w < 0:
            raise ValueError("observe window w must be >= 0")
        if self.max_len is not None and self.max_len < self.w:
            raise ValueError("max_len must be >= w")

    def resolve(self, seq_len: int) -> int:
        if seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.max_len is not None:
            return self.max_len
        return max(self.w + self.c, int(np.floor(self.ratio * seq_len)))


def apply_kept(kv: LayerKV, kept: KeptIndices) -> LayerKV:
    """Gather the retained rows of every head, preserving relative order."""
    if kept.positions and kept.positions[-1] >= kv.seq_len:
        raise ValueError("kept index out of range")
    idx = np.asarray(kept.positions, dtype=np.intp)
    keys = tuple(TensorView(k.data[idx]) for k in kv.keys)
    values = tuple(TensorView(v.data[idx]) for v in kv.values)
    return LayerKV(layer=kv.layer, keys=keys, values=values, seq_len=len(kept))


def compression_ratio(kept: KeptIndices, seq_len: int) -> float:
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    return len(kept) / seq_len
