"""Dense float64 numeric core: matrices, stable softmax and causal attention.

``dense_causal_attention`` is the reference every blockwise path in the
package is checked against, so it is written for clarity rather than speed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<II")


@dataclass(frozen=True, eq=False)
class Matrix:
    """Immutable row-major float64 matrix.

    Wraps a single contiguous buffer. ``np.asarray(m)`` returns a read-only
    view, so a ``Matrix`` can be handed to any numpy routine.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C", copy=True)
        if arr.ndim != 2:
            raise ValueError(f"Matrix needs a 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Matrix entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Matrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))

    def to_bytes(self) -> bytes:
        """Golden-file encoding: ``<u4 rows, <u4 cols`` then ``<f8`` row-major data."""
        return _HEADER.pack(self.rows, self.cols) + self.data.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Matrix":
        if len(raw) < _HEADER.size:
            raise ValueError("buffer shorter than the 8-byte header")
        rows, cols = _HEADER.unpack_from(raw)
        expected = _HEADER.size + 8 * rows * cols
        if len(raw) != expected:
            raise ValueError(f"expected {expected} bytes for {rows}x{cols}, got {len(raw)}")
        body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
        return cls(body.reshape(rows, cols))


def save_matrix(path, m: Matrix) -> None:
    Path(path).write_bytes(m.to_bytes())


def load_matrix(path) -> Matrix:
    return Matrix.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True, eq=False)
class AttentionInput:
    """Single-head attention operands, each ``L x d``."""

    q: Matrix
    k: Matrix
    v: Matrix
    scale: float

    def __post_init__(self):
        for name in ("q", "k", "v"):
            val = getattr(self, name)
            if not isinstance(val, Matrix):
                object.__setattr__(self, name, Matrix(val))
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise ValueError(
                f"q, k, v must share a shape: {self.q.shape}, {self.k.shape}, {self.v.shape}"
            )
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @classmethod
    def random(cls, seq_len: int, head_dim: int, seed: int) -> "AttentionInput":
        """Standard-normal q, k, v with the usual ``1/sqrt(d)`` scale."""
        rng = np.random.default_rng(seed)
        q, k, v = rng.standard_normal((3, seq_len, head_dim))
        return cls(Matrix(q), Matrix(k), Matrix(v), 1.0 / np.sqrt(head_dim))

    @property
    def seq_len(self) -> int:
        return self.q.rows

    @property
    def head_dim(self) -> int:
        return self.q.cols


def softmax_stable(row) -> np.ndarray:
    x = np.asarray(row, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("softmax_stable expects a non-empty 1-D vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax_stable input must be finite")
    e = np.exp(x - x.max())
    return e / e.sum()


def causal_mask(seq_len: int) -> np.ndarray:
    """Boolean ``L x L`` mask, True where key index <= query index."""
    return np.tri(seq_len, dtype=bool)


def dense_causal_attention(inp: AttentionInput) -> Matrix:
    q, k, v = inp.q.data, inp.k.data, inp.v.data
    scores = inp.scale * (q @ k.T)
    scores = np.where(causal_mask(inp.seq_len), scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return Matrix(w @ v)
