"""Rotary position embeddings with a configurable base frequency.

Dimensions ``(2i, 2i+1)`` form one rotation pair (interleaved layout), and
pair ``i`` turns by ``position * base ** (-2i / head_dim)``. Extending the
context only changes the base; positions are never interpolated.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Base-frequency candidates for training-free extrapolation.
DEFAULT_SWEEP = (3e6, 1e7, 3e7, 1e8, 3e8, 1e9)
EXTENDED_BASE = 1e9
DEFAULT_BASE = 1e4


@dataclass(frozen=True)
class RopeParams:
    base_frequency: float = DEFAULT_BASE
    head_dim: int = 64
    max_position: int = 1 << 24

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"head_dim must be a positive even number, got {self.head_dim}")
        if not self.base_frequency >= 1:
            raise ValueError(f"base_frequency must be >= 1, got {self.base_frequency}")
        if self.max_position < 1:
            raise ValueError(f"max_position must be >= 1, got {self.max_position}")

    def with_base(self, base_frequency: float) -> "RopeParams":
        return RopeParams(base_frequency, self.head_dim, self.max_position)


def inverse_frequencies(params: RopeParams) -> np.ndarray:
    i = np.arange(params.head_dim // 2, dtype=np.float64)
    return float(params.base_frequency) ** (-2.0 * i / params.head_dim)


def rotation_angles(positions, params: RopeParams) -> np.ndarray:
    """Angles ``position * theta_i``; shape ``positions.shape + (head_dim/2,)``."""
    pos = np.asarray(positions)
    if np.any(pos < 0) or np.any(pos >= params.max_position):
        raise ValueError(f"positions must lie in [0, {params.max_position})")
    return pos.astype(np.float64)[..., None] * inverse_frequencies(params)


def apply_rope(vectors, positions, params: RopeParams) -> np.ndarray:
    """Rotate the last axis of ``vectors`` (length ``head_dim``).

    ``positions`` broadcasts against the leading axes, so a single vector with
    a scalar position and an ``(L, head_dim)`` block with ``arange(L)`` both
    work.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.shape[-1] != params.head_dim:
        raise ValueError(f"vector length {x.shape[-1]} != head_dim {params.head_dim}")
    ang = rotation_angles(positions, params)
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, ang.shape[:-1] + (params.head_dim,)))
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def relative_score(q, k, m: int, n: int, params: RopeParams) -> float:
    """Inner product of ``q`` rotated to position ``m`` and ``k`` rotated to ``n``."""
    return float(np.dot(apply_rope(q, m, params), apply_rope(k, n, params)))


@dataclass(frozen=True)
class FrequencySweep:
    candidates: tuple[float, ...]

    def __post_init__(self):
        c = tuple(float(x) for x in self.candidates)
        if not c:
            raise ValueError("a frequency sweep needs at least one candidate")
        if any(x < 1 for x in c):
            raise ValueError("sweep candidates must all be >= 1")
        if any(b <= a for a, b in zip(c, c[1:])):
            raise ValueError("sweep candidates must be strictly increasing")
        object.__setattr__(self, "candidates", c)

    @classmethod
    def default(cls) -> "FrequencySweep":
        return cls(DEFAULT_SWEEP)

    @classmethod
    def from_text(cls, text: str) -> "FrequencySweep":
        """One frequency per line; blank lines and ``#`` comments are ignored."""
        vals = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                vals.append(float(line))
        return cls(tuple(vals))

    @classmethod
    def load(cls, path) -> "FrequencySweep":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def sweep_plan(sweep: FrequencySweep, eval_lengths: Sequence[int]) -> list[tuple[float, int]]:
    """Frequency-major Cartesian product of candidates and evaluation lengths."""
    lengths = list(eval_lengths)
    if not lengths:
        raise ValueError("eval_lengths must be non-empty")
    return list(itertools.product(sweep.candidates, lengths))


def sweep_report(sweep: FrequencySweep, eval_lengths: Iterable[int], head_dim: int) -> list[dict]:
    """Describe each sweep job by how far its slowest pair turns at the eval length.

    The slowest pair's total angle below ``2*pi`` means every position in the
    window gets a distinct phase on that pair.
    """
    rows = []
    for base, length in sweep_plan(sweep, list(eval_lengths)):
        params = RopeParams(base, head_dim, max(length, 1) + 1)
        slowest = float(rotation_angles(length, params)[-1])
        rows.append({
            "base_frequency": base,
            "eval_length": int(length),
            "slowest_pair_angle": slowest,
            "slowest_pair_wavelength": float(2 * np.pi / inverse_frequencies(params)[-1]),
        })
    return rows
