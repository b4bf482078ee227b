"""Visual token geometry for the UniRes and AnyRes encoding schemes.

Both schemes cut an image into 336 px grids that the vision tower encodes to
a 24x24 feature map each. They differ in three ways:

* UniRes average-pools every map 2x2 (576 -> 144 tokens per grid), has no
  base image, allows up to 49 grids, and flattens raster order *within* each
  grid, grids themselves in raster order. A video of N frames is the same
  thing as a 1 x N image, so it costs exactly 144 * N tokens.
* AnyRes keeps all 576 tokens per grid, prepends a downscaled base image,
  allows up to 4 grids, and flattens the stitched feature map row by row
  *across* grid borders.

The vision tower itself is replaced by :class:`FrameEmbedder`, a seeded hash
of the pixel bytes.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

GRID_PX = 336
FEATURE_SIDE = 24          # 336 px / 14 px patches
POOLED_SIDE = FEATURE_SIDE // 2
FEATURES_PER_GRID = FEATURE_SIDE * FEATURE_SIDE   # 576
TOKENS_PER_FRAME = POOLED_SIDE * POOLED_SIDE      # 144


class Variant(str, enum.Enum):
    UNIRES = "unires"
    ANYRES = "anyres"


class FlattenOrder(str, enum.Enum):
    WITHIN_GRID = "within_grid_raster"
    ACROSS_GRID = "across_grid_raster"


@dataclass(frozen=True)
class ImageShape:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dimensions must be >= 1, got {self.width}x{self.height}")

    @property
    def aspect(self) -> float:
        return self.width / self.height


@dataclass(frozen=True)
class EncodingScheme:
    variant: Variant
    grid_px: int = GRID_PX
    features_per_grid_pre_pool: int = FEATURES_PER_GRID
    pool: bool = True
    max_grids: int = 49
    base_image: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.variant is Variant.UNIRES:
            if not self.pool or self.base_image or self.max_grids != 49:
                raise ValueError("UniRes pools 2x2, has no base image and caps at 49 grids")
        elif not self.base_image or self.pool or self.max_grids != 4:
            raise ValueError("AnyRes keeps a base image, does not pool and caps at 4 grids")

    @classmethod
    def unires(cls) -> "EncodingScheme":
        return cls(Variant.UNIRES)

    @classmethod
    def anyres(cls) -> "EncodingScheme":
        return cls(Variant.ANYRES, pool=False, max_grids=4, base_image=True)

    @classmethod
    def named(cls, name: str) -> "EncodingScheme":
        return cls.unires() if Variant(name.lower()) is Variant.UNIRES else cls.anyres()

    @property
    def tokens_per_grid(self) -> int:
        return self.features_per_grid_pre_pool // 4 if self.pool else self.features_per_grid_pre_pool

    @property
    def flatten_order(self) -> FlattenOrder:
        return FlattenOrder.WITHIN_GRID if self.variant is Variant.UNIRES else FlattenOrder.ACROSS_GRID


@dataclass(frozen=True)
class GridGeometry:
    rows: int
    cols: int
    tokens_per_grid: int
    flatten_order: FlattenOrder
    base_image: bool = False

    @property
    def grids(self) -> int:
        return self.rows * self.cols

    @property
    def pooled(self) -> bool:
        return self.tokens_per_grid == TOKENS_PER_FRAME

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "grids": self.grids,
            "tokens_per_grid": self.tokens_per_grid,
            "flatten_order": self.flatten_order.value,
            "base_image": self.base_image,
        }


def _fit_under_cap(shape: ImageShape, cap: int) -> tuple[int, int]:
    # Only layouts an aspect-preserving downscale can produce are candidates:
    # scaling so one side spans exactly k grids fixes the other side's count.
    # Among those: largest area, then closest width/height ratio, then more columns.
    w, h = shape.width, shape.height
    candidates = set()
    for k in range(1, cap + 1):
        candidates.add((-(-h * k // w), k))   # cols pinned to k
        candidates.add((k, -(-w * k // h)))   # rows pinned to k
    best = max(
        ((r, c) for r, c in candidates if r * c <= cap),
        key=lambda rc: (rc[0] * rc[1], -abs(rc[1] / rc[0] - shape.aspect), rc[1]),
    )
    return best


def grid_layout(shape: ImageShape, scheme: EncodingScheme) -> GridGeometry:
    """Rows and columns of 336 px grids after resizing to grid multiples.

    The image is first rounded *up* to whole grids; if that exceeds the
    scheme's cap it is downscaled to the largest aspect-faithful layout that
    fits.
    """
    rows = max(1, math.ceil(shape.height / scheme.grid_px))
    cols = max(1, math.ceil(shape.width / scheme.grid_px))
    if rows * cols > scheme.max_grids:
        rows, cols = _fit_under_cap(shape, scheme.max_grids)
    return GridGeometry(rows, cols, scheme.tokens_per_grid, scheme.flatten_order, scheme.base_image)


def video_layout(num_frames: int) -> GridGeometry:
    """An N-frame video is a 336 x (336 N) image: one row, one grid per frame, no cap."""
    if num_frames < 1:
        raise ValueError("a video needs at least one frame")
    return GridGeometry(1, num_frames, TOKENS_PER_FRAME, FlattenOrder.WITHIN_GRID)


def token_count(geometry: GridGeometry) -> int:
    return (geometry.grids + int(geometry.base_image)) * geometry.tokens_per_grid


def frames_to_tokens(frames: int) -> int:
    if frames < 0:
        raise ValueError("frame count must be non-negative")
    return frames * TOKENS_PER_FRAME


def tokens_to_frames(tokens: int) -> int:
    if tokens < 0:
        raise ValueError("token count must be non-negative")
    return tokens // TOKENS_PER_FRAME


def frames_tokens_convert(value: int, direction: str) -> int:
    """``direction`` is ``"frames_to_tokens"`` or ``"tokens_to_frames"``."""
    if direction == "frames_to_tokens":
        return frames_to_tokens(value)
    if direction == "tokens_to_frames":
        return tokens_to_frames(value)
    raise ValueError(f"unknown direction {direction!r}")


def pool_2x2(feature_map) -> np.ndarray:
    """Average non-overlapping 2x2 blocks of an ``(H, W, dim)`` map."""
    x = np.asarray(feature_map, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (H, W, dim), got shape {x.shape}")
    h, w, d = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")
    return x.reshape(h // 2, 2, w // 2, 2, d).mean(axis=(1, 3))


def token_order(geometry: GridGeometry, side: int) -> np.ndarray:
    """``(n, 3)`` array of ``(grid, y, x)`` for each emitted grid token, in order.

    ``side`` is the per-grid map side at flatten time (12 after pooling,
    24 without). Base-image tokens are not included.
    """
    g = np.arange(geometry.grids).reshape(geometry.rows, geometry.cols)
    y, x = np.divmod(np.arange(side * side), side)
    if geometry.flatten_order is FlattenOrder.WITHIN_GRID:
        grid = np.repeat(g.ravel(), side * side)
        return np.stack([grid, np.tile(y, geometry.grids), np.tile(x, geometry.grids)], axis=1)
    # across: stitch into a (rows*side, cols*side) canvas and read row by row
    Y, X = np.divmod(np.arange(geometry.rows * side * geometry.cols * side), geometry.cols * side)
    grid = g[Y // side, X // side]
    return np.stack([grid, Y % side, X % side], axis=1)


def flatten(features: Sequence[np.ndarray], geometry: GridGeometry, base=None) -> np.ndarray:
    """Turn per-grid feature maps into the ordered ``(tokens, dim)`` sequence.

    Maps are given at encoder resolution (24x24xdim). When the geometry is a
    pooled one the maps are pooled first; maps that are already 12x12 are
    taken as pooled. AnyRes needs ``base`` (the base-image map), whose tokens
    come first.
    """
    maps = [np.asarray(f, dtype=np.float64) for f in features]
    if len(maps) != geometry.grids:
        raise ValueError(f"got {len(maps)} feature maps for {geometry.grids} grids")
    if geometry.pooled:
        maps = [pool_2x2(m) if m.shape[0] == FEATURE_SIDE else m for m in maps]
    side = maps[0].shape[0] if maps else 0
    if any(m.shape[:2] != (side, side) for m in maps):
        raise ValueError("feature maps must be square and share a size")
    if side * side != geometry.tokens_per_grid:
        raise ValueError(f"{side}x{side} maps do not give {geometry.tokens_per_grid} tokens per grid")
    stack = np.stack(maps)
    order = token_order(geometry, side)
    tokens = stack[order[:, 0], order[:, 1], order[:, 2]]
    if geometry.base_image:
        if base is None:
            raise ValueError("this geometry needs a base-image feature map")
        base = np.asarray(base, dtype=np.float64)
        tokens = np.concatenate([base.reshape(-1, base.shape[-1]), tokens])
    return tokens


@dataclass(frozen=True)
class FrameEmbedder:
    """Deterministic stand-in for the vision tower plus projector.

    A frame's pixel bytes are hashed with the seed and expanded into a
    24x24xdim feature map. Identical frames always embed identically.
    """

    embedding_dim: int = 64
    seed: int = 0

    def feature_map(self, frame) -> np.ndarray:
        arr = np.ascontiguousarray(frame)
        h = hashlib.sha256()
        h.update(self.seed.to_bytes(8, "little", signed=True))
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
        rng = np.random.default_rng(int.from_bytes(h.digest()[:16], "little"))
        return rng.standard_normal((FEATURE_SIDE, FEATURE_SIDE, self.embedding_dim))

    def embed_frame(self, frame) -> np.ndarray:
        """144 pooled tokens for one 336x336 frame, ``(144, dim)``."""
        return pool_2x2(self.feature_map(frame)).reshape(-1, self.embedding_dim)


def _resize(image: np.ndarray, width: int, height: int) -> np.ndarray:
    from PIL import Image

    if image.shape[1] == width and image.shape[0] == height:
        return image
    return np.asarray(Image.fromarray(image).resize((width, height), Image.BICUBIC))


def split_grids(image: np.ndarray, geometry: GridGeometry, grid_px: int = GRID_PX) -> list[np.ndarray]:
    """Resize ``image`` (H, W, C uint8) to the layout and cut it into grids, raster order."""
    img = _resize(image, geometry.cols * grid_px, geometry.rows * grid_px)
    return [
        img[r * grid_px:(r + 1) * grid_px, c * grid_px:(c + 1) * grid_px]
        for r in range(geometry.rows) for c in range(geometry.cols)
    ]


def encode_image(image: np.ndarray, scheme: EncodingScheme, embedder: FrameEmbedder) -> np.ndarray:
    image = np.asarray(image, dtype=np.uint8)
    geometry = grid_layout(ImageShape(image.shape[1], image.shape[0]), scheme)
    maps = [embedder.feature_map(g) for g in split_grids(image, geometry, scheme.grid_px)]
    base = None
    if geometry.base_image:
        base = embedder.feature_map(_resize(image, scheme.grid_px, scheme.grid_px))
    return flatten(maps, geometry, base=base)


def encode_video(frames: Sequence[np.ndarray], embedder: FrameEmbedder) -> np.ndarray:
    geometry = video_layout(len(frames))
    maps = [embedder.feature_map(_resize(np.asarray(f, dtype=np.uint8), GRID_PX, GRID_PX)) for f in frames]
    return flatten(maps, geometry)


def synthetic_frame(seed: int, size: int = GRID_PX) -> np.ndarray:
    """Seeded RGB noise frame used whenever real image assets are absent."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
