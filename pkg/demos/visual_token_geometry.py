"""
How many visual tokens does an image cost?
==========================================

UniRes cuts an image into 336 px grids and pools each grid down to 144
tokens. A video is treated as a single row of frame-sized grids. AnyRes,
for comparison, keeps 576 tokens per grid and adds a base image.
"""

import numpy as np

from longctx.unires import (
    EncodingScheme,
    FrameEmbedder,
    ImageShape,
    encode_image,
    encode_video,
    frames_tokens_convert,
    grid_layout,
    synthetic_frame,
    token_count,
    token_order,
    video_layout,
)

unires, anyres = EncodingScheme.unires(), EncodingScheme.anyres()

# %% Token budgets for a few image sizes
for w, h in [(336, 336), (1008, 672), (3360, 3360), (3000, 1000)]:
    g = grid_layout(ImageShape(w, h), unires)
    a = grid_layout(ImageShape(w, h), anyres)
    print(f"{w}x{h}: unires {g.rows}x{g.cols} -> {token_count(g)} tokens, "
          f"anyres {a.rows}x{a.cols} -> {token_count(a)} tokens")

# %% Video frames and token counts convert both ways
for frames in (32, 128, 1555):
    print(f"{frames} frames = {token_count(video_layout(frames))} tokens")
print("tokens 224000 hold", frames_tokens_convert(224_000, "tokens_to_frames"), "frames")

# %% Flatten order on a 1x2 layout with 2x2 maps
# Each entry is (grid, row, col) of the token placed at that position.
g = grid_layout(ImageShape(672, 336), unires)
print("unires order:", token_order(g, side=2).tolist())
print("anyres order:", token_order(grid_layout(ImageShape(672, 336), anyres), side=2).tolist())

# %% A one-frame video encodes to the same tokens as the frame as an image
embedder = FrameEmbedder(16)
frame = synthetic_frame(seed=3)
as_image = encode_image(frame, unires, embedder)
as_video = encode_video([frame], embedder)
print(as_image.shape, np.array_equal(as_image, as_video))
