"""
Needle-in-a-haystack grids
==========================

A seven-digit magic number is hidden at a chosen depth inside filler text,
and a model is asked to repeat it. The harness sweeps context length and
depth and reports accuracy per cell. Fixture scorers pin the harness at the
top and bottom of the scale; the toy transformer shows a real run.
"""

import numpy as np

from longctx.backend import AdversarialScorer, OracleScorer, ToyModelConfig, ToyScorer
from longctx.haystack import (
    TOKENIZER,
    EmbeddingCache,
    FrameSource,
    GridSpec,
    TextNeedle,
    fit_text_instance,
    heatmap_csv,
    niah_builder,
    run_grid,
    synthetic_haystack,
    vniah_builder,
)
from longctx.rope import RopeParams
from longctx.unires import FrameEmbedder

hay = synthetic_haystack(20_000, seed=0)

# %% One instance, with three distractor needles
needle = TextNeedle.random(np.random.default_rng(1))
inst = fit_text_instance(TOKENIZER.encode(hay), needle, length=1500, depth=0.4, num_distractors=3, seed=1)
text = inst.text()
print("answer:", needle.magic_number, "in", needle.city, "| distractors:", [d.city for d in inst.distractors])
print("total tokens:", len(inst.full_tokens))
print("...", text[-120:].replace("\n", " "))

# %% Fixture scorers bound the grid
spec = GridSpec((1000, 2000), (0.0, 0.5, 1.0), trials_per_cell=3)
for scorer in (OracleScorer(TOKENIZER.vocab_size), AdversarialScorer(TOKENIZER.vocab_size)):
    grid = run_grid(spec, niah_builder(hay, num_distractors=3), scorer, seed=0)
    print(scorer.name, "mean accuracy", grid.matrix().mean())

# %% An untrained toy transformer, attention run through the ring
toy = ToyScorer(ToyModelConfig(rope=RopeParams(1e4, 16, 8192), workers=4))
grid = run_grid(GridSpec((1024,), (0.0, 0.5, 1.0), 2), niah_builder(hay), toy, seed=0, jobs=2)
print(heatmap_csv(grid))

# %% The video variant counts frames instead of tokens
cache = EmbeddingCache(FrameSource(seed=0), FrameEmbedder(16))
vgrid = run_grid(GridSpec((4, 8), (0.0, 1.0), 2, unit="frames"), vniah_builder(cache),
                 OracleScorer(TOKENIZER.vocab_size), seed=0)
print(heatmap_csv(vgrid))
