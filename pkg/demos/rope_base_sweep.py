"""
Rotary embeddings at larger base frequencies
============================================

Raising the RoPE base slows every rotation pair down. This walks through what
that does to the slowest pair and checks that scores only depend on the
distance between query and key.
"""

import numpy as np

from longctx.rope import DEFAULT_SWEEP, FrequencySweep, RopeParams, apply_rope, inverse_frequencies, relative_score, sweep_report

# %% The per-pair frequencies for a small head
small = RopeParams(base_frequency=1e4, head_dim=8, max_position=1024)
print("theta at base 1e4:", inverse_frequencies(small))
print("theta at base 1e9:", inverse_frequencies(RopeParams(1e9, 8, 1024)))

# %% Rotation keeps vector norms
rng = np.random.default_rng(0)
x = rng.standard_normal((5, 64))
params = RopeParams(1e6, 64, 1 << 20)
rotated = apply_rope(x, [0, 10, 1000, 50_000, 1_000_000], params)
print("norm drift:", np.max(np.abs(np.linalg.norm(rotated, axis=1) - np.linalg.norm(x, axis=1))))

# %% Only relative distance matters
q, k = rng.standard_normal((2, 64))
for shift in (0, 1000, 100_000):
    print(f"score(m=300+{shift}, n=100+{shift}) = {relative_score(q, k, 300 + shift, 100 + shift, params):.12f}")

# %% How far the slowest pair turns across a 224K window
for row in sweep_report(FrequencySweep(DEFAULT_SWEEP), [224_000], head_dim=128):
    turns = row["slowest_pair_angle"] / (2 * np.pi)
    print(f"base {row['base_frequency']:>8.0e}: slowest pair makes {turns:7.3f} turns")
