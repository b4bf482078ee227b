"""
Zigzag sharding and ring attention
==================================

Causal attention does more work for late queries than early ones. Giving
every worker one early chunk and one late chunk evens that out. The ring
simulator then has to reproduce dense attention exactly.
"""

import numpy as np

from longctx.numkit import AttentionInput, dense_causal_attention
from longctx.ringshard import RingTrace, causal_load, communication_volume, load_imbalance, plan_contiguous, plan_zigzag, ring_attention

# %% Who owns what
plan = plan_zigzag(seq_len=16, num_workers=4)
for w, chunks in enumerate(plan.assignment):
    print(f"worker {w}: chunks {chunks}")

# %% Causal work per worker, zigzag vs contiguous
L, W = 4096, 8
zz, cont = plan_zigzag(L, W), plan_contiguous(L, W)
print("zigzag loads:    ", [ld.causal_pairs for ld in causal_load(zz)])
print("contiguous loads:", [ld.causal_pairs for ld in causal_load(cont)])
print(f"busiest/idlest: zigzag {load_imbalance(zz):.3f}, contiguous {load_imbalance(cont):.3f}")

# %% Ring output against the dense reference
inp = AttentionInput.random(seq_len=512, head_dim=32, seed=0)
dense = np.asarray(dense_causal_attention(inp))
trace = RingTrace()
ring = np.asarray(ring_attention(inp, plan_zigzag(512, 4), trace=trace))
print("max abs error:", np.max(np.abs(ring - dense)))
print("values sent:", trace.values_sent, "expected:", communication_volume(plan_zigzag(512, 4), 32))
print("blocks full/diagonal/skipped:", trace.blocks_full, trace.blocks_diagonal, trace.blocks_skipped)
