"""
Packing a corpus into long training sequences
=============================================

Long documents are repeated so they make up more of the training tokens,
then everything is shuffled and packed back to back with a BOS token between
documents. A document that does not fit is split across sequences.
"""

from collections import Counter

from longctx.packer import (
    PackingConfig,
    content_tokens,
    domain_shares,
    pack,
    shuffle,
    synthetic_corpus,
    upsample,
)

corpus = synthetic_corpus(400, seed=0, long_threshold=1024)
config = PackingConfig(target_len=8192, long_threshold=1024, upsample_factor=2.0)

# %% Upsample long documents, keeping each domain's share of tokens
boosted = upsample(corpus, config, seed=0)
long_before = sum(len(d) for d in corpus if len(d) > config.long_threshold)
long_after = sum(len(d) for d in boosted if len(d) > config.long_threshold)
print(f"long-document tokens: {long_before} -> {long_after}")
for domain, share in sorted(domain_shares(corpus).items()):
    print(f"  {domain:6s} {share:.4f} -> {domain_shares(boosted)[domain]:.4f}")

# %% Pack and check nothing was lost
seqs = pack(shuffle(boosted, seed=0), config)
print(len(seqs), "sequences,", sum(s.padded for s in seqs), "padded")
print("tokens conserved:", content_tokens(seqs) == sum(len(d) for d in boosted))

# %% How many sequences does each document touch?
pieces = Counter(sp.doc_index for s in seqs for sp in s.doc_spans)
print("documents split across sequences:", sum(1 for n in pieces.values() if n > 1))
first = seqs[0]
print("first sequence spans:", [(sp.doc_id, sp.start, sp.end) for sp in first.doc_spans[:4]])
