"""Exit criteria for the toolkit, one test per criterion.

Each test is tagged with ``criterion(n, title)``; the conftest hook prints a
PASS/FAIL line per criterion at the end of the run.
"""

import json
import time

import numpy as np
import pytest

from longctx.backend import (
    AdversarialScorer,
    OracleScorer,
    RandomScorer,
    ScoreRequest,
    ToyModelConfig,
    ToyScorer,
    logit_gap,
    toy_forward,
    toy_logits,
)
from longctx.cli import dispatch
from longctx.haystack import (
    TOKENIZER,
    GridSpec,
    TextNeedle,
    build_text_instance,
    find_needles,
    niah_builder,
    run_grid,
    synthetic_haystack,
)
from longctx.numkit import AttentionInput, dense_causal_attention
from longctx.packer import PackingConfig, pack, shuffle, synthetic_corpus, upsample
from longctx.ringshard import causal_load, plan_contiguous, plan_zigzag, ring_attention
from longctx.rope import EXTENDED_BASE, RopeParams, apply_rope, relative_score
from longctx.unires import (
    EncodingScheme,
    FlattenOrder,
    FrameEmbedder,
    GridGeometry,
    ImageShape,
    encode_image,
    encode_video,
    flatten,
    grid_layout,
    synthetic_frame,
    token_count,
    token_order,
    video_layout,
)

pytestmark = pytest.mark.acceptance


def criterion(n, title):
    return pytest.mark.criterion(n, title)


# -- 1 -------------------------------------------------------------------------

@criterion(1, "ring attention equals dense oracle within 1e-9 (110 cases, < 10 s)")
def test_ring_equivalence():
    t0 = time.perf_counter()
    worst, cases = 0.0, 0
    for L in (8, 64, 256):
        for W in (1, 2, 4, 8):
            if L % (2 * W):
                continue
            for seed in range(10):
                inp = AttentionInput.random(L, 16, 1000 * L + 10 * W + seed)
                dense = dense_causal_attention(inp).data
                ring = ring_attention(inp, plan_zigzag(L, W)).data
                worst = max(worst, float(np.max(np.abs(ring - dense))))
                cases += 1
    elapsed = time.perf_counter() - t0
    print(f"criterion 1: {cases} cases, worst max-abs error {worst:.3e}, {elapsed:.2f} s")
    assert cases == 110
    assert worst < 1e-9
    assert elapsed < 10


# -- 2 -------------------------------------------------------------------------

def _pairs_by_key_counting(plan) -> np.ndarray:
    """Causal pairs per worker counted from the key side.

    For each key k, count the queries q >= k owned by each worker; summing
    over k counts every (q, k<=q) pair once. Independent of the closed form.
    """
    L, W, c = plan.seq_len, plan.num_workers, plan.chunk_len
    chunk_owner = np.empty(plan.num_chunks, dtype=np.int64)
    for w, chunks in enumerate(plan.assignment):
        chunk_owner[list(chunks)] = w
    owner = np.repeat(chunk_owner, c)
    owned = owner[None, :] == np.arange(W)[:, None]           # (W, L) query indicator
    at_or_after = np.cumsum(owned[:, ::-1], axis=1)[:, ::-1]  # queries >= k per worker
    return at_or_after.sum(axis=1)


def _pairs_by_enumeration(plan) -> np.ndarray:
    """Literal enumeration over the L x L causal mask."""
    L = plan.seq_len
    mask = np.tri(L, dtype=bool)        # mask[q, k] = k <= q
    owner = np.empty(L, dtype=np.int64)
    for w in range(plan.num_workers):
        owner[plan.worker_tokens(w)] = w
    per_query = mask.sum(axis=1)
    return np.bincount(owner, weights=per_query, minlength=plan.num_workers).astype(np.int64)


@criterion(2, "zigzag loads exactly equal for all (L<=4096, W<=16); contiguous ratio > 1 (< 5 s)")
def test_zigzag_balance():
    t0 = time.perf_counter()
    plans = 0
    for W in range(1, 17):
        for L in range(2 * W, 4097, 2 * W):
            zig, cont = plan_zigzag(L, W), plan_contiguous(L, W)
            zl = np.array([wl.causal_pairs for wl in causal_load(zig)])
            cl = np.array([wl.causal_pairs for wl in causal_load(cont)])
            oracle = _pairs_by_enumeration if L <= 256 else _pairs_by_key_counting
            assert np.array_equal(zl, oracle(zig)), (L, W)
            assert np.array_equal(cl, oracle(cont)), (L, W)
            assert zl.min() == zl.max(), (L, W)
            assert zl.sum() == L * (L + 1) // 2
            if W >= 2:
                assert cl.max() / cl.min() > 1, (L, W)
            plans += 1
    elapsed = time.perf_counter() - t0
    print(f"criterion 2: {plans} (L, W) plans checked in {elapsed:.2f} s")
    assert elapsed < 5


# -- 3 -------------------------------------------------------------------------

@criterion(3, "RoPE norm within 1e-12 and shift-invariance within 1e-9, 100 tuples, bases 1e4 and 1e9")
def test_rope_properties():
    assert EXTENDED_BASE == 1e9
    for base in (1e4, EXTENDED_BASE):
        params = RopeParams(base, 64)
        rng = np.random.default_rng(int(base) % 2**32)
        worst_norm = worst_shift = 0.0
        for _ in range(100):
            q, k = rng.standard_normal((2, 64))
            m, n, s = (int(x) for x in rng.integers(0, 2**18, size=3))
            worst_norm = max(worst_norm, abs(np.linalg.norm(apply_rope(q, m, params)) - np.linalg.norm(q)))
            a = relative_score(q, k, m, n, params)
            b = relative_score(q, k, m + s, n + s, params)
            worst_shift = max(worst_shift, abs(a - b))
        print(f"criterion 3: base={base:g} norm err {worst_norm:.2e}, shift err {worst_shift:.2e}")
        assert worst_norm < 1e-12
        assert worst_shift < 1e-9


# -- 4 -------------------------------------------------------------------------

@criterion(4, "video 144N tokens, 1555 -> 223,920, 2000 -> 288,000, still images capped at 49 grids")
def test_unires_identities():
    for n in range(1, 3001):
        assert token_count(video_layout(n)) == 144 * n
    assert token_count(video_layout(1555)) == 223_920
    assert token_count(video_layout(2000)) == 288_000
    scheme = EncodingScheme.unires()
    assert scheme.max_grids == 49
    assert grid_layout(ImageShape(3360, 3360), scheme).grids == 49
    sides = [1, 335, 336, 337, 1000, 2352, 2353, 3360, 5000, 12000, 40000]
    for w in sides:
        for h in sides:
            g = grid_layout(ImageShape(w, h), scheme)
            assert 1 <= g.grids <= 49
            assert token_count(g) == 144 * g.grids <= 7056


# -- 5 -------------------------------------------------------------------------

@criterion(5, "UniRes within-grid vs AnyRes across-grid order on 2x2 grids; N=1 video == image")
def test_scheme_differentiation():
    side = 24
    maps = list(np.arange(4 * side * side, dtype=np.float64).reshape(4, side, side, 1))
    tag = {(g, y, x): int(maps[g][y, x, 0]) for g in range(4) for y in range(side) for x in range(side)}

    expect_within = [tag[g, y, x] for g in range(4) for y in range(side) for x in range(side)]
    expect_across = [tag[(gr * 2 + (X // side)), y, X % side]
                     for gr in range(2) for y in range(side) for X in range(2 * side)]

    within = GridGeometry(2, 2, side * side, FlattenOrder.WITHIN_GRID)
    across = grid_layout(ImageShape(672, 672), EncodingScheme.anyres())
    assert across.flatten_order is FlattenOrder.ACROSS_GRID and (across.rows, across.cols) == (2, 2)

    got_within = flatten(maps, within)[:, 0].astype(int).tolist()
    base = np.full((side, side, 1), -1.0)
    got_across = flatten(maps, across, base=base)[:, 0].astype(int).tolist()
    assert got_across[:side * side] == [-1] * (side * side)
    got_across = got_across[side * side:]

    assert got_within == expect_within
    assert got_across == expect_across
    assert got_within != got_across and sorted(got_within) == sorted(got_across)
    # first row of the across order crosses from grid 0 into grid 1
    assert token_order(across, side)[side].tolist() == [1, 0, 0]

    # the real UniRes 2x2 geometry emits pooled grids whole, one after another
    uni = grid_layout(ImageShape(672, 672), EncodingScheme.unires())
    assert uni.flatten_order is FlattenOrder.WITHIN_GRID and uni.grids == 4
    pooled = list(np.arange(4 * 144, dtype=np.float64).reshape(4, 12, 12, 1))
    assert flatten(pooled, uni)[:, 0].astype(int).tolist() == list(range(4 * 144))

    emb = FrameEmbedder(16, seed=3)
    for seed in range(3):
        frame = synthetic_frame(seed)
        img = encode_image(frame, EncodingScheme.unires(), emb)
        vid = encode_video([frame], emb)
        assert img.shape == vid.shape == (144, 16)
        assert np.array_equal(img, vid)


# -- 6 -------------------------------------------------------------------------

@criterion(6, "NIAH oracle 1.0 / adversarial 0.0 / random <= 0.01 on 5x5x5; template round-trip; toy at 4096 < 30 s")
def test_niah_harness():
    t0 = time.perf_counter()
    hay = synthetic_haystack(6000, 0)
    spec = GridSpec((1024, 1536, 2048, 3072, 4096), (0.0, 0.25, 0.5, 0.75, 1.0), 5)
    build = niah_builder(hay, 0)
    vocab = TOKENIZER.vocab_size

    oracle = run_grid(spec, build, OracleScorer(vocab), seed=0)
    assert oracle.complete and np.all(oracle.matrix() == 1.0)
    adversarial = run_grid(spec, build, AdversarialScorer(vocab), seed=0)
    assert adversarial.complete and np.all(adversarial.matrix() == 0.0)
    rand = run_grid(spec, build, RandomScorer(10, seed=0), seed=0)
    assert rand.complete and np.all(rand.matrix() <= 0.01)
    # every expected answer is 7 digits, i.e. ids 0..9, so the random backend is at chance
    assert all(len(t.expected) == 7 and max(t.expected) <= 9
               for c in rand.cells.values() for t in c.trials)

    hay_tokens = TOKENIZER.encode(hay[:3000])
    for k in (0, 3, 5):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            needle = TextNeedle.random(rng)
            inst = build_text_instance(hay_tokens, needle, float(rng.random()), k, seed)
            found = find_needles(inst.text())
            assert len(found) == 1 + k
            assert [c for c, _ in found].count(needle.city) == 1

    toy = ToyScorer(ToyModelConfig(rope=RopeParams(1e4, 16, 8192), workers=4))
    toy_spec = GridSpec((4096,), spec.depth_fractions, 5)
    toy_grid = run_grid(toy_spec, build, toy, seed=0, jobs=4)
    assert toy_grid.complete
    elapsed = time.perf_counter() - t0
    print(f"criterion 6: fixture grids + toy grid at 4096 in {elapsed:.2f} s")
    assert elapsed < 30


# -- 7 -------------------------------------------------------------------------

@criterion(7, "niah run with toy backend twice -> byte-identical results.json and heatmap.csv")
def test_end_to_end_determinism(tmp_path, capsys):
    args = ["niah", "run", "--backend", "toy", "--lengths", "512,1024", "--depths", "0,0.5,1",
            "--trials", "2", "--distractors", "3", "--seed", "17"]
    codes = [dispatch(args + ["--out", str(tmp_path / run)]) for run in ("first", "second")]
    capsys.readouterr()
    assert codes == [0, 0]
    for name in ("results.json", "heatmap.csv"):
        a = (tmp_path / "first" / name).read_bytes()
        b = (tmp_path / "second" / name).read_bytes()
        assert a == b and len(a) > 0
    rep = json.loads((tmp_path / "first" / "results.json").read_text())
    assert rep["complete"] and rep["backend"].startswith("toy")


# -- 8 -------------------------------------------------------------------------

@criterion(8, "packer conserves tokens on a 1000-doc corpus, spans match sources, BOS separates docs")
def test_packer_conservation():
    corpus = synthetic_corpus(1000, 0)
    cfg = PackingConfig(target_len=32768, bos_id=0, upsample_factor=2.0)
    docs = shuffle(upsample(corpus, cfg, seed=0), seed=0)
    assert sum(len(d) for d in docs) > sum(len(d) for d in corpus)
    seqs = pack(docs, cfg)

    total = sum(len(d) for d in docs)
    packed = sum(sp.end - sp.start for s in seqs for sp in s.doc_spans)
    non_bos = sum(int(np.count_nonzero(np.asarray(s.tokens) != cfg.bos_id)) for s in seqs)
    assert packed == total == non_bos      # content ids never collide with BOS here

    covered = [0] * len(docs)
    for s in seqs:
        assert len(s.tokens) == cfg.target_len
        for sp in s.doc_spans:
            assert s.tokens[sp.start - 1] == cfg.bos_id
            src = docs[sp.doc_index].tokens
            assert sp.doc_offset == covered[sp.doc_index]
            assert tuple(s.tokens[sp.start:sp.end]) == src[sp.doc_offset:sp.doc_offset + sp.end - sp.start]
            covered[sp.doc_index] += sp.end - sp.start
    assert covered == [len(d) for d in docs]


# -- 9 -------------------------------------------------------------------------

@criterion(9, "toy scorer argmax identical through ring (W=4) and dense for 20 requests, L<=512")
def test_toy_ring_dense_agreement():
    cfg = ToyModelConfig(rope=RopeParams(1e4, 16, 1024))
    agreed, skipped, seed = 0, 0, 0
    while agreed < 20:
        rng = np.random.default_rng(seed)
        L = int(rng.integers(8, 65)) * 8
        span_len = int(rng.integers(1, 17))
        start = int(rng.integers(1, L - span_len + 1))
        req = ScoreRequest(rng.integers(0, cfg.vocab, size=L), (start, start + span_len))
        seed += 1
        dense_cfg = cfg.routed(attention="dense")
        ring_cfg = cfg.routed(workers=4, attention="ring")
        if logit_gap(toy_logits(req, dense_cfg)) <= 1e-6:
            skipped += 1
            continue
        assert L <= 512
        assert toy_forward(req, ring_cfg).argmax_ids == toy_forward(req, dense_cfg).argmax_ids
        agreed += 1
    print(f"criterion 9: 20 requests agree, {skipped} skipped for logit gap <= 1e-6")
    assert skipped < 20
