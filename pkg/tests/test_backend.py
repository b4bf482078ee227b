import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from longctx.backend import (
    AdversarialScorer,
    BackendError,
    OracleScorer,
    ProtocolError,
    RandomScorer,
    RemoteScorer,
    ScoreRequest,
    ScoreResponse,
    ScoringServer,
    ToyModelConfig,
    ToyScorer,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
    logit_gap,
    remote_score,
    score_answer_span,
    toy_forward,
    toy_logits,
)
from longctx.haystack import (
    VNIAH_NEEDLES,
    EmbeddingCache,
    FrameSource,
    GridSpec,
    build_vniah_instance,
    niah_builder,
    report_json,
    run_grid,
    synthetic_haystack,
    vniah_request,
)
from longctx.rope import RopeParams
from longctx.unires import FrameEmbedder

CFG = ToyModelConfig(vocab=64, dim=16, heads=2, layers=2, rope=RopeParams(1e4, 8, 1024), seed=3)


def request(L=64, span=(60, 64), seed=0, vocab=64):
    toks = np.random.default_rng(seed).integers(0, vocab, size=L)
    return ScoreRequest(toks, span)


def test_request_validation():
    with pytest.raises(ValueError):
        ScoreRequest([1, 2, 3], (0, 2))          # position 0 has no prefix to predict from
    with pytest.raises(ValueError):
        ScoreRequest([1, 2, 3], (2, 4))
    r = ScoreRequest([1, 2, 3], (1, 3))
    assert r.request_id == r.fingerprint()[:16] and r.span_tokens() == (2, 3)


def test_toy_is_deterministic():
    r = request()
    a, b = toy_forward(r, CFG), toy_forward(r, CFG)
    assert a == b
    assert len(a.argmax_ids) == 4


def test_toy_ring_matches_dense():
    r = request(L=128, span=(100, 120), seed=5)
    dense = toy_logits(r, CFG.routed(attention="dense"))
    ring = toy_logits(r, CFG.routed(workers=4, attention="ring"))
    assert np.max(np.abs(dense - ring)) < 1e-9
    assert logit_gap(dense) > 1e-6
    assert toy_forward(r, CFG.routed(workers=4)).argmax_ids == toy_forward(r, CFG).argmax_ids


def test_toy_teacher_forcing_is_causal():
    r1 = request(L=64, span=(40, 44), seed=1)
    toks = list(r1.text_tokens)
    toks[50] = (toks[50] + 1) % 64    # change a token after the span
    r2 = ScoreRequest(toks, (40, 44))
    assert np.array_equal(toy_logits(r1, CFG), toy_logits(r2, CFG))


def test_toy_limits():
    with pytest.raises(ValueError, match="1024"):
        toy_forward(request(L=1100, span=(1, 2)), CFG)
    with pytest.raises(ValueError):
        toy_forward(ScoreRequest([1, 99], (1, 2)), CFG)
    with pytest.raises(ValueError):
        toy_forward(ScoreRequest([1, 2], (1, 2), np.zeros((3, 5))), CFG)
    with pytest.raises(ValueError):
        toy_forward(request(L=30), CFG.routed(workers=4, attention="ring"))


def test_argmax_ties_go_to_lowest_id():
    logits = np.array([[1.0, 3.0, 3.0, 0.0]])
    assert int(np.argmax(logits, axis=1)[0]) == 1
    assert logit_gap(logits) == 0.0


def test_fixture_scorers():
    r = ScoreRequest([5, 6, 7, 8], (2, 4), metadata={"expected": [7, 8]})
    assert score_answer_span(OracleScorer()(r).argmax_ids, [7, 8])
    assert not score_answer_span(AdversarialScorer(10)(r).argmax_ids, [7, 8])
    assert AdversarialScorer(8)(r).argmax_ids == (0, 1)
    rs = RandomScorer(10, seed=1)
    assert rs(r) == rs(r)
    assert all(0 <= i < 10 for i in rs(r).argmax_ids)


def test_wire_roundtrip():
    emb = np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32).astype(np.float64)
    r = ScoreRequest([1, 2, 3], (4, 6), emb, request_id="abc")
    back = decode_request(encode_request(r))
    assert back.text_tokens == r.text_tokens and back.answer_span == r.answer_span
    assert np.array_equal(back.visual_embeddings, emb)
    resp = ScoreResponse((2, 3), (-0.5, -0.25), "abc")
    assert decode_response(encode_response(resp), r, vocab=10) == resp


def test_wire_layout():
    body = encode_request(ScoreRequest([1, 2], (1, 2), np.ones((1, 2)), request_id="x"))
    n = int.from_bytes(body[:4], "little")
    header = json.loads(body[4:4 + n])
    assert header == {"request_id": "x", "text_tokens": [1, 2], "answer_span": [1, 2],
                      "embed_count": 1, "embed_dim": 2}
    assert np.frombuffer(body[4 + n:], "<f4").tolist() == [1.0, 1.0]


@pytest.mark.parametrize("raw,msg", [
    (b'{"request_id":"r","argmax_ids":[1,2,3]}', "answer span"),
    (b'{"request_id":"r","argmax_ids":[1,99]}', "vocab"),
    (b'{"request_id":"q","argmax_ids":[1,2]}', "request_id"),
    (b'{"request_id":"r","argmax_ids":[1,2],"logprobs":[0]}', "logprobs"),
    (b'{"request_id":"r",', "JSON"),
])
def test_decode_response_errors(raw, msg):
    r = ScoreRequest([1, 2, 3], (1, 3), request_id="r")
    with pytest.raises(ProtocolError, match=msg) as info:
        decode_response(raw, r, vocab=10)
    assert "at byte" in str(info.value)
    assert 0 <= info.value.offset <= len(raw)


def test_decode_request_truncated():
    body = encode_request(ScoreRequest([1, 2], (1, 2), np.ones((2, 2)), request_id="x"))
    with pytest.raises(ProtocolError):
        decode_request(body[:-3])
    with pytest.raises(ProtocolError):
        decode_request(b"\x01")


def test_echo_server_roundtrip():
    with ScoringServer(OracleScorer(64), vocab=64) as srv:
        client = RemoteScorer(srv.url, timeout=5)
        assert client.health()["vocab"] == 64
        r = request(L=40, span=(30, 37))
        resp = client(r)
        assert len(resp.argmax_ids) == r.span_len
        assert resp.argmax_ids == r.span_tokens()
        assert remote_score(r, srv.url, timeout=5) == resp
        client.close()


def test_toy_over_the_wire_matches_local():
    scorer = ToyScorer(CFG)
    r = request(L=48, span=(40, 44), seed=9)
    with ScoringServer(scorer) as srv:
        remote = RemoteScorer(srv.url, timeout=10)
        assert remote(r).argmax_ids == scorer(r).argmax_ids
        remote.close()


class _WrongLength(OracleScorer):
    def score(self, request):
        return ScoreResponse((1,) * (request.span_len + 1), None, request.request_id)


def test_wrong_length_server_is_protocol_error():
    with ScoringServer(_WrongLength(64), vocab=64) as srv:
        client = RemoteScorer(srv.url, timeout=5, retries=0)
        with pytest.raises(ProtocolError):
            client(request())
        client.close()


class _FlakyHandler(BaseHTTPRequestHandler):
    drops = 2
    seen = 0
    delay = 0.0

    def log_message(self, *args):
        pass

    def do_POST(self):
        cls = type(self)
        body = self.rfile.read(int(self.headers["content-length"]))
        cls.seen += 1
        if cls.seen <= cls.drops:
            self.close_connection = True
            self.connection.shutdown(2)     # hang up without a reply
            return
        time.sleep(cls.delay)
        req = decode_request(body)
        out = encode_response(ScoreResponse(req.span_tokens(), None, req.request_id))
        self.send_response(200)
        self.send_header("content-length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)


def _serve(handler):
    srv = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    srv.daemon_threads = True
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    return srv, f"http://127.0.0.1:{srv.server_address[1]}"


def test_retries_after_transient_failures(caplog):
    handler = type("H", (_FlakyHandler,), {"drops": 2, "seen": 0})
    srv, url = _serve(handler)
    try:
        client = RemoteScorer(url, timeout=5, retries=3, backoff=0.01)
        with caplog.at_level(logging.INFO, logger="longctx.backend"):
            resp = client(request(L=20, span=(10, 15)))
        assert len(resp.argmax_ids) == 5
        assert client.attempts == 3
        attempts = [r for r in caplog.records if "attempt" in r.getMessage()]
        assert [r.getMessage().rsplit(" ", 1)[1] for r in attempts] == ["1", "2", "3"]
        client.close()
    finally:
        srv.shutdown()


def test_exhausted_retries_raise_backend_error():
    handler = type("H", (_FlakyHandler,), {"drops": 100, "seen": 0})
    srv, url = _serve(handler)
    try:
        client = RemoteScorer(url, timeout=5, retries=2, backoff=0.01)
        with pytest.raises(BackendError, match="3 attempts"):
            client(request())
        assert client.attempts == 3
    finally:
        srv.shutdown()


def test_timeout_becomes_backend_error():
    handler = type("H", (_FlakyHandler,), {"drops": 0, "seen": 0, "delay": 1.0})
    srv, url = _serve(handler)
    try:
        client = RemoteScorer(url, timeout=0.2, retries=1, backoff=0.01)
        with pytest.raises(BackendError):
            client(request())
    finally:
        srv.shutdown()


def test_unreachable_endpoint():
    with pytest.raises(BackendError):
        remote_score(request(), "http://127.0.0.1:9", timeout=0.5, retries=0)


def test_precomputed_embeddings_score_identically():
    cfg = ToyModelConfig(vocab=99, dim=8, heads=2, layers=1, rope=RopeParams(1e4, 4, 4096))
    embedder = FrameEmbedder(8)
    needle = VNIAH_NEEDLES[0]
    needle_emb = embedder.embed_frame(needle.load_frame())
    inst = build_vniah_instance(6, needle, 0.5)

    source = FrameSource(seed=2)
    cache = EmbeddingCache(source, embedder)
    cache.precompute(6)
    pre = vniah_request(inst, needle_emb, cache)
    fly = vniah_request(inst, needle_emb, lambda i: embedder.embed_frame(source(i)))
    assert np.array_equal(pre.visual_embeddings, fly.visual_embeddings)
    assert toy_forward(pre, cfg) == toy_forward(fly, cfg)


def test_run_grid_through_remote_backend():
    hay = synthetic_haystack(5000, 1)
    spec = GridSpec((400, 800), (0.0, 1.0), 2)
    with ScoringServer(OracleScorer(99), vocab=99) as srv:
        client = RemoteScorer(srv.url, timeout=5, max_in_flight=2)
        grid = run_grid(spec, niah_builder(hay), client, seed=0, jobs=3)
        client.close()
    assert grid.complete and np.all(grid.matrix() == 1.0)
    local = run_grid(spec, niah_builder(hay), OracleScorer(99), seed=0)
    assert np.array_equal(grid.matrix(), local.matrix())
    assert json.loads(report_json(grid))["trial_seeds"] == json.loads(report_json(local))["trial_seeds"]
