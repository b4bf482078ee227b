"""Answer-span scorers.

A scorer takes a :class:`ScoreRequest` (optional visual embeddings followed
by text tokens, plus the answer span inside that concatenation) and returns
the argmax token id the model predicts at every span position, teacher
forced, in a single forward pass. An answer counts as retrieved only when
every position matches.

Scorers provided:

* :class:`ToyScorer`: a small seeded transformer with RoPE whose attention
  can run through the ring simulator or the dense reference.
* :class:`OracleScorer`, :class:`AdversarialScorer`, :class:`RandomScorer`:
  fixtures that bound the harness from above, below and at chance.
* :class:`RemoteScorer`: HTTP client for ``POST /v1/score``.

Wire format of ``POST /v1/score``::

    <u4 header_len> <header_len bytes of UTF-8 JSON> <embed_count*embed_dim <f4>

The JSON header is ``{request_id, text_tokens, answer_span: [start, end),
embed_count, embed_dim}``; the reply is ``{request_id, argmax_ids,
logprobs?}``. ``GET /v1/health`` returns ``{vocab, dim, max_len}``.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import struct
import threading
from dataclasses import dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import numpy as np
from tenacity import (
    RetryError,
    Retrying,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from .numkit import AttentionInput, dense_causal_attention
from .ringshard import plan_zigzag, ring_attention
from .rope import RopeParams, apply_rope

log = logging.getLogger(__name__)

_LEN = struct.Struct("<I")


class BackendError(RuntimeError):
    """A scorer could not produce a response; the harness marks the cell failed."""


class ProtocolError(BackendError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True, eq=False)
class ScoreRequest:
    text_tokens: tuple[int, ...]
    answer_span: tuple[int, int]
    visual_embeddings: np.ndarray | None = None
    request_id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "text_tokens", tuple(int(t) for t in self.text_tokens))
        object.__setattr__(self, "answer_span", (int(self.answer_span[0]), int(self.answer_span[1])))
        if self.visual_embeddings is not None:
            emb = np.asarray(self.visual_embeddings, dtype=np.float64)
            if emb.ndim != 2:
                raise ValueError("visual_embeddings must be (count, dim)")
            object.__setattr__(self, "visual_embeddings", emb)
        start, end = self.answer_span
        if not 1 <= start < end <= self.seq_len:
            raise ValueError(f"answer_span {self.answer_span} invalid for length {self.seq_len}")
        if not self.request_id:
            object.__setattr__(self, "request_id", self.fingerprint()[:16])

    @property
    def embed_count(self) -> int:
        return 0 if self.visual_embeddings is None else self.visual_embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return 0 if self.visual_embeddings is None else self.visual_embeddings.shape[1]

    @property
    def seq_len(self) -> int:
        return self.embed_count + len(self.text_tokens)

    @property
    def span_len(self) -> int:
        return self.answer_span[1] - self.answer_span[0]

    def span_tokens(self) -> tuple[int, ...]:
        """Input tokens sitting at the answer-span positions."""
        s, e = self.answer_span
        off = self.embed_count
        if s < off:
            raise ValueError("answer span overlaps the visual embeddings")
        return self.text_tokens[s - off:e - off]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.text_tokens, dtype="<i8").tobytes())
        h.update(np.asarray(self.answer_span, dtype="<i8").tobytes())
        if self.visual_embeddings is not None:
            h.update(str(self.visual_embeddings.shape).encode())
            h.update(self.visual_embeddings.astype("<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ScoreResponse:
    argmax_ids: tuple[int, ...]
    logprobs: tuple[float, ...] | None = None
    request_id: str = ""


def score_answer_span(argmax_ids, expected) -> bool:
    """All-or-nothing: correct iff every span position's argmax equals the expected id."""
    got, want = list(argmax_ids), list(expected)
    if not want:
        raise ValueError("answer span is empty")
    if len(got) != len(want):
        raise ValueError(f"span length mismatch: {len(got)} predictions for {len(want)} tokens")
    return got == want


class Scorer:
    name = "scorer"

    def score(self, request: ScoreRequest) -> ScoreResponse:
        raise NotImplementedError

    def __call__(self, request: ScoreRequest) -> ScoreResponse:
        return self.score(request)


# -- toy transformer ----------------------------------------------------------

# Full-scale language-model context extension run the toy stands in for.
# Recorded for reference; nothing here trains.
FULL_SCALE_CONTEXT = 224_000
FULL_SCALE_LEARNING_RATE = 1e-5
FULL_SCALE_STEPS = 1000


@dataclass(frozen=True)
class ToyModelConfig:
    vocab: int = 128
    dim: int = 32
    heads: int = 2
    layers: int = 2
    rope: RopeParams = RopeParams(1e4, 16, 8192)
    seed: int = 0
    workers: int = 1
    attention: str = "auto"   # "auto" uses the ring when the length allows it

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.rope.head_dim != self.dim // self.heads:
            raise ValueError(f"rope.head_dim {self.rope.head_dim} != dim/heads {self.dim // self.heads}")
        if self.attention not in ("auto", "dense", "ring"):
            raise ValueError(f"unknown attention routing {self.attention!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def max_len(self) -> int:
        return self.rope.max_position

    def routed(self, **changes) -> "ToyModelConfig":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class _ToyWeights:
    embed: np.ndarray
    wqkv: list
    wo: list
    w1: list
    w2: list


@functools.lru_cache(maxsize=8)
def _weights(config: ToyModelConfig) -> _ToyWeights:
    # routing knobs do not change the weights
    rng = np.random.default_rng(config.seed)
    d = config.dim
    s = 1.0 / np.sqrt(d)
    embed = rng.standard_normal((config.vocab, d))
    wqkv, wo, w1, w2 = [], [], [], []
    for _ in range(config.layers):
        wqkv.append(rng.standard_normal((3, config.heads, d, config.head_dim)) * s)
        wo.append(rng.standard_normal((d, d)) * s)
        w1.append(rng.standard_normal((d, 2 * d)) * s)
        w2.append(rng.standard_normal((2 * d, d)) * s / np.sqrt(2))
    return _ToyWeights(embed, wqkv, wo, w1, w2)


def _rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)


def _uses_ring(config: ToyModelConfig, seq_len: int) -> bool:
    fits = config.workers >= 1 and seq_len % (2 * config.workers) == 0
    if config.attention == "ring":
        if not fits:
            raise ValueError(f"length {seq_len} cannot be split over {config.workers} workers")
        return True
    return config.attention == "auto" and config.workers > 1 and fits


def toy_logits(request: ScoreRequest, config: ToyModelConfig) -> np.ndarray:
    """Logits predicting each answer-span token, shape ``(span_len, vocab)``."""
    L = request.seq_len
    if L > config.max_len:
        raise ValueError(f"sequence of {L} tokens exceeds the toy model limit of {config.max_len}")
    if request.visual_embeddings is not None and request.embed_dim != config.dim:
        raise ValueError(f"embedding dim {request.embed_dim} != model dim {config.dim}")
    if any(t < 0 or t >= config.vocab for t in request.text_tokens):
        raise ValueError(f"token ids must lie in [0, {config.vocab})")
    w = _weights(config.routed(workers=1, attention="auto"))
    parts = [w.embed[list(request.text_tokens)]]
    if request.visual_embeddings is not None:
        parts.insert(0, request.visual_embeddings)
    x = np.concatenate(parts) if len(parts) > 1 else parts[0].copy()

    ring = _uses_ring(config, L)
    plan = plan_zigzag(L, config.workers) if ring else None
    pos = np.arange(L)
    scale = 1.0 / np.sqrt(config.head_dim)
    for layer in range(config.layers):
        h = _rms_norm(x)
        heads = []
        for hd in range(config.heads):
            q, k, v = (h @ w.wqkv[layer][j, hd] for j in range(3))
            inp = AttentionInput(apply_rope(q, pos, config.rope), apply_rope(k, pos, config.rope), v, scale)
            out = ring_attention(inp, plan) if ring else dense_causal_attention(inp)
            heads.append(out.data)
        x = x + np.concatenate(heads, axis=1) @ w.wo[layer]
        x = x + np.tanh(_rms_norm(x) @ w.w1[layer]) @ w.w2[layer]

    start, end = request.answer_span
    return _rms_norm(x[start - 1:end - 1]) @ w.embed.T


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def toy_forward(request: ScoreRequest, config: ToyModelConfig) -> ScoreResponse:
    logits = toy_logits(request, config)
    ids = np.argmax(logits, axis=1)   # first maximum, i.e. lowest id on ties
    lp = _log_softmax(logits)[np.arange(len(ids)), ids]
    return ScoreResponse(tuple(int(i) for i in ids), tuple(float(x) for x in lp), request.request_id)


def logit_gap(logits: np.ndarray) -> float:
    """Smallest top-1 minus top-2 margin over the rows."""
    top2 = np.sort(logits, axis=1)[:, -2:]
    return float(np.min(top2[:, 1] - top2[:, 0]))


class ToyScorer(Scorer):
    def __init__(self, config: ToyModelConfig | None = None):
        self.config = config or ToyModelConfig()
        self.name = f"toy(seed={self.config.seed},layers={self.config.layers},dim={self.config.dim})"

    @property
    def vocab(self) -> int:
        return self.config.vocab

    def score(self, request: ScoreRequest) -> ScoreResponse:
        return toy_forward(request, self.config)


# -- fixture scorers -----------------------------------------------------------

def _expected(request: ScoreRequest) -> tuple[int, ...]:
    try:
        return tuple(request.metadata["expected"])
    except KeyError:
        return request.span_tokens()


class OracleScorer(Scorer):
    """Echoes the expected answer."""

    name = "oracle"

    def __init__(self, vocab: int = 128):
        self.vocab = vocab

    def score(self, request):
        return ScoreResponse(_expected(request), None, request.request_id)


class AdversarialScorer(Scorer):
    """Answers ``expected + 1 mod vocab`` at every position, so never correct."""

    name = "adversarial"

    def __init__(self, vocab: int = 128):
        self.vocab = vocab

    def score(self, request):
        return ScoreResponse(tuple((t + 1) % self.vocab for t in _expected(request)), None, request.request_id)


class RandomScorer(Scorer):
    """Uniform ids in ``[0, vocab)``, seeded per request so call order does not matter."""

    def __init__(self, vocab: int = 10, seed: int = 0):
        self.vocab = vocab
        self.seed = seed
        self.name = f"random(vocab={vocab},seed={seed})"

    def score(self, request):
        digest = hashlib.sha256(f"{self.seed}:{request.fingerprint()}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
        ids = rng.integers(0, self.vocab, size=request.span_len)
        return ScoreResponse(tuple(int(i) for i in ids), None, request.request_id)


# -- wire protocol -------------------------------------------------------------

def encode_request(request: ScoreRequest) -> bytes:
    header = {
        "request_id": request.request_id,
        "text_tokens": list(request.text_tokens),
        "answer_span": list(request.answer_span),
        "embed_count": request.embed_count,
        "embed_dim": request.embed_dim,
    }
    hb = json.dumps(header, separators=(",", ":")).encode()
    block = b"" if request.visual_embeddings is None else request.visual_embeddings.astype("<f4").tobytes()
    return _LEN.pack(len(hb)) + hb + block


def decode_request(body: bytes) -> ScoreRequest:
    if len(body) < _LEN.size:
        raise ProtocolError("body shorter than the length prefix", len(body))
    (n,) = _LEN.unpack_from(body)
    end = _LEN.size + n
    if len(body) < end:
        raise ProtocolError(f"header declares {n} bytes but body is shorter", len(body))
    try:
        header = json.loads(body[_LEN.size:end])
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"bad JSON header: {exc.msg}", _LEN.size + exc.pos) from None
    count, dim = int(header.get("embed_count", 0)), int(header.get("embed_dim", 0))
    need = end + 4 * count * dim
    if len(body) != need:
        raise ProtocolError(f"expected {need} bytes for a {count}x{dim} block, got {len(body)}", len(body))
    emb = None
    if count:
        emb = np.frombuffer(body, dtype="<f4", offset=end).reshape(count, dim).astype(np.float64)
    return ScoreRequest(header["text_tokens"], tuple(header["answer_span"]), emb, str(header["request_id"]))


def encode_response(resp: ScoreResponse) -> bytes:
    payload = {"request_id": resp.request_id, "argmax_ids": list(resp.argmax_ids)}
    if resp.logprobs is not None:
        payload["logprobs"] = list(resp.logprobs)
    return json.dumps(payload, separators=(",", ":")).encode()


def decode_response(raw: bytes, request: ScoreRequest, vocab: int | None = None) -> ScoreResponse:
    text = raw.decode("utf-8", errors="replace")

    def where(key: str) -> int:
        i = text.find(f'"{key}"')
        return i if i >= 0 else 0

    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"response is not JSON: {exc.msg}", exc.pos) from None
    if not isinstance(payload, dict):
        raise ProtocolError("response must be a JSON object", 0)
    if payload.get("request_id") != request.request_id:
        raise ProtocolError(
            f"request_id {payload.get('request_id')!r} does not match {request.request_id!r}",
            where("request_id"))
    ids = payload.get("argmax_ids")
    if not isinstance(ids, list) or not all(isinstance(i, int) for i in ids):
        raise ProtocolError("argmax_ids must be a list of integers", where("argmax_ids"))
    if len(ids) != request.span_len:
        raise ProtocolError(
            f"got {len(ids)} argmax_ids for an answer span of {request.span_len}", where("argmax_ids"))
    if vocab is not None and any(not 0 <= i < vocab for i in ids):
        raise ProtocolError(f"argmax_ids outside vocab [0, {vocab})", where("argmax_ids"))
    lp = payload.get("logprobs")
    if lp is not None:
        if not isinstance(lp, list) or len(lp) != len(ids):
            raise ProtocolError("logprobs must match argmax_ids in length", where("logprobs"))
        lp = tuple(float(x) for x in lp)
    return ScoreResponse(tuple(ids), lp, request.request_id)


class _Transient(Exception):
    pass


class RemoteScorer(Scorer):
    """Client for a scoring server speaking the ``/v1/score`` protocol.

    Transport failures and 5xx replies are retried up to ``retries`` more
    times with exponential backoff. At most ``max_in_flight`` requests are
    outstanding at once when the harness calls from several threads.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 3,
                 backoff: float = 0.5, max_backoff: float = 8.0, max_in_flight: int = 4,
                 vocab: int | None = None, client: httpx.Client | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.vocab = vocab
        self.attempts = 0
        self.name = f"remote:{self.endpoint}"
        self._client = client or httpx.Client(timeout=timeout)
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()

    def close(self):
        self._client.close()

    def health(self) -> dict:
        r = self._client.get(f"{self.endpoint}/v1/health")
        r.raise_for_status()
        info = r.json()
        if self.vocab is None:
            self.vocab = int(info["vocab"])
        return info

    def _post(self, body: bytes) -> bytes:
        with self._lock:
            self.attempts += 1
            attempt = self.attempts
        log.info("POST %s/v1/score attempt %d", self.endpoint, attempt)
        try:
            r = self._client.post(f"{self.endpoint}/v1/score", content=body,
                                  headers={"content-type": "application/octet-stream"})
        except httpx.TransportError as exc:
            log.warning("transport error: %s", exc)
            raise _Transient(str(exc)) from exc
        if r.status_code >= 500:
            log.warning("server error %d", r.status_code)
            raise _Transient(f"HTTP {r.status_code}")
        if r.status_code != 200:
            raise BackendError(f"scoring server rejected the request: HTTP {r.status_code} {r.text[:200]}")
        return r.content

    def score(self, request: ScoreRequest) -> ScoreResponse:
        body = encode_request(request)
        retrying = Retrying(
            stop=stop_after_attempt(self.retries + 1),
            wait=wait_exponential(multiplier=self.backoff, max=self.max_backoff),
            retry=retry_if_exception_type(_Transient),
            reraise=False,
        )
        with self._slots:
            try:
                raw = retrying(self._post, body)
            except RetryError as exc:
                raise BackendError(
                    f"{self.endpoint} unreachable after {self.retries + 1} attempts: "
                    f"{exc.last_attempt.exception()}") from None
        return decode_response(raw, request, self.vocab)


def remote_score(request: ScoreRequest, endpoint: str, timeout: float = 30.0, retries: int = 3) -> ScoreResponse:
    scorer = RemoteScorer(endpoint, timeout=timeout, retries=retries)
    try:
        return scorer.score(request)
    finally:
        scorer.close()


# -- reference server ----------------------------------------------------------

class ScoringServer:
    """Serves any :class:`Scorer` over the wire protocol on a background thread.

    Meant for tests and for exposing the toy model to other tooling; not a
    production server.
    """

    def __init__(self, scorer: Scorer, host: str = "127.0.0.1", port: int = 0,
                 vocab: int | None = None, dim: int | None = None, max_len: int | None = None):
        self.scorer = scorer
        cfg = getattr(scorer, "config", None)
        self.info = {
            "vocab": vocab if vocab is not None else getattr(scorer, "vocab", 0),
            "dim": dim if dim is not None else getattr(cfg, "dim", 0),
            "max_len": max_len if max_len is not None else getattr(cfg, "max_len", 0),
        }
        self.httpd = ThreadingHTTPServer((host, port), self._handler())
        self.httpd.daemon_threads = True
        self._thread = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def _handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                log.debug(fmt, *args)

            def _reply(self, code: int, body: bytes):
                self.send_response(code)
                self.send_header("content-type", "application/json")
                self.send_header("content-length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path == "/v1/health":
                    self._reply(200, json.dumps(server.info).encode())
                else:
                    self._reply(404, b'{"error":"not found"}')

            def do_POST(self):
                if self.path != "/v1/score":
                    self._reply(404, b'{"error":"not found"}')
                    return
                body = self.rfile.read(int(self.headers.get("content-length", 0)))
                try:
                    req = decode_request(body)
                    resp = server.scorer.score(req)
                except (ProtocolError, ValueError) as exc:
                    self._reply(400, json.dumps({"error": str(exc)}).encode())
                    return
                except Exception as exc:
                    log.error("scorer failed: %s", exc)
                    self._reply(500, json.dumps({"error": str(exc)}).encode())
                    return
                self._reply(200, encode_response(ScoreResponse(resp.argmax_ids, resp.logprobs, req.request_id)))

        return Handler

    def start(self) -> "ScoringServer":
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
