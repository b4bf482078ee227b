"""Needle-in-a-haystack instance generation, scoring and heatmap reports.

Text (NIAH): a ``"The special magic {city} number is: {7 digits}."`` needle
is hidden in a long story-book prompt, optionally with 3 or 5 distractor
needles for other cities, and the model must complete the magic number.

Video (V-NIAH): a single question frame is spliced into a haystack of
frames sampled at 1 FPS, and the model must answer a question about it.

Both are scored perplexity-style: the expected answer is appended to the
prompt and the cell counts as correct only if the argmax at every answer
position matches.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backend import BackendError, ScoreRequest, Scorer, score_answer_span
from .unires import FrameEmbedder, TOKENS_PER_FRAME, synthetic_frame

log = logging.getLogger(__name__)

PROMPT_PREFIX = "This is a very long story book: <book> "
PROMPT_SUFFIX = (
    " </book>.\n Based on the content of the book, Question: "
    "What is the special magic {city} number? Answer: The special magic {city} number is:"
)
NEEDLE_TEMPLATE = "\nThe special magic {city} number is: {number}.\n"
NEEDLE_RE = re.compile(r"The special magic (.+?) number is: (\d{7})\.")
ALLOWED_DISTRACTORS = (0, 3, 5)
TRIALS_PER_CELL = 5
FPS = 1

CITIES = (
    "Singapore", "Tokyo", "Lagos", "Lima", "Oslo", "Cairo", "Hanoi", "Quito",
    "Dublin", "Nairobi", "Lisbon", "Seoul", "Havana", "Perth", "Bogota",
    "Warsaw", "Manila", "Tunis", "Riga", "Dakar", "Denver", "Kyoto", "Porto",
    "Zagreb", "Accra", "Austin", "Bergen", "Male", "Tbilisi", "Reykjavik",
)


class CharTokenizer:
    """Character-level toy tokenizer.

    Digits map to ids 0-9 so a 10-way random guesser is exactly uniform over
    the digits of a magic number. Printable ASCII follows; anything else maps
    to ``unk_id``. ``bos_id`` is the last id.
    """

    def __init__(self):
        chars = string.digits + string.ascii_letters + string.punctuation + " \n\t"
        self._chars = chars
        self._ids = {ch: i for i, ch in enumerate(chars)}
        self.unk_id = len(chars)
        self.bos_id = len(chars) + 1
        self.vocab_size = len(chars) + 2

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(ch, self.unk_id) for ch in text]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            out.append(self._chars[i] if 0 <= i < len(self._chars) else "?" if i == self.unk_id else "")
        return "".join(out)

    def is_space(self, token_id: int) -> bool:
        return 0 <= token_id < len(self._chars) and self._chars[token_id].isspace()


TOKENIZER = CharTokenizer()


@dataclass(frozen=True)
class TextNeedle:
    city: str
    magic_number: str

    def __post_init__(self):
        if not re.fullmatch(r"\d{7}", self.magic_number):
            raise ValueError(f"magic number must be exactly 7 digits, got {self.magic_number!r}")

    def render(self) -> str:
        return NEEDLE_TEMPLATE.format(city=self.city, number=self.magic_number)

    @classmethod
    def random(cls, rng: np.random.Generator, city: str | None = None) -> "TextNeedle":
        city = city or CITIES[int(rng.integers(len(CITIES)))]
        return cls(city, "".join(str(d) for d in rng.integers(0, 10, size=7)))


@dataclass
class NiahInstance:
    context_tokens: list[int]
    needle: TextNeedle
    needle_position: int        # token index of the needle inside context_tokens
    distractors: list[TextNeedle]
    distractor_positions: list[int]
    answer_span: tuple[int, int]
    expected_tokens: list[int]
    haystack_len: int

    @property
    def full_tokens(self) -> list[int]:
        """Prompt followed by the answer, i.e. what the scorer is fed."""
        return self.context_tokens + self.expected_tokens

    def text(self, tokenizer: CharTokenizer = TOKENIZER) -> str:
        return tokenizer.decode(self.full_tokens)

    def to_request(self, request_id: str = "") -> ScoreRequest:
        return ScoreRequest(self.full_tokens, self.answer_span, request_id=request_id,
                            metadata={"expected": list(self.expected_tokens)})


def synthetic_haystack(n_tokens: int, seed: int) -> str:
    """Seeded filler prose made of dictionary-free pseudo-words."""
    rng = np.random.default_rng(seed)
    letters = np.array(list(string.ascii_lowercase))
    words, total = [], 0
    while total < n_tokens:
        w = "".join(rng.choice(letters, size=int(rng.integers(2, 9))))
        if rng.random() < 0.08:
            w += "."
        words.append(w)
        total += len(w) + 1
    return " ".join(words)[:n_tokens]


def _snap_forward(tokens: Sequence[int], pos: int, tokenizer: CharTokenizer) -> int:
    # first index >= pos that starts a word (or is the end)
    while 0 < pos < len(tokens) and not tokenizer.is_space(tokens[pos - 1]):
        pos += 1
    return pos


def build_text_instance(haystack_tokens: Sequence[int], needle: TextNeedle, depth: float,
                        num_distractors: int = 0, seed: int = 0,
                        tokenizer: CharTokenizer = TOKENIZER) -> NiahInstance:
    if not 0.0 <= depth <= 1.0:
        raise ValueError(f"depth must lie in [0, 1], got {depth}")
    if num_distractors not in ALLOWED_DISTRACTORS:
        raise ValueError(f"num_distractors must be one of {ALLOWED_DISTRACTORS}, got {num_distractors}")
    hay = list(haystack_tokens)
    H = len(hay)
    boundaries = sum(1 for i in range(1, H) if tokenizer.is_space(hay[i - 1]))
    if H == 0 or boundaries < num_distractors + 1:
        raise ValueError(f"haystack of {H} tokens is too short to host {num_distractors + 1} needles")

    rng = np.random.default_rng(seed)
    raw = int(round(depth * H))
    needle_pos = _snap_forward(hay, raw, tokenizer)

    others = [c for c in CITIES if c != needle.city]
    cities = [others[i] for i in rng.permutation(len(others))[:num_distractors]]
    distractors = [TextNeedle.random(rng, c) for c in cities]
    taken = set(range(raw, needle_pos + 1))
    dpos: list[int] = []
    while len(dpos) < num_distractors:
        p = _snap_forward(hay, int(rng.integers(0, H + 1)), tokenizer)
        if p not in taken:
            taken.add(p)
            dpos.append(p)

    inserts = sorted([(needle_pos, 0, needle)] + [(p, 1, d) for p, d in zip(dpos, distractors)],
                     key=lambda t: t[0])
    prefix = tokenizer.encode(PROMPT_PREFIX)
    body, cursor, placed = [], 0, {}
    for p, _, nd in inserts:
        body.extend(hay[cursor:p])
        placed[nd.city] = len(prefix) + len(body)
        body.extend(tokenizer.encode(nd.render()))
        cursor = p
    body.extend(hay[cursor:])
    context = prefix + body + tokenizer.encode(PROMPT_SUFFIX.format(city=needle.city) + " ")
    expected = tokenizer.encode(needle.magic_number)
    return NiahInstance(
        context_tokens=context,
        needle=needle,
        needle_position=placed[needle.city],
        distractors=distractors,
        distractor_positions=[placed[d.city] for d in distractors],
        answer_span=(len(context), len(context) + len(expected)),
        expected_tokens=expected,
        haystack_len=H,
    )


def prompt_overhead(needle: TextNeedle, num_distractors: int, tokenizer: CharTokenizer = TOKENIZER) -> int:
    """Tokens the template and needles add on top of the haystack."""
    n = len(tokenizer.encode(PROMPT_PREFIX + PROMPT_SUFFIX.format(city=needle.city) + " "))
    n += len(tokenizer.encode(needle.render())) * (1 + num_distractors)
    return n + 7


def find_needles(text: str) -> list[tuple[str, str]]:
    """``(city, number)`` for every needle in the rendered book, in order."""
    book = text.split("<book>", 1)[-1].split("</book>", 1)[0]
    return NEEDLE_RE.findall(book)


# -- V-NIAH ---------------------------------------------------------------------

@dataclass(frozen=True)
class FrameNeedle:
    question: str
    answer: str
    frame: np.ndarray | None = None
    image_path: str | None = None

    def load_frame(self, seed: int = 0) -> np.ndarray:
        if self.frame is not None:
            return self.frame
        if self.image_path and Path(self.image_path).exists():
            from PIL import Image
            return np.asarray(Image.open(self.image_path).convert("RGB"))
        return synthetic_frame(10_000_019 + seed)

    def question_tokens(self, tokenizer: CharTokenizer = TOKENIZER) -> list[int]:
        return tokenizer.encode(f"\nQuestion: {self.question}\nAnswer: ")

    def answer_tokens(self, tokenizer: CharTokenizer = TOKENIZER) -> list[int]:
        return tokenizer.encode(self.answer)


# The five VQA needles; images are external assets referenced by file name.
VNIAH_NEEDLES = (
    FrameNeedle(
        "Find the frame of the 'While You Were Out' note. What is the name of the university on "
        "that note?\nA. University of California, Los Angeles\nB. University of California, San Diego\n"
        "C. University of California, Berkeley\nD. University of California, Santa Barbara\n"
        "Answer with the option's letter from the given choices directly.",
        "B", image_path="needles/while_you_were_out.png"),
    FrameNeedle(
        "Find the frame of a couple in a wedding. Inside the frame, there is a balloon on the "
        "bridegroom's head. What is the color of that balloon?\n"
        "Answer the question using a single word or phrase.",
        "Yellow", image_path="needles/wedding_balloon.png"),
    FrameNeedle(
        "Find the frame with the image of Selenium tablets. How many mg does each tablet contain?\n"
        "Answer the question using a single word or phrase.",
        "200", image_path="needles/selenium.png"),
    FrameNeedle(
        "Find the frame of a scientist. The scientist is a...\nA. Bird\nB. Elephant\nC. Panda\nD. Dog\n"
        "Answer with the option's letter from the given choices directly.",
        "C", image_path="needles/scientist.png"),
    FrameNeedle(
        "Find the frame of a teddy bear. Where is this teddy bear?\nA. Times Square\nB. Eiffel Tower\n"
        "C. Taj Mahal\nD. Sydney Opera House\n"
        "Answer with the option's letter from the given choices directly.",
        "A", image_path="needles/teddy_bear.png"),
)


def needles_manifest(asset_dir: str | None = None) -> list[dict]:
    out = []
    for n in VNIAH_NEEDLES:
        path = n.image_path if asset_dir is None else str(Path(asset_dir) / Path(n.image_path).name)
        out.append({"question": n.question, "answer": n.answer, "image": path})
    return out


def load_needles_manifest(path) -> list[FrameNeedle]:
    base = Path(path).parent
    recs = json.loads(Path(path).read_text(encoding="utf-8"))
    return [FrameNeedle(r["question"], r["answer"], image_path=str(base / r["image"])) for r in recs]


NEEDLE_FRAME = -1


@dataclass
class VniahInstance:
    frames: list[int]           # haystack frame ids, NEEDLE_FRAME marks the needle
    needle_index: int
    question_tokens: list[int]
    answer_tokens: list[int]
    fps: int = FPS

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def duration_seconds(self) -> float:
        return self.num_frames / self.fps


def build_vniah_instance(haystack_frames: int, needle: FrameNeedle, depth: float,
                         tokenizer: CharTokenizer = TOKENIZER) -> VniahInstance:
    """Insert the needle at ``round(depth * H)`` of the pre-insertion haystack."""
    if haystack_frames < 0:
        raise ValueError("haystack frame count must be >= 0")
    if not 0.0 <= depth <= 1.0:
        raise ValueError(f"depth must lie in [0, 1], got {depth}")
    idx = int(round(depth * haystack_frames))
    frames = list(range(haystack_frames))
    frames.insert(idx, NEEDLE_FRAME)
    return VniahInstance(frames, idx, needle.question_tokens(tokenizer), needle.answer_tokens(tokenizer))


class FrameSource:
    """Haystack frames by id: images from a directory, or seeded synthetic frames."""

    def __init__(self, directory: str | None = None, seed: int = 0):
        self.seed = seed
        self.paths = []
        if directory:
            exts = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
            self.paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in exts)
            if not self.paths:
                raise ValueError(f"no images found in {directory}")

    def __call__(self, frame_id: int) -> np.ndarray:
        if self.paths:
            from PIL import Image
            return np.asarray(Image.open(self.paths[frame_id % len(self.paths)]).convert("RGB"))
        return synthetic_frame(self.seed * 1_000_003 + frame_id)


class EmbeddingCache:
    """Frame id -> 144 pooled embeddings, computed once and reused across cells."""

    def __init__(self, source: FrameSource, embedder: FrameEmbedder):
        self.source = source
        self.embedder = embedder
        self._cache: dict[int, np.ndarray] = {}

    def __call__(self, frame_id: int) -> np.ndarray:
        if frame_id not in self._cache:
            self._cache[frame_id] = self.embedder.embed_frame(self.source(frame_id))
        return self._cache[frame_id]

    def precompute(self, n: int) -> None:
        for i in range(n):
            self(i)


def vniah_request(inst: VniahInstance, needle_embedding: np.ndarray,
                  frame_embedding: Callable[[int], np.ndarray], request_id: str = "") -> ScoreRequest:
    """Visual embeddings, then question tokens, then answer tokens, in one sequence."""
    blocks = [needle_embedding if f == NEEDLE_FRAME else frame_embedding(f) for f in inst.frames]
    emb = np.concatenate(blocks)
    text = inst.question_tokens + inst.answer_tokens
    start = emb.shape[0] + len(inst.question_tokens)
    return ScoreRequest(text, (start, start + len(inst.answer_tokens)), emb, request_id,
                        metadata={"expected": list(inst.answer_tokens)})


# -- grids ----------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    context_lengths: tuple[int, ...]
    depth_fractions: tuple[float, ...]
    trials_per_cell: int = TRIALS_PER_CELL
    unit: str = "tokens"        # "frames" for V-NIAH

    def __post_init__(self):
        object.__setattr__(self, "context_lengths", tuple(int(x) for x in self.context_lengths))
        object.__setattr__(self, "depth_fractions", tuple(float(x) for x in self.depth_fractions))
        if not self.context_lengths or not self.depth_fractions:
            raise ValueError("grid needs at least one length and one depth")
        if any(not 0 <= d <= 1 for d in self.depth_fractions):
            raise ValueError("depths must lie in [0, 1]")
        if self.trials_per_cell < 1:
            raise ValueError("trials_per_cell must be >= 1")


@dataclass
class TrialRecord:
    trial: int
    seed: int
    correct: bool | None
    argmax_ids: list[int] | None = None
    expected: list[int] | None = None
    error: str | None = None


@dataclass
class CellResult:
    length: int
    depth: float
    trials: list[TrialRecord] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return any(t.correct is None for t in self.trials)

    @property
    def accuracy(self) -> float | None:
        if self.failed or not self.trials:
            return None
        return sum(t.correct for t in self.trials) / len(self.trials)


@dataclass
class EvalGrid:
    spec: GridSpec
    cells: dict[tuple[int, int], CellResult]    # (length index, depth index)
    seed: int
    backend: str

    @property
    def context_lengths(self):
        return self.spec.context_lengths

    @property
    def depth_fractions(self):
        return self.spec.depth_fractions

    @property
    def trials_per_cell(self):
        return self.spec.trials_per_cell

    @property
    def complete(self) -> bool:
        n = len(self.context_lengths) * len(self.depth_fractions)
        return len(self.cells) == n and not any(c.failed for c in self.cells.values())

    def accuracy(self, length_index: int, depth_index: int) -> float | None:
        cell = self.cells.get((length_index, depth_index))
        return None if cell is None else cell.accuracy

    def matrix(self) -> np.ndarray:
        """Depth rows by length columns; NaN where a cell failed."""
        out = np.full((len(self.depth_fractions), len(self.context_lengths)), np.nan)
        for (li, di), cell in self.cells.items():
            if cell.accuracy is not None:
                out[di, li] = cell.accuracy
        return out


def trial_seed(seed: int, length_index: int, depth_index: int, trial: int) -> int:
    ss = np.random.SeedSequence([seed, length_index, depth_index, trial])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# builder(length, depth, trial_seed) -> ScoreRequest whose metadata carries "expected"
InstanceBuilder = Callable[[int, float, int], ScoreRequest]


def run_grid(spec: GridSpec, builder: InstanceBuilder, scorer: Scorer, seed: int = 0,
             jobs: int = 1) -> EvalGrid:
    """Score every (length, depth) cell ``trials_per_cell`` times.

    Trial seeds depend only on ``(seed, cell, trial)``, so cells can run
    concurrently with identical results. A scorer failure marks its cell as
    failed and the run carries on.
    """

    def run_cell(li: int, di: int) -> CellResult:
        length, depth = spec.context_lengths[li], spec.depth_fractions[di]
        cell = CellResult(length, depth)
        for t in range(spec.trials_per_cell):
            ts = trial_seed(seed, li, di, t)
            try:
                req = builder(length, depth, ts)
                expected = list(req.metadata["expected"])
                resp = scorer(req)
                ok = score_answer_span(resp.argmax_ids, expected)
                cell.trials.append(TrialRecord(t, ts, ok, list(resp.argmax_ids), expected))
            except (BackendError, ValueError) as exc:
                log.error("cell length=%d depth=%g trial %d failed: %s", length, depth, t, exc)
                cell.trials.append(TrialRecord(t, ts, None, error=str(exc)))
        return cell

    keys = [(li, di) for li in range(len(spec.context_lengths)) for di in range(len(spec.depth_fractions))]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(lambda k: run_cell(*k), keys))
    else:
        results = [run_cell(*k) for k in keys]
    return EvalGrid(spec, dict(zip(keys, results)), seed, getattr(scorer, "name", type(scorer).__name__))


def fit_text_instance(haystack_tokens: Sequence[int], needle: TextNeedle, length: int, depth: float,
                      num_distractors: int = 0, seed: int = 0,
                      tokenizer: CharTokenizer = TOKENIZER) -> NiahInstance:
    """Instance whose prompt plus answer is exactly ``length`` tokens.

    Distractor cities (and so their rendered lengths) depend only on the seed,
    so one trial build tells us how much haystack to drop.
    """
    overhead = prompt_overhead(needle, num_distractors, tokenizer)
    budget = length - overhead
    if budget <= 0:
        raise ValueError(f"a {length}-token prompt cannot hold the {overhead}-token template and needles")
    for _ in range(2):
        if budget > len(haystack_tokens):
            raise ValueError(
                f"a {length}-token prompt needs {budget} haystack tokens, only {len(haystack_tokens)} available")
        inst = build_text_instance(haystack_tokens[:budget], needle, depth, num_distractors, seed, tokenizer)
        excess = len(inst.full_tokens) - length
        if excess == 0:
            return inst
        budget -= excess
    raise AssertionError("prompt length did not converge")


def niah_builder(haystack_text: str, num_distractors: int = 0,
                 tokenizer: CharTokenizer = TOKENIZER) -> InstanceBuilder:
    """Builder whose ``length`` is the total prompt length in tokens, answer included."""
    hay_all = tokenizer.encode(haystack_text)

    def build(length: int, depth: float, ts: int) -> ScoreRequest:
        rng = np.random.default_rng(ts)
        needle = TextNeedle.random(rng, "Singapore" if num_distractors == 0 else None)
        inst = fit_text_instance(hay_all, needle, length, depth, num_distractors, ts, tokenizer)
        return inst.to_request(f"{length}-{depth}-{ts}")

    return build


def vniah_builder(cache: EmbeddingCache, needles: Sequence[FrameNeedle] = VNIAH_NEEDLES,
                  tokenizer: CharTokenizer = TOKENIZER) -> InstanceBuilder:
    """Builder whose ``length`` is the haystack frame count; trial picks the needle."""
    needle_embs: dict[int, np.ndarray] = {}

    def build(length: int, depth: float, ts: int) -> ScoreRequest:
        k = ts % len(needles)
        if k not in needle_embs:
            needle_embs[k] = cache.embedder.embed_frame(needles[k].load_frame(k))
        inst = build_vniah_instance(length, needles[k], depth, tokenizer)
        return vniah_request(inst, needle_embs[k], cache, f"{length}-{depth}-{ts}")

    return build


# -- reports --------------------------------------------------------------------

def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def heatmap_csv(grid: EvalGrid) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["depth"] + [str(n) for n in grid.context_lengths])
    for di, d in enumerate(grid.depth_fractions):
        w.writerow([repr(d)] + [_fmt(grid.accuracy(li, di)) for li in range(len(grid.context_lengths))])
    return buf.getvalue()


def grid_report(grid: EvalGrid, extra: dict | None = None) -> dict:
    cells = []
    for (li, di) in sorted(grid.cells):
        c = grid.cells[(li, di)]
        cells.append({
            "length": c.length,
            "depth": c.depth,
            "accuracy": c.accuracy,
            "failed": c.failed,
            "trials": [
                {k: v for k, v in vars(t).items() if v is not None or k == "correct"}
                for t in c.trials
            ],
        })
    rep = {
        "backend": grid.backend,
        "seed": grid.seed,
        "unit": grid.spec.unit,
        "context_lengths": list(grid.context_lengths),
        "depth_fractions": list(grid.depth_fractions),
        "trials_per_cell": grid.trials_per_cell,
        "complete": grid.complete,
        "trial_seeds": {f"{li},{di}": [t.seed for t in grid.cells[(li, di)].trials] for (li, di) in sorted(grid.cells)},
        "cells": cells,
    }
    if extra:
        rep.update(extra)
    return rep


def report_json(grid: EvalGrid, extra: dict | None = None) -> str:
    return json.dumps(grid_report(grid, extra), indent=2, sort_keys=True) + "\n"


def emit_heatmap(grid: EvalGrid, out_dir, extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``heatmap.csv`` and ``results.json``; incomplete grids are flagged, not refused."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "heatmap.csv", out / "results.json"
    csv_path.write_text(heatmap_csv(grid), encoding="utf-8")
    json_path.write_text(report_json(grid, extra), encoding="utf-8")
    if not grid.complete:
        log.warning("grid incomplete: some cells failed or are missing")
    return csv_path, json_path
