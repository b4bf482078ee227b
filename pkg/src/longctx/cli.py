"""``longctx`` command line.

Every subcommand resolves its settings as built-in default < config file
< command-line flag, writes ``config.resolved`` to ``--out`` before doing any
work, and leaves ``results.json`` and ``log.txt`` (plus ``heatmap.csv`` for
grid runs) next to it. Exit status is 0 on success, 1 when a check or cell
failed, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .backend import (
    AdversarialScorer,
    OracleScorer,
    RandomScorer,
    RemoteScorer,
    Scorer,
    ToyModelConfig,
    ToyScorer,
)
from .haystack import (
    TOKENIZER,
    EmbeddingCache,
    FrameSource,
    GridSpec,
    TextNeedle,
    VNIAH_NEEDLES,
    emit_heatmap,
    find_needles,
    fit_text_instance,
    load_needles_manifest,
    niah_builder,
    run_grid,
    synthetic_haystack,
    vniah_builder,
)
from .numkit import AttentionInput, Matrix, dense_causal_attention
from .packer import (
    PackingConfig,
    domain_shares,
    pack,
    read_documents,
    shuffle,
    upsample,
    write_packed,
)
from .ringshard import causal_load, communication_volume, plan_contiguous, plan_zigzag, ring_attention
from .rope import FrequencySweep, RopeParams, sweep_report
from .unires import (
    EncodingScheme,
    FrameEmbedder,
    ImageShape,
    encode_image,
    encode_video,
    grid_layout,
    token_count,
    token_order,
    video_layout,
)

log = logging.getLogger("longctx")

EQUIVALENCE_TOL = 1e-9


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    settings: dict[str, Any]
    seed: int
    out: str | None

    def resolved(self) -> dict:
        """Everything that determines the results; the output path does not."""
        return {"command": self.command, "seed": self.seed,
                "settings": self.settings, "version": __version__}

    def dumps(self) -> str:
        return json.dumps({**self.resolved(), "out": self.out}, indent=2, sort_keys=True) + "\n"


# -- option tables --------------------------------------------------------------

def _csv(kind):
    def parse(text):
        if isinstance(text, (list, tuple)):
            return [kind(x) for x in text]
        return [kind(x) for x in str(text).split(",") if x.strip()]
    parse.__name__ = f"list[{kind.__name__}]"
    return parse


def _flag(value):
    if isinstance(value, bool):
        return value
    return str(value).lower() in ("1", "true", "yes", "on")


@dataclass
class Opt:
    flag: str
    kind: Callable = str
    default: Any = None
    help: str = ""
    switch: bool = False

    @property
    def key(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


def _grid_opts(default_lengths: list[int]) -> list[Opt]:
    return [
        Opt("--lengths", _csv(int), default_lengths, "context lengths (tokens, or frames for vniah)"),
        Opt("--depths", _csv(float), [0.0, 0.25, 0.5, 0.75, 1.0], "needle depths in [0, 1]"),
        Opt("--trials", int, 5, "trials per cell"),
        Opt("--backend", str, "toy", "toy | oracle | adversarial | random | remote:URL"),
        Opt("--jobs", int, 1, "cells evaluated concurrently"),
        Opt("--workers", int, 4, "ring workers for the toy backend (1 = dense)"),
        Opt("--rope-base", float, 1e4, "toy backend RoPE base frequency"),
        Opt("--model-seed", int, 0, "toy backend weight seed"),
        Opt("--timeout", float, 30.0, "remote backend timeout (s)"),
        Opt("--retries", int, 3, "remote backend retries"),
    ]


COMMANDS: dict[str, list[Opt]] = {
    "shard plan": [
        Opt("--seq-len", int, 64, "sequence length"),
        Opt("--workers", int, 4, "ring size"),
        Opt("--head-dim", int, 64, "head dim for the communication estimate"),
        Opt("--contiguous", _flag, False, "also report the contiguous baseline", switch=True),
    ],
    "shard verify": [
        Opt("--seq-len", int, None, "single case length (default: full suite)"),
        Opt("--workers", int, None, "single case ring size"),
        Opt("--head-dim", int, 8, "head dim"),
        Opt("--cases", int, 10, "seeded inputs per (length, workers)"),
    ],
    "encode": [
        Opt("--width", int, None, "image width in pixels"),
        Opt("--height", int, None, "image height in pixels"),
        Opt("--image", str, None, "image file to encode"),
        Opt("--frames", str, None, "directory of frame images (a video)"),
        Opt("--num-frames", int, None, "video frame count (geometry only)"),
        Opt("--scheme", str, "unires", "unires | anyres"),
        Opt("--embed-dim", int, 64, "stub embedder dimension"),
        Opt("--embed-out", str, None, "write embedded tokens here"),
        Opt("--preview", int, 16, "flatten-order entries to show"),
    ],
    "pack": [
        Opt("--input", str, None, "newline-delimited JSON documents"),
        Opt("--target-len", int, 8192, "tokens per packed sequence"),
        Opt("--bos-id", int, 0, "BOS / padding token id"),
        Opt("--long-threshold", int, 4096, "documents longer than this are upsampled"),
        Opt("--upsample-factor", float, 1.0, "mean repeat count for long documents"),
        Opt("--no-shuffle", _flag, False, "pack in input order", switch=True),
    ],
    "niah generate": [
        Opt("--length", int, 2048, "prompt length in tokens"),
        Opt("--depth", float, 0.5, "needle depth"),
        Opt("--distractors", int, 0, "0, 3 or 5"),
        Opt("--haystack", str, None, "UTF-8 haystack text (default: synthetic)"),
    ],
    "niah run": _grid_opts([1024, 2048, 4096]) + [
        Opt("--distractors", int, 0, "0, 3 or 5"),
        Opt("--haystack", str, None, "UTF-8 haystack text (default: synthetic)"),
    ],
    "vniah run": _grid_opts([4, 8, 16]) + [
        Opt("--frames", str, None, "directory of haystack frames (default: synthetic)"),
        Opt("--needles", str, None, "needle manifest JSON (default: built-in questions)"),
    ],
    "rope sweep": [
        Opt("--frequencies", str, None, "file with one base frequency per line"),
        Opt("--eval-lengths", _csv(int), [32768, 131072, 224000], "evaluation lengths"),
        Opt("--head-dim", int, 128, "head dim"),
    ],
}


SUMMARIES = {
    "shard": "zigzag sharding plans and ring-vs-dense checks",
    "shard verify": "check ring attention against dense attention",
    "shard plan": "print a sharding plan with per-worker causal load",
    "encode": "visual token count and order for an image or video",
    "pack": "upsample, shuffle and pack documents into fixed-length sequences",
    "niah": "text needle-in-a-haystack",
    "niah generate": "write one needle instance",
    "niah run": "evaluate a depth x length grid",
    "vniah": "video needle-in-a-haystack",
    "vniah run": "evaluate a depth x frame-count grid",
    "rope": "rotary embedding base frequencies",
    "rope sweep": "describe a base-frequency sweep",
}


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="longctx", description="Long-context attention, packing and retrieval tools.")
    parser.add_argument("--version", action="version", version=f"longctx {__version__}")
    groups = parser.add_subparsers(dest="group", metavar="COMMAND")
    leaves: dict[str, argparse.ArgumentParser] = {}
    subs: dict[str, Any] = {}
    for name, opts in COMMANDS.items():
        group, _, action = name.partition(" ")
        if not action:
            p = groups.add_parser(group, help=SUMMARIES[name], description=SUMMARIES[name])
        else:
            if group not in subs:
                gp = groups.add_parser(group, help=SUMMARIES[group], description=SUMMARIES[group])
                subs[group] = gp.add_subparsers(dest="action", metavar="ACTION")
            p = subs[group].add_parser(action, help=SUMMARIES[name], description=SUMMARIES[name])
        p.add_argument("--config", help="TOML config file; flags override it")
        p.add_argument("--seed", type=int, default=None, help="global seed (env LONGCTX_SEED)")
        p.add_argument("--out", default=None, help="report directory")
        for o in opts:
            if o.switch:
                p.add_argument(o.flag, dest=o.key, action="store_const", const=True, default=None, help=o.help)
            else:
                p.add_argument(o.flag, dest=o.key, type=o.kind, default=None, help=o.help)
        leaves[name] = p
    return parser, leaves


def _load_toml(path: str) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:   # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def resolve(command: str, ns: argparse.Namespace) -> RunConfig:
    file_cfg: dict = {}
    if ns.config:
        data = _load_toml(ns.config)
        group, _, action = command.partition(" ")
        # accept [niah.run] tables, [niah] tables, or top-level keys
        file_cfg = {k: v for k, v in data.items() if not isinstance(v, dict)}
        file_cfg.update({k: v for k, v in data.get(group, {}).items() if not isinstance(v, dict)})
        if action:
            file_cfg.update(data.get(group, {}).get(action, {}))
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
    settings = {}
    for o in COMMANDS[command]:
        val = getattr(ns, o.key)
        if val is None and o.key in file_cfg:
            val = o.kind(file_cfg[o.key])
        settings[o.key] = o.default if val is None else val
    seed = ns.seed if ns.seed is not None else file_cfg.get("seed")
    if seed is None:
        seed = int(os.environ.get("LONGCTX_SEED", "0"))
    out = ns.out if ns.out is not None else file_cfg.get("out")
    return RunConfig(command, settings, int(seed), out)


# -- report bundle --------------------------------------------------------------

class Bundle:
    """Fixed output layout: config.resolved, results.json, heatmap.csv, log.txt."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.out) if cfg.out else None
        self._handler = None

    def open(self) -> "Bundle":
        if self.dir is None:
            return self
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
            probe = self.dir / ".write-test"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise UsageError(f"output directory {self.dir} is not writable: {exc}") from None
        (self.dir / "config.resolved").write_text(self.cfg.dumps(), encoding="utf-8")
        self._handler = logging.FileHandler(self.dir / "log.txt", mode="w", encoding="utf-8")
        self._handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logging.getLogger("longctx").addHandler(self._handler)
        return self

    def close(self):
        if self._handler is not None:
            logging.getLogger("longctx").removeHandler(self._handler)
            self._handler.close()

    def write_results(self, results: dict) -> None:
        if self.dir is None:
            return
        payload = {"config": self.cfg.resolved(), "results": results}
        (self.dir / "results.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


# -- subcommands ----------------------------------------------------------------

def cmd_shard_plan(cfg: RunConfig, bundle: Bundle) -> int:
    s = cfg.settings
    plan = plan_zigzag(s["seq_len"], s["workers"])
    res = plan.to_dict()
    res["loads"] = [wl.causal_pairs for wl in causal_load(plan)]
    res["communication_values"] = communication_volume(plan, s["head_dim"])
    if s["contiguous"]:
        base = plan_contiguous(s["seq_len"], s["workers"])
        res["contiguous_baseline"] = {"loads": [wl.causal_pairs for wl in causal_load(base)]}
    _emit(res)
    bundle.write_results(res)
    return 0


def _verify_case(L: int, W: int, d: int, seed: int) -> float:
    inp = AttentionInput.random(L, d, seed)
    ring = ring_attention(inp, plan_zigzag(L, W))
    return float(np.max(np.abs(ring.data - dense_causal_attention(inp).data)))


def cmd_shard_verify(cfg: RunConfig, bundle: Bundle) -> int:
    s = cfg.settings
    if s["seq_len"] is not None or s["workers"] is not None:
        cases = [(s["seq_len"] or 64, s["workers"] or 4)]
    else:
        cases = [(L, W) for L in (8, 64, 256) for W in (1, 2, 4, 8) if L % (2 * W) == 0]
    rows = []
    for L, W in cases:
        for c in range(s["cases"]):
            seed = cfg.seed * 1000 + c
            err = _verify_case(L, W, s["head_dim"], seed)
            ok = err < EQUIVALENCE_TOL
            rows.append({"seq_len": L, "workers": W, "seed": seed, "max_abs_error": err, "pass": ok})
            print(f"L={L:<5d} W={W:<3d} seed={seed:<6d} max_abs_error={err:.3e} {'ok' if ok else 'FAIL'}")
    passed = all(r["pass"] for r in rows)
    bundle.write_results({"tolerance": EQUIVALENCE_TOL, "cases": rows, "pass": passed})
    return 0 if passed else 1


def cmd_encode(cfg: RunConfig, bundle: Bundle) -> int:
    s = cfg.settings
    scheme = EncodingScheme.named(s["scheme"])
    embedder = FrameEmbedder(s["embed_dim"], cfg.seed)
    tokens = None
    if s["frames"] or s["num_frames"]:
        if s["frames"]:
            src = FrameSource(s["frames"])
            frames = [src(i) for i in range(len(src.paths))]
            geom = video_layout(len(frames))
            if s["embed_out"]:
                tokens = encode_video(frames, embedder)
        else:
            geom = video_layout(s["num_frames"])
        kind, shape = "video", None
    else:
        image = None
        if s["image"]:
            from PIL import Image
            image = np.asarray(Image.open(s["image"]).convert("RGB"))
            shape = ImageShape(image.shape[1], image.shape[0])
        elif s["width"] and s["height"]:
            shape = ImageShape(s["width"], s["height"])
        else:
            raise UsageError("encode needs --width/--height, --image, --frames or --num-frames")
        geom = grid_layout(shape, scheme)
        kind = "image"
        if s["embed_out"] and image is not None:
            tokens = encode_image(image, scheme, embedder)
    side = 12 if geom.pooled else 24
    preview = token_order(geom, side)[: s["preview"]].tolist()
    res = {
        "kind": kind,
        "scheme": scheme.variant.value if kind == "image" else "unires",
        "input": None if shape is None else {"width": shape.width, "height": shape.height},
        "layout": geom.to_dict(),
        "grids": geom.grids,
        "tokens": token_count(geom),
        "flatten_preview": preview,
    }
    if s["embed_out"]:
        if tokens is None:
            raise UsageError("--embed-out needs actual pixels (--image or --frames)")
        Path(s["embed_out"]).write_bytes(Matrix(tokens).to_bytes())
        res["embed_out"] = s["embed_out"]
        res["embedded_shape"] = list(tokens.shape)
    _emit(res)
    bundle.write_results(res)
    return 0


def cmd_pack(cfg: RunConfig, bundle: Bundle) -> int:
    s = cfg.settings
    if not s["input"]:
        raise UsageError("pack needs --input")
    if bundle.dir is None:
        raise UsageError("pack needs --out")
    pc = PackingConfig(s["target_len"], s["bos_id"], s["long_threshold"], s["upsample_factor"])
    corpus = read_documents(s["input"])
    docs = upsample(corpus, pc, cfg.seed)
    if not s["no_shuffle"]:
        docs = shuffle(docs, cfg.seed)
    seqs = pack(docs, pc)
    manifest = write_packed(bundle.dir, seqs, pc)
    total = sum(len(d) for d in docs)
    res = {
        "input_documents": len(corpus),
        "upsampled_documents": len(docs),
        "corpus_tokens": sum(len(d) for d in corpus),
        "upsampled_tokens": total,
        "packed_content_tokens": manifest["content_tokens"],
        "num_sequences": len(seqs),
        "domain_share_before": domain_shares(corpus),
        "domain_share_after": domain_shares(docs),
        "conserved": manifest["content_tokens"] == total,
    }
    _emit(res)
    bundle.write_results(res)
    return 0 if res["conserved"] else 1


def _haystack_text(path: str | None, n_tokens: int, seed: int) -> str:
    if path:
        return Path(path).read_text(encoding="utf-8")
    return synthetic_haystack(n_tokens, seed)


def cmd_niah_generate(cfg: RunConfig, bundle: Bundle) -> int:
    s = cfg.settings
    rng = np.random.default_rng(cfg.seed)
    needle = TextNeedle.random(rng, "Singapore" if s["distractors"] == 0 else None)
    hay = TOKENIZER.encode(_haystack_text(s["haystack"], s["length"], cfg.seed))
    inst = fit_text_instance(hay, needle, s["length"], s["depth"], s["distractors"], cfg.seed)
    text = inst.text()
    res = {
        "city": needle.city,
        "magic_number": needle.magic_number,
        "needle_position": inst.needle_position,
        "distractors": [{"city": d.city, "magic_number": d.magic_number, "position": p}
                        for d, p in zip(inst.distractors, inst.distractor_positions)],
        "answer_span": list(inst.answer_span),
        "prompt_tokens": len(inst.context_tokens),
        "total_tokens": len(inst.full_tokens),
        "needles_found": len(find_needles(text)),
    }
    if bundle.dir is not None:
        (bundle.dir / "instance.txt").write_text(text, encoding="utf-8")
    _emit(res)
    bundle.write_results(res)
    return 0


def make_scorer(s: dict, seed: int, max_len: int, dim: int = 32) -> Scorer:
    backend = s["backend"]
    if backend == "toy":
        head_dim = dim // 2
        cfg = ToyModelConfig(vocab=128, dim=dim, heads=2, layers=2,
                             rope=RopeParams(s["rope_base"], head_dim, max_len),
                             seed=s["model_seed"], workers=s["workers"])
        return ToyScorer(cfg)
    if backend == "oracle":
        return OracleScorer(128)
    if backend == "adversarial":
        return AdversarialScorer(128)
    if backend == "random":
        return RandomScorer(10, seed)
    if backend.startswith("remote:"):
        return RemoteScorer(backend[len("remote:"):], timeout=s["timeout"], retries=s["retries"])
    raise UsageError(f"unknown backend {backend!r}")


def _finish_grid(grid, cfg: RunConfig, bundle: Bundle) -> int:
    for di, d in enumerate(grid.depth_fractions):
        cells = [grid.accuracy(li, di) for li in range(len(grid.context_lengths))]
        print(f"depth={d:<5g} " + " ".join("  fail" if a is None else f"{a:6.2f}" for a in cells))
    if bundle.dir is not None:
        emit_heatmap(grid, bundle.dir, {"config": cfg.resolved()})
    return 0 if grid.complete else 1


def cmd_niah_run(cfg: RunConfig, bundle: Bundle) -> int:
    s = cfg.settings
    spec = GridSpec(s["lengths"], s["depths"], s["trials"], "tokens")
    longest = max(spec.context_lengths)
    hay = _haystack_text(s["haystack"], longest, cfg.seed)
    scorer = make_scorer(s, cfg.seed, max(8192, longest + 16))
    log.info("niah run: backend=%s lengths=%s depths=%s", scorer.name, spec.context_lengths, spec.depth_fractions)
    grid = run_grid(spec, niah_builder(hay, s["distractors"]), scorer, cfg.seed, s["jobs"])
    return _finish_grid(grid, cfg, bundle)


def cmd_vniah_run(cfg: RunConfig, bundle: Bundle) -> int:
    s = cfg.settings
    spec = GridSpec(s["lengths"], s["depths"], s["trials"], "frames")
    dim = 32
    max_len = max(8192, (max(spec.context_lengths) + 1) * 144 + 2048)
    scorer = make_scorer(s, cfg.seed, max_len, dim)
    needles = load_needles_manifest(s["needles"]) if s["needles"] else list(VNIAH_NEEDLES)
    cache = EmbeddingCache(FrameSource(s["frames"], cfg.seed), FrameEmbedder(dim, cfg.seed))
    cache.precompute(max(spec.context_lengths))
    log.info("vniah run: backend=%s frames=%s", scorer.name, spec.context_lengths)
    grid = run_grid(spec, vniah_builder(cache, needles), scorer, cfg.seed, s["jobs"])
    return _finish_grid(grid, cfg, bundle)


def cmd_rope_sweep(cfg: RunConfig, bundle: Bundle) -> int:
    s = cfg.settings
    sweep = FrequencySweep.load(s["frequencies"]) if s["frequencies"] else FrequencySweep.default()
    rows = sweep_report(sweep, s["eval_lengths"], s["head_dim"])
    for r in rows:
        print(f"base={r['base_frequency']:<10.3g} length={r['eval_length']:<8d} "
              f"slowest_angle={r['slowest_pair_angle']:.4f} rad")
    bundle.write_results({"jobs": rows})
    return 0


HANDLERS = {
    "shard plan": cmd_shard_plan,
    "shard verify": cmd_shard_verify,
    "encode": cmd_encode,
    "pack": cmd_pack,
    "niah generate": cmd_niah_generate,
    "niah run": cmd_niah_run,
    "vniah run": cmd_vniah_run,
    "rope sweep": cmd_rope_sweep,
}


def _suggest(unknown: list[str], parser: argparse.ArgumentParser) -> str:
    known = [s for a in parser._actions for s in a.option_strings]
    msgs = []
    for u in unknown:
        flag = u.split("=", 1)[0]
        close = difflib.get_close_matches(flag, known, n=1)
        msgs.append(f"unrecognized argument {u}" + (f"; did you mean {close[0]}?" if close else ""))
    return "\n".join(msgs)


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, leaves = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        ns, unknown = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    group, action = getattr(ns, "group", None), getattr(ns, "action", None)
    command = f"{group} {action}" if action else group
    if command not in HANDLERS:
        parser.print_usage(sys.stderr)
        print("longctx: error: missing or unknown subcommand", file=sys.stderr)
        return 2
    if unknown:
        leaves[command].print_usage(sys.stderr)
        print(f"longctx: error: {_suggest(unknown, leaves[command])}", file=sys.stderr)
        return 2

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(command, ns)
        bundle = Bundle(cfg).open()
    except (UsageError, OSError, ValueError) as exc:
        print(f"longctx: error: {exc}", file=sys.stderr)
        return 2
    try:
        return HANDLERS[command](cfg, bundle)
    except (UsageError, OSError, ValueError) as exc:
        print(f"longctx: error: {exc}", file=sys.stderr)
        return 2
    finally:
        bundle.close()


def main() -> None:
    sys.exit(dispatch())
