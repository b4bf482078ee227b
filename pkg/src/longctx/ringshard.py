"""Zigzag sequence sharding and a synchronous ring-attention simulator.

The sequence is cut into ``2W`` equal chunks and worker ``i`` owns chunks
``i`` and ``2W-1-i``. Pairing an early chunk with a late one gives every
worker the same amount of causal work.

The simulator runs ``W`` ring steps. At step ``s`` worker ``w`` holds the
key/value chunks that started on worker ``(w - s) mod W``. Each of its query
chunks merges every visible key/value chunk into a per-row online-softmax
state (running max, normalizer, weighted value sum). A chunk strictly before
the query chunk is processed in full, the same chunk gets a triangular mask
and later chunks are skipped.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numkit import AttentionInput, Matrix


@dataclass(frozen=True)
class ShardPlan:
    num_workers: int
    seq_len: int
    assignment: tuple[tuple[int, ...], ...]
    layout: str = "zigzag"

    @property
    def num_chunks(self) -> int:
        return sum(len(a) for a in self.assignment)

    @property
    def chunk_len(self) -> int:
        return self.seq_len // self.num_chunks

    def chunk_range(self, chunk: int) -> range:
        c = self.chunk_len
        return range(chunk * c, (chunk + 1) * c)

    def worker_tokens(self, worker: int) -> list[int]:
        return [t for ch in self.assignment[worker] for t in self.chunk_range(ch)]

    def owner_of_chunk(self, chunk: int) -> int:
        for w, chunks in enumerate(self.assignment):
            if chunk in chunks:
                return w
        raise KeyError(chunk)

    def to_dict(self) -> dict:
        return {
            "layout": self.layout,
            "num_workers": self.num_workers,
            "seq_len": self.seq_len,
            "chunk_len": self.chunk_len,
            "assignment": [list(a) for a in self.assignment],
            "token_ranges": [
                [[r.start, r.stop] for r in map(self.chunk_range, a)] for a in self.assignment
            ],
        }


def plan_zigzag(seq_len: int, num_workers: int) -> ShardPlan:
    if num_workers < 1:
        raise ValueError("num_workers must be >= 1")
    multiple = 2 * num_workers
    if seq_len < multiple or seq_len % multiple:
        raise ValueError(
            f"seq_len={seq_len} must be a positive multiple of 2*num_workers={multiple}"
        )
    assignment = tuple((i, multiple - 1 - i) for i in range(num_workers))
    return ShardPlan(num_workers, seq_len, assignment, "zigzag")


def plan_contiguous(seq_len: int, num_workers: int) -> ShardPlan:
    """Comparison baseline only: worker ``i`` owns the ``i``-th contiguous slice."""
    if num_workers < 1 or seq_len < num_workers or seq_len % num_workers:
        raise ValueError(f"seq_len={seq_len} must be a positive multiple of {num_workers}")
    assignment = tuple((i,) for i in range(num_workers))
    return ShardPlan(num_workers, seq_len, assignment, "contiguous")


@dataclass(frozen=True)
class WorkerLoad:
    worker: int
    causal_pairs: int


def causal_load(plan: ShardPlan) -> list[WorkerLoad]:
    """Count (query, key<=query) pairs per worker, i.e. sum of ``q+1`` over owned queries."""
    loads = []
    for w, chunks in enumerate(plan.assignment):
        total = 0
        for ch in chunks:
            r = plan.chunk_range(ch)
            # sum_{q=a}^{b-1} (q+1) = sum_{n=a+1}^{b} n
            total += (r.stop * (r.stop + 1) - r.start * (r.start + 1)) // 2
        loads.append(WorkerLoad(w, total))
    return loads


def load_imbalance(plan: ShardPlan) -> float:
    """Busiest worker's pair count over the idlest one's; 1.0 is perfect balance."""
    pairs = [wl.causal_pairs for wl in causal_load(plan)]
    return max(pairs) / min(pairs)


def communication_volume(plan: ShardPlan, head_dim: int) -> int:
    """Real values sent over the ring: every worker forwards its K and V chunk pair
    in each of the ``W-1`` steps that have a successor."""
    w = plan.num_workers
    per_worker_chunks = len(plan.assignment[0])
    return w * (w - 1) * per_worker_chunks * plan.chunk_len * 2 * head_dim


@dataclass
class RingState:
    """Online-softmax accumulators for the query rows owned by one worker."""

    row_max: np.ndarray
    normalizer: np.ndarray
    acc: np.ndarray

    @classmethod
    def empty(cls, rows: int, dim: int) -> "RingState":
        return cls(np.full(rows, -np.inf), np.zeros(rows), np.zeros((rows, dim)))

    def merge(self, rows: slice, scores: np.ndarray, values: np.ndarray) -> None:
        """Fold one block of (already masked) scores into the running state."""
        blk_max = scores.max(axis=1)
        new_max = np.maximum(self.row_max[rows], blk_max)
        alpha = np.exp(self.row_max[rows] - new_max)
        p = np.exp(scores - new_max[:, None])
        self.normalizer[rows] = alpha * self.normalizer[rows] + p.sum(axis=1)
        self.acc[rows] = alpha[:, None] * self.acc[rows] + p @ values
        self.row_max[rows] = new_max

    def finalize(self) -> np.ndarray:
        if not np.all(self.normalizer > 0):
            raise RuntimeError("ring finished with an empty softmax row")
        return self.acc / self.normalizer[:, None]


@dataclass
class RingTrace:
    """Bookkeeping gathered while simulating; used to cross-check closed forms."""

    values_sent: int = 0
    blocks_full: int = 0
    blocks_diagonal: int = 0
    blocks_skipped: int = 0
    steps: int = 0


@dataclass
class _Worker:
    index: int
    chunks: tuple[int, ...]
    q: np.ndarray
    state: RingState
    kv: list = field(default_factory=list)  # [(chunk, k_block, v_block), ...]


def _worker_step(worker: _Worker, chunk_len: int, scale: float) -> tuple[int, int, int]:
    full = diag = skipped = 0
    for qi, q_chunk in enumerate(worker.chunks):
        rows = slice(qi * chunk_len, (qi + 1) * chunk_len)
        q = worker.q[rows]
        for kv_chunk, k, v in worker.kv:
            if kv_chunk > q_chunk:
                skipped += 1
                continue
            s = scale * (q @ k.T)
            if kv_chunk == q_chunk:
                s = np.where(np.tri(chunk_len, dtype=bool), s, -np.inf)
                diag += 1
            else:
                full += 1
            worker.state.merge(rows, s, v)
    return full, diag, skipped


def ring_attention(
    inp: AttentionInput,
    plan: ShardPlan,
    *,
    worker_order: Sequence[int] | None = None,
    executor: Executor | None = None,
    trace: RingTrace | None = None,
) -> Matrix:
    """Causal attention computed by simulating the ring over ``plan``.

    ``worker_order`` permutes the order workers are visited within a step and
    ``executor`` runs them concurrently; neither changes a single output bit,
    because each worker only touches its own state.
    """
    if inp.seq_len != plan.seq_len:
        raise ValueError(f"input length {inp.seq_len} does not match plan length {plan.seq_len}")
    W, c = plan.num_workers, plan.chunk_len
    order = list(range(W)) if worker_order is None else list(worker_order)
    if sorted(order) != list(range(W)):
        raise ValueError(f"worker_order must be a permutation of range({W})")
    q, k, v = inp.q.data, inp.k.data, inp.v.data
    workers = []
    for w, chunks in enumerate(plan.assignment):
        idx = plan.worker_tokens(w)
        workers.append(_Worker(
            w, chunks, q[idx], RingState.empty(len(idx), inp.head_dim),
            [(ch, k[plan.chunk_range(ch)], v[plan.chunk_range(ch)]) for ch in chunks],
        ))
    trace = trace if trace is not None else RingTrace()

    for step in range(W):
        jobs = [workers[w] for w in order]
        if executor is None:
            counts = [_worker_step(wk, c, inp.scale) for wk in jobs]
        else:
            counts = list(executor.map(lambda wk: _worker_step(wk, c, inp.scale), jobs))
        for full, diag, skipped in counts:
            trace.blocks_full += full
            trace.blocks_diagonal += diag
            trace.blocks_skipped += skipped
        trace.steps += 1
        if step == W - 1:
            break
        # barrier, then every worker passes its held K/V blocks to the next worker
        outgoing = [wk.kv for wk in workers]
        for w, wk in enumerate(workers):
            wk.kv = outgoing[(w - 1) % W]
        trace.values_sent += sum(blk.size for kv in outgoing for _, kb, vb in kv for blk in (kb, vb))

    out = np.empty_like(q)
    for w, wk in enumerate(workers):
        out[plan.worker_tokens(w)] = wk.state.finalize()
    return Matrix(out)
