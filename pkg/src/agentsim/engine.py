"""Iteration-level batched inference engine with a block-granular prefix cache.

GPU work is replaced by a linear cost model: one iteration takes
``iter_base + prefill_cost * computed_prefill_tokens + decode_cost * decoding_sequences``
seconds. The cache tracks which whole blocks of each request's context are
resident, so a sequence resuming after a retrieval only recomputes what was
evicted while it was away.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from agentsim.errors import InvalidInputError, StateError

WAITING = "waiting_prefill"
DECODING = "decoding"
RETRIEVING = "retrieving"
DONE = "done"

SHARED_OWNER = -1


@dataclass
class SimClock:
    """Simulation time plus a ``(time, seq)``-ordered event queue."""

    now: float = 0.0
    _queue: list = field(default_factory=list, repr=False)
    _seq: int = 0

    def advance_to(self, t: float) -> None:
        if t < self.now:
            raise StateError(f"clock cannot go back from {self.now} to {t}")
        self.now = t

    def advance(self, dt: float) -> None:
        self.advance_to(self.now + dt)

    def schedule(self, t: float, payload) -> None:
        heapq.heappush(self._queue, (t, self._seq, payload))
        self._seq += 1

    def peek_time(self) -> Optional[float]:
        return self._queue[0][0] if self._queue else None

    def pop_due(self) -> list:
        out = []
        while self._queue and self._queue[0][0] <= self.now:
            out.append(heapq.heappop(self._queue)[2])
        return out

    def __len__(self) -> int:
        return len(self._queue)


@dataclass
class SequenceState:
    request_id: int
    context_len: int
    t_arr_initial: float
    t_arr_current: float
    r_i: int = 0
    cached_prefix_len: int = 0
    remaining_decode: int = 0
    phase: str = WAITING
    stall_flag: bool = False
    prefill_computed_total: int = 0
    prefill_cached_total: int = 0
    decoded_total: int = 0


@dataclass
class Block:
    last_use: float
    ref_count: int = 0


@dataclass(frozen=True)
class EngineConfig:
    iter_base: float = 2e-3
    prefill_cost: float = 1e-4
    decode_cost: float = 5e-3
    max_batch_tokens: int = 4096
    max_batch_seqs: int = 64
    kv_capacity_blocks: int = 8192
    block_size: int = 16
    shared_prefix_len: int = 512
    prefix_cache: bool = True

    def __post_init__(self):
        for name in ("iter_base", "prefill_cost", "decode_cost", "max_batch_tokens",
                     "max_batch_seqs", "kv_capacity_blocks", "block_size"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.shared_prefix_len < 0:
            raise InvalidInputError("shared_prefix_len must be >= 0")


class KvCacheModel:
    """Resident KV blocks keyed by ``(owner, block_index)``.

    Blocks below the shared system prompt boundary belong to a single shared
    owner; everything above belongs to the request. Pinned blocks
    (``ref_count > 0``) are never evicted. Only whole blocks are ever matched;
    a partially filled tail block lives only while its sequence is running.
    """

    def __init__(self, block_size: int, capacity: int, shared_prefix_len: int = 0,
                 enabled: bool = True):
        self.block_size = block_size
        self.capacity = capacity
        self.shared_prefix_len = shared_prefix_len
        self.enabled = enabled
        self.shared_blocks = shared_prefix_len // block_size if enabled else 0
        self.resident: Dict[Tuple[int, int], Block] = {}
        self._owner_top: Dict[int, List[int]] = {}

    def key(self, request_id: int, idx: int) -> Tuple[int, int]:
        if idx < self.shared_blocks:
            return (SHARED_OWNER, idx)
        return (request_id, idx)

    @property
    def used(self) -> int:
        return len(self.resident)

    @property
    def free(self) -> int:
        return self.capacity - len(self.resident)

    def blocks_for(self, tokens: int) -> int:
        return -(-tokens // self.block_size)

    def _add(self, key, now: float) -> None:
        self.resident[key] = Block(last_use=now, ref_count=1)
        self._owner_top.setdefault(key[0], []).append(key[1])

    def _remove(self, key) -> None:
        del self.resident[key]
        idxs = self._owner_top[key[0]]
        idxs.remove(key[1])
        if not idxs:
            del self._owner_top[key[0]]

    def matched_blocks(self, seq: SequenceState) -> int:
        """Whole blocks of ``seq``'s context resident as a contiguous prefix."""
        if not self.enabled:
            return 0
        full = seq.context_len // self.block_size
        m = 0
        while m < full and self.key(seq.request_id, m) in self.resident:
            m += 1
        return m

    def prefix_lookup(self, seq: SequenceState, now: float) -> int:
        """Pin the longest resident prefix of ``seq``; returns its length in tokens."""
        m = self.matched_blocks(seq)
        for i in range(m):
            blk = self.resident[self.key(seq.request_id, i)]
            blk.ref_count += 1
            blk.last_use = now
        return m * self.block_size

    def unpin(self, seq: SequenceState, n_blocks: int, now: float) -> None:
        for i in range(n_blocks):
            blk = self.resident[self.key(seq.request_id, i)]
            blk.ref_count -= 1
            blk.last_use = now

    def evict_lru(self, blocks_needed: int) -> int:
        """Evict up to ``blocks_needed`` unpinned blocks, least recently used owner first.

        Within an owner the highest block index goes first so that what stays
        resident is always a prefix. On equal last use the shared prompt is kept.
        """
        if blocks_needed < 1:
            raise InvalidInputError("blocks_needed must be >= 1")
        heap = []
        for owner, idxs in self._owner_top.items():
            blk = self.resident[(owner, max(idxs))]
            if blk.ref_count == 0:
                heap.append((blk.last_use, owner == SHARED_OWNER, owner))
        heapq.heapify(heap)
        evicted = 0
        while heap and evicted < blocks_needed:
            _, _, owner = heapq.heappop(heap)
            idxs = self._owner_top[owner]
            top = max(idxs)
            self._remove((owner, top))
            evicted += 1
            if owner in self._owner_top:
                nxt = self._owner_top[owner]
                blk = self.resident[(owner, max(nxt))]
                if blk.ref_count == 0:
                    heapq.heappush(heap, (blk.last_use, owner == SHARED_OWNER, owner))
        return evicted

    def allocate(self, seq: SequenceState, first: int, last: int, now: float) -> Optional[int]:
        """Pin blocks ``first..last-1`` for ``seq``, creating the missing ones.

        Returns the number of blocks evicted to make room, or None (with
        nothing changed) if there is not enough unpinned space.
        """
        keys = [self.key(seq.request_id, i) for i in range(first, last)]
        existing = [k for k in keys if k in self.resident]
        missing = len(keys) - len(existing)
        if missing > self.free:
            evictable = sum(1 for b in self.resident.values() if b.ref_count == 0)
            evictable -= sum(1 for k in existing if self.resident[k].ref_count == 0)
            if missing - self.free > evictable:
                return None
        for k in existing:
            blk = self.resident[k]
            blk.ref_count += 1
            blk.last_use = now
        evicted = self.evict_lru(missing - self.free) if missing > self.free else 0
        for k in keys:
            if k not in self.resident:
                self._add(k, now)
        return evicted

    def release(self, seq: SequenceState, now: float, keep: bool = True) -> None:
        """Unpin a sequence that stops running.

        The partial tail block is always dropped; with ``keep`` false (or the
        cache disabled) the request's own blocks are dropped too.
        """
        n = self.blocks_for(seq.context_len)
        self.unpin(seq, n, now)
        for i in range(n):
            key = self.key(seq.request_id, i)
            partial = i == n - 1 and seq.context_len % self.block_size
            own = key[0] != SHARED_OWNER
            if partial or (own and (not keep or not self.enabled)):
                if self.resident[key].ref_count == 0:
                    self._remove(key)

    def touch_shared(self, now: float) -> None:
        for i in range(self.shared_blocks):
            blk = self.resident.get((SHARED_OWNER, i))
            if blk is not None:
                blk.last_use = now

    def check_invariants(self) -> None:
        assert len(self.resident) <= self.capacity, "cache over capacity"
        for owner, idxs in self._owner_top.items():
            lo = 0 if owner == SHARED_OWNER else self.shared_blocks
            srt = sorted(idxs)
            assert srt == list(range(srt[0], srt[0] + len(srt))), f"owner {owner} not contiguous"
            if owner != SHARED_OWNER:
                assert srt[0] == lo, f"owner {owner} does not start at block {lo}"


@dataclass
class IterationReport:
    time: float
    prefilled_computed: int
    prefilled_cached: int
    decoded_seqs: int
    evicted_blocks: int
    latency: float
    admitted: List[int] = field(default_factory=list)
    segment_done: List[int] = field(default_factory=list)
    preempted: List[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "t": self.time,
            "computed": self.prefilled_computed,
            "cached": self.prefilled_cached,
            "decoded": self.decoded_seqs,
            "evicted": self.evicted_blocks,
            "latency": self.latency,
        }


class Engine:
    """Holds live sequences and runs one batched iteration at a time."""

    def __init__(self, cfg: EngineConfig, clock: Optional[SimClock] = None):
        self.cfg = cfg
        self.clock = clock if clock is not None else SimClock()
        self.cache = KvCacheModel(cfg.block_size, cfg.kv_capacity_blocks,
                                  cfg.shared_prefix_len, enabled=cfg.prefix_cache)
        self.waiting: List[SequenceState] = []
        self.running: List[SequenceState] = []
        self.hits = 0
        self.demands = 0
        self.last_latency = 0.0
        self.iterations = 0

    def add_waiting(self, seq: SequenceState) -> None:
        if seq.phase != WAITING:
            raise StateError(f"request {seq.request_id} is {seq.phase}, not waiting")
        self.waiting.append(seq)

    def has_work(self) -> bool:
        return bool(self.waiting or self.running)

    def latency_for(self, computed: int, decoded: int) -> float:
        c = self.cfg
        return c.iter_base + c.prefill_cost * computed + c.decode_cost * decoded

    def is_ready(self) -> bool:
        """Whether the next iteration would still have token budget and a
        sequence slot left after admitting everything currently waiting."""
        budget = self.cfg.max_batch_tokens - len(self.running)
        slots = self.cfg.max_batch_seqs - len(self.running)
        for seq in self.waiting:
            cached = self.cache.matched_blocks(seq) * self.cfg.block_size
            budget -= seq.context_len - cached
            slots -= 1
        return budget > 0 and slots > 0

    def release(self, seq: SequenceState, keep: bool = True) -> None:
        self.cache.release(seq, self.clock.now, keep=keep)

    def run_iteration(self, ordered: List[SequenceState]) -> IterationReport:
        """Admit from ``ordered`` behind the running decoders and advance the clock."""
        cfg = self.cfg
        cache = self.cache
        now = self.clock.now
        budget = cfg.max_batch_tokens
        slots = cfg.max_batch_seqs
        evicted = 0
        decoders: List[SequenceState] = []
        preempted: List[int] = []

        cache.touch_shared(now)
        for seq in list(self.running):
            if seq.context_len % cfg.block_size == 0:
                idx = seq.context_len // cfg.block_size
                got = cache.allocate(seq, idx, idx + 1, now)
                if got is None:
                    # no room for the next block: recompute-style preemption
                    self.running.remove(seq)
                    cache.release(seq, now)
                    seq.phase = WAITING
                    self.waiting.append(seq)
                    preempted.append(seq.request_id)
                    continue
                evicted += got
            decoders.append(seq)
            budget -= 1
            slots -= 1

        computed = cached = 0
        admitted: List[SequenceState] = []
        prefill_started = False
        for seq in ordered:
            if seq.phase != WAITING or seq.request_id in preempted:
                continue
            if slots <= 0:
                break
            matched = cache.matched_blocks(seq)
            cached_len = matched * cfg.block_size
            tokens = seq.context_len - cached_len
            if tokens > budget and prefill_started:
                continue
            cache.prefix_lookup(seq, now)
            got = cache.allocate(seq, matched, cache.blocks_for(seq.context_len), now)
            if got is None:
                cache.unpin(seq, matched, now)
                continue
            evicted += got
            prefill_started = prefill_started or tokens > 0
            seq.cached_prefix_len = cached_len
            seq.prefill_computed_total += tokens
            seq.prefill_cached_total += cached_len
            computed += tokens
            cached += cached_len
            budget -= tokens
            slots -= 1
            admitted.append(seq)

        latency = self.latency_for(computed, len(decoders))
        report = IterationReport(now, computed, cached, len(decoders), evicted, latency,
                                 admitted=[s.request_id for s in admitted], preempted=preempted)
        self.hits += cached
        self.demands += cached + computed
        self.clock.advance(latency)
        self.last_latency = latency
        self.iterations += 1

        for seq in decoders:
            seq.context_len += 1
            seq.remaining_decode -= 1
            seq.decoded_total += 1
            if seq.remaining_decode <= 0:
                report.segment_done.append(seq.request_id)
        if admitted:
            ids = {s.request_id for s in admitted}
            self.waiting = [s for s in self.waiting if s.request_id not in ids]
            for seq in admitted:
                seq.phase = DECODING
                self.running.append(seq)
        return report

    def stop_running(self, seq: SequenceState, phase: str) -> None:
        """Take a decoder out of the batch after its segment ends."""
        if seq not in self.running:
            raise StateError(f"request {seq.request_id} is not running")
        self.running.remove(seq)
        self.release(seq, keep=phase != DONE)
        seq.phase = phase

    def hit_rate(self) -> float:
        return hit_rate(self.hits, self.demands)


def hit_rate(hits: int, demands: int) -> float:
    if demands < 0 or hits < 0:
        raise InvalidInputError("hit and demand counts must be non-negative")
    return hits / demands if demands else 0.0
