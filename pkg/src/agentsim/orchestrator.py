"""The serving loop: arrivals, early-stop checks, retrieval completion, batched steps.

Retrieval *results* come from real searches over the index; retrieval
*time* is simulated as ``steps * per_candidate_cost`` (or a fixed cost for
exact search), so every run is a deterministic function of its inputs.
"""
from __future__ import annotations

import json
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from agentsim.ann.hnsw import HnswIndex
from agentsim.ann.search import (
    DEFAULT_TAU, DEFAULT_WINDOW, SearchTrace, results_at_step, search_natural,
)
from agentsim.ann.vectors import Dataset, brute_force_topk, recall
from agentsim.engine import (
    DONE, RETRIEVING, WAITING, Engine, EngineConfig, SequenceState, SimClock,
)
from agentsim.errors import ConfigError, StateError
from agentsim.metrics import MetricsSummary, mean, pending_ratio, percentile
from agentsim.scheduler import SchedulerPolicy, order_batch
from agentsim.workload import (
    ANSWER, RETRIEVE, RequestTrace, WorkloadConfig, generate_workload, query_vector,
    retry_segment,
)

ENN = "enn"
ANN = "ann"
ANN_NONSTALL = "ann_nonstall"
ENN_COST_PER_POINT = 5e-6


@dataclass(frozen=True)
class RetrievalMode:
    kind: str = ANN
    ef: int = 200
    tau: float = DEFAULT_TAU
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.kind not in (ENN, ANN, ANN_NONSTALL):
            raise ConfigError(f"retrieval mode must be enn, ann or ann_nonstall, got {self.kind!r}")
        if self.ef < 1 or self.window < 1 or not self.tau > 0:
            raise ConfigError("ef and window must be >= 1 and tau > 0")

    def __str__(self) -> str:
        return self.kind


@dataclass(frozen=True)
class RunConfig:
    retrieval_mode: RetrievalMode = field(default_factory=RetrievalMode)
    policy: str = "fcfs"
    top_k: int = 5
    engine: EngineConfig = field(default_factory=EngineConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    per_candidate_cost: float = 1e-4
    enn_cost: Optional[float] = None

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.per_candidate_cost < 0 or (self.enn_cost is not None and self.enn_cost < 0):
            raise ConfigError("retrieval costs must be non-negative")
        SchedulerPolicy.parse(self.policy)
        if self.retrieval_mode.kind != ENN and self.retrieval_mode.ef < self.top_k:
            raise ConfigError(f"ef ({self.retrieval_mode.ef}) must be >= top_k ({self.top_k})")

    @property
    def scheduler(self) -> SchedulerPolicy:
        return SchedulerPolicy.parse(self.policy)

    def enn_seconds(self, count: int) -> float:
        return self.enn_cost if self.enn_cost is not None else count * ENN_COST_PER_POINT


@dataclass
class RetrievalTask:
    request_id: int
    query: np.ndarray
    sim_start: float
    per_candidate_cost: float
    results: List[Tuple[int, float]]
    natural_finish_time: float
    trace: Optional[SearchTrace] = None
    maturity_time: Optional[float] = None
    terminated_early: bool = False
    result_cut: Optional[int] = None
    deliver_time: float = 0.0
    oracle: List[Tuple[int, float]] = field(default_factory=list)
    ef: int = 0
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        self.deliver_time = self.natural_finish_time
        if self.trace is not None and self.result_cut is None:
            self.result_cut = self.trace.natural_stop_step

    @property
    def maturity_step(self) -> Optional[int]:
        return None if self.trace is None else self.trace.maturity_step


class OracleCache:
    """Memoised exact top-k per query vector."""

    def __init__(self, ds: Dataset):
        self.ds = ds
        self._memo: Dict[Tuple[bytes, int], list] = {}

    def topk(self, q: np.ndarray, k: int) -> list:
        key = (q.tobytes(), k)
        hit = self._memo.get(key)
        if hit is None:
            hit = self._memo[key] = brute_force_topk(self.ds, q, k)
        return hit


def launch_retrieval(request_id: int, query: np.ndarray, cfg: RunConfig, index: HnswIndex,
                     ds: Dataset, now: float, oracle: OracleCache) -> RetrievalTask:
    mode = cfg.retrieval_mode
    truth = oracle.topk(query, cfg.top_k)
    if mode.kind == ENN:
        return RetrievalTask(request_id, query, now, 0.0, results=list(truth),
                             natural_finish_time=now + cfg.enn_seconds(ds.count), oracle=truth)
    tr = search_natural(index, query, mode.ef, cfg.top_k, mode.tau, mode.window)
    cost = cfg.per_candidate_cost
    task = RetrievalTask(
        request_id, query, now, cost, results=list(tr.final_topk),
        natural_finish_time=now + tr.natural_stop_step * cost, trace=tr, oracle=truth,
        ef=mode.ef, window=mode.window,
    )
    if tr.maturity_step is not None:
        task.maturity_time = now + tr.maturity_step * cost
    return task


def check_non_stall(tasks: Iterable[RetrievalTask], engine_ready: bool, now: float,
                    index: Optional[HnswIndex] = None, top_k: Optional[int] = None) -> List[int]:
    """Cut matured searches short while the engine could take their output.

    Terminated tasks get their results replaced by the top-k as it stood at
    the maturity step and are delivered at ``now``.
    """
    if not engine_ready:
        return []
    out = []
    for task in tasks:
        if task.terminated_early or task.maturity_time is None:
            continue
        if task.maturity_time <= now < task.natural_finish_time:
            task.terminated_early = True
            task.result_cut = task.maturity_step
            task.deliver_time = now
            if index is not None:
                task.results = results_at_step(index, task.query, task.ef, top_k or len(task.results),
                                               task.maturity_step, window=task.window)
            out.append(task.request_id)
    return out


def complete_retrieval(seq: SequenceState, docs_tokens: int, now: float) -> SequenceState:
    if seq.phase != RETRIEVING:
        raise StateError(f"request {seq.request_id} is {seq.phase}, not retrieving")
    seq.context_len += docs_tokens
    seq.r_i += 1
    seq.phase = WAITING
    seq.t_arr_current = now
    return seq


def naive_rag_latency(t_e2e_0: float, mean_ret: float, mean_count: float) -> float:
    """End-to-end latency if every retrieval ran before generation."""
    return t_e2e_0 + mean_ret * mean_count


def stall_accounting(events: Sequence[dict]) -> float:
    """Fraction of resumed sequences whose admission lagged their retrieval
    by more than the iteration that was running when it finished."""
    pending: Dict[int, dict] = {}
    resumed = stalled = 0
    for ev in events:
        kind = ev["kind"]
        if kind == "retrieve_end":
            pending[ev["request_id"]] = ev
        elif kind == "admit" and ev["request_id"] in pending:
            end = pending.pop(ev["request_id"])
            resumed += 1
            if ev["t"] - end["t"] > end["iter_latency"]:
                stalled += 1
    return stalled / resumed if resumed else 0.0


@dataclass
class _Request:
    trace: RequestTrace
    segments: list
    seq: Optional[SequenceState] = None
    seg_idx: int = 0
    extra_used: int = 0
    done_time: Optional[float] = None


@dataclass
class RunResult:
    summary: MetricsSummary
    events: List[dict]
    iterations: List[dict]
    tasks: List[RetrievalTask]
    requests: Dict[int, "_Request"]

    def summary_json(self) -> str:
        return self.summary.to_json()

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e) + "\n" for e in self.events)

    def iterations_jsonl(self) -> str:
        return "".join(json.dumps(e) + "\n" for e in self.iterations)


def _max_context_blocks(cfg: RunConfig, traces: Sequence[RequestTrace]) -> int:
    w = cfg.workload
    longest_seg = w.segment_tokens.max if w.segment_tokens.max is not None else None
    worst = 0
    for tr in traces:
        dec = sum(s.decode_tokens for s in tr.segments)
        if longest_seg is not None:
            dec += tr.max_extra_retrievals * longest_seg
        n_ret = tr.planned_retrievals + tr.max_extra_retrievals
        ctx = cfg.engine.shared_prefix_len + w.prompt_tokens + dec + n_ret * cfg.top_k * w.doc_tokens
        worst = max(worst, ctx)
    return -(-worst // cfg.engine.block_size)


def run(cfg: RunConfig, index: HnswIndex, ds: Dataset,
        traces: Optional[Sequence[RequestTrace]] = None, workers: int = 1,
        oracle: Optional[OracleCache] = None) -> RunResult:
    """Simulate one configuration to completion (offline) or to the end of the window (online)."""
    if index.count != ds.count or index.dim != ds.dim:
        raise ConfigError("index was not built over this dataset")
    if cfg.top_k > ds.count:
        raise ConfigError(f"top_k={cfg.top_k} exceeds dataset size {ds.count}")
    if traces is None:
        traces = generate_workload(cfg.workload, ds)
    need = _max_context_blocks(cfg, traces)
    if cfg.workload.segment_tokens.max is not None and need > cfg.engine.kv_capacity_blocks:
        raise ConfigError(
            f"a request can need {need} KV blocks but capacity is {cfg.engine.kv_capacity_blocks}")
    oracle = oracle or OracleCache(ds)
    policy = cfg.scheduler
    mode = cfg.retrieval_mode
    nonstall = mode.kind == ANN_NONSTALL
    wl = cfg.workload
    docs_tokens = cfg.top_k * wl.doc_tokens
    online = wl.arrival.kind == "poisson"
    horizon = wl.arrival.duration if online else None

    clock = SimClock()
    engine = Engine(cfg.engine, clock)
    arrivals = deque(sorted(traces, key=lambda t: (t.arrival_time, t.id)))
    reqs: Dict[int, _Request] = {}
    active: Dict[int, RetrievalTask] = {}
    finished_tasks: List[RetrievalTask] = []
    events: List[dict] = []
    iterations: List[dict] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def log(kind, t, rid, **extra):
        ev = {"kind": kind, "t": t, "request_id": rid}
        ev.update(extra)
        events.append(ev)

    try:
        while True:
            now = clock.now
            if online and now >= horizon:
                break

            # 1. arrivals
            while arrivals and arrivals[0].arrival_time <= now:
                tr = arrivals.popleft()
                seq = SequenceState(
                    request_id=tr.id,
                    context_len=cfg.engine.shared_prefix_len + wl.prompt_tokens,
                    t_arr_initial=tr.arrival_time,
                    t_arr_current=tr.arrival_time,
                    remaining_decode=tr.segments[0].decode_tokens,
                )
                reqs[tr.id] = _Request(tr, list(tr.segments), seq)
                engine.add_waiting(seq)
                log("arrival", tr.arrival_time, tr.id)

            # 2. early termination of matured searches
            if nonstall and active:
                ready = engine.is_ready()
                for rid in check_non_stall([active[r] for r in sorted(active)], ready, now,
                                           index, cfg.top_k):
                    t = active[rid]
                    log("early_stop", now, rid, step=t.result_cut,
                        natural_stop_step=t.trace.natural_stop_step)

            # 3. deliver finished searches
            due = sorted((t for t in active.values() if t.deliver_time <= now),
                         key=lambda t: (t.deliver_time, t.request_id))
            for task in due:
                del active[task.request_id]
                finished_tasks.append(task)
                req = reqs[task.request_id]
                ids = [i for i, _ in task.results]
                hit = task.oracle[0][0] in ids
                log("retrieve_end", task.deliver_time, task.request_id,
                    iter_latency=engine.last_latency, early=task.terminated_early,
                    success=hit, recall=recall(ids, [i for i, _ in task.oracle]))
                seg = req.segments[req.seg_idx]
                if not hit and req.extra_used < req.trace.max_extra_retrievals:
                    req.extra_used += 1
                    req.segments.insert(req.seg_idx + 1,
                                        retry_segment(wl, req.trace.id, req.extra_used, seg.query_point))
                complete_retrieval(req.seq, docs_tokens, now)
                req.seg_idx += 1
                req.seq.remaining_decode = req.segments[req.seg_idx].decode_tokens
                engine.add_waiting(req.seq)
                log("resume", now, task.request_id, context_len=req.seq.context_len)

            # 4. one batched step
            if engine.has_work():
                ordered = order_batch(engine.waiting, policy, now)
                rep = engine.run_iteration(ordered)
                for rid in rep.admitted:
                    log("admit", rep.time, rid)
                iterations.append(rep.to_json())
                log("iter", rep.time, None, computed=rep.prefilled_computed,
                    cached=rep.prefilled_cached, decoded=rep.decoded_seqs,
                    evicted=rep.evicted_blocks, latency=rep.latency)
                end = clock.now
                launches = []
                for rid in rep.segment_done:
                    req = reqs[rid]
                    seg = req.segments[req.seg_idx]
                    if seg.action == RETRIEVE:
                        engine.stop_running(req.seq, RETRIEVING)
                        q = query_vector(ds, seg.query_point, seg.noise_seed, wl.noise_scale)
                        launches.append((rid, q))
                        log("retrieve_start", end, rid)
                    else:
                        engine.stop_running(req.seq, DONE)
                        req.done_time = end
                        log("done", end, rid, latency=end - req.trace.arrival_time)

                def _launch(item):
                    return launch_retrieval(item[0], item[1], cfg, index, ds, end, oracle)

                if pool is not None and len(launches) > 1:
                    # the oracle memo is filled serially so threads only read it
                    for _, q in launches:
                        oracle.topk(q, cfg.top_k)
                    new_tasks = list(pool.map(_launch, launches))
                else:
                    new_tasks = [_launch(item) for item in launches]
                for task in new_tasks:
                    active[task.request_id] = task
                if not (rep.admitted or rep.decoded_seqs or active or arrivals):
                    stuck = [s.request_id for s in engine.waiting]
                    raise StateError(f"requests {stuck} can never be admitted; KV capacity too small")
                continue

            upcoming = []
            if arrivals:
                upcoming.append(arrivals[0].arrival_time)
            for task in active.values():
                upcoming.append(task.deliver_time)
                if nonstall and task.maturity_time is not None and task.maturity_time > now:
                    upcoming.append(task.maturity_time)
            if not upcoming:
                break
            nxt = min(upcoming)
            if online:
                nxt = min(nxt, horizon)
            clock.advance_to(max(nxt, now))
    finally:
        if pool is not None:
            pool.shutdown()

    end_time = horizon if online else clock.now
    summary = summarize(reqs, finished_tasks, events, engine, end_time,
                        initiated=len(reqs), ann=mode.kind != ENN)
    return RunResult(summary, events, iterations, finished_tasks, reqs)


def summarize(reqs: Dict[int, _Request], tasks: Sequence[RetrievalTask], events: Sequence[dict],
              engine: Engine, duration: float, initiated: int, ann: bool = True) -> MetricsSummary:
    done = [r for r in reqs.values() if r.done_time is not None]
    lat = [r.done_time - r.trace.arrival_time for r in sorted(done, key=lambda r: r.trace.id)]
    tokens = sum(r.seq.decoded_total + r.seq.prefill_computed_total for r in reqs.values())
    early = sum(1 for t in tasks if t.terminated_early)
    rec = [recall([i for i, _ in t.results], [i for i, _ in t.oracle]) for t in tasks]
    return MetricsSummary(
        requests_completed=len(done),
        duration=duration,
        throughput=len(done) / duration if duration > 0 else 0.0,
        token_throughput=tokens / duration if duration > 0 else 0.0,
        mean_latency=mean(lat),
        p50=percentile(lat, 50) if lat else 0.0,
        p99=percentile(lat, 99) if lat else 0.0,
        prefix_hit_rate=engine.hit_rate(),
        pending_ratio=pending_ratio(initiated, len(done)),
        stall_ratio=stall_accounting(events),
        mean_retrieval_count=mean([r.seq.r_i for r in done]),
        mean_retrieval_latency=mean([t.deliver_time - t.sim_start for t in tasks]),
        early_stop_fraction=early / len(tasks) if (tasks and ann) else 0.0,
        mean_recall=mean(rec),
    )
